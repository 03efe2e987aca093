"""Command-line front door: geometry checks, data, training, bounds, suites, sweeps.

Every command that writes files also writes ``manifest.json``, listing the
fully resolved config and a SHA-256 for each output.  ``replay`` reruns a
manifest into a scratch directory and compares the hashes.

Exit codes: 0 success, 2 usage, 3 parse error, 4 invariant violation,
5 numerical divergence, 6 verification failure, 7 degenerate bound object,
8 resource limit.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import platform
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import geometry as geo
from . import nn
from .bounds import FiniteWorld, HistogramWorld, da_bound_report, dg_bound_report
from .cooperative import CooperativeConfig, select_step_size, train_dannce
from .divergence import write_curve_jsonl
from .domains import DomainSpec, example1_fixture, generate, read_dataset, rotated_benchmark, write_dataset
from .errors import (
    ContractViolation,
    DegenerateObjectError,
    GenerationError,
    InvalidInputError,
    ParseError,
    ResourceLimitError,
    TrainingDivergenceError,
)
from .training import TrainingConfig, train_dann, train_erm, write_metrics_csv, write_metrics_jsonl
from .verification import SUITES, run_suite

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_INVARIANT = 4
EXIT_DIVERGENCE = 5
EXIT_VERIFICATION = 6
EXIT_DEGENERATE = 7
EXIT_RESOURCE = 8

OUT_ENV = "DANNCE_LAB_OUT"
MODES = ("erm", "dann", "dannce")


class VerificationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Config and manifest plumbing
# ---------------------------------------------------------------------------


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ParseError(f"{path}: config file not found")
    text = p.read_text()
    try:
        cfg = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ParseError(f"{path}:1: config must be a JSON object")
    return cfg


def _resolve_path(value, base):
    """Paths in a config are relative to the config file's directory."""
    p = Path(value)
    return p if p.is_absolute() or base is None else Path(base) / p


def _dataclass_from(cls, record, what):
    record = dict(record or {})
    known = {f.name for f in fields(cls)}
    unknown = set(record) - known
    if unknown:
        raise ParseError(f"unknown {what} field(s): {', '.join(sorted(unknown))}")
    return cls(**record)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, cfg, seed, outputs):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": {
            "dannce_lab": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "outputs": {name: file_sha256(Path(out) / name) for name in sorted(outputs)},
    }
    with open(Path(out) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _geometry_entry(name, sources, candidates, weights=None):
    coll = geo.SourceCollection(tuple(sources.values()), weights)
    rho = geo.max_pairwise_divergence(coll.sources)
    names = list(sources)
    pair = geo.pairwise_divergences(coll.sources)
    entry = {
        "name": name,
        "sources": names,
        "weights": coll.weights.tolist(),
        "pairwise_divergence": {
            f"{names[i]}|{names[j]}": float(pair[i, j])
            for i in range(len(names))
            for j in range(i + 1, len(names))
        },
        "max_pairwise_divergence": rho,
        "candidates": {},
    }
    for cname, s in candidates.items():
        rec = geo.check_condition(coll, s, rho=rho).to_record()
        rec["divergence_to_sources"] = [geo.exact_interval_divergence(p, s) for p in coll.sources]
        rec["in_intersection"] = geo.intersection_membership(coll, s, rho=rho)
        rec["in_union"] = geo.union_membership(coll, s, rho=rho)
        entry["candidates"][cname] = rec
    return entry


def _example1_entries():
    fx = example1_fixture()
    p1, p2 = fx.sources.sources
    t1, t2 = fx.tight_sources.sources
    return [
        _geometry_entry("example1", {"U(0,2)": p1, "U(2,4)": p2}, {"U(1,3)": fx.s, "U(4,5)": fx.far}),
        # overlapping pair: ρ = 1, so the far candidate now fails
        _geometry_entry("example1-overlapping", {"U(0,2)": t1, "U(1,3)": t2}, {"U(4,5)": fx.far}),
    ]


def cmd_geometry(cfg, out, base=None):
    fixtures = cfg.get("fixtures", ["example1"])
    if not isinstance(fixtures, list):
        raise ParseError("'fixtures' must be a list")
    reports = []
    for fx in fixtures:
        if fx == "example1":
            reports.extend(_example1_entries())
            continue
        if not isinstance(fx, dict) or "path" not in fx:
            raise ParseError("each fixture is 'example1' or an object with 'path'")
        hists = geo.load_histograms(_resolve_path(fx["path"], base))
        if not isinstance(hists, dict):
            hists = {f"h{i}": h for i, h in enumerate(hists)}
        src_names = fx.get("sources", list(hists)[:2])
        cand_names = fx.get("candidates", [n for n in hists if n not in src_names])
        missing = [n for n in [*src_names, *cand_names] if n not in hists]
        if missing:
            raise ParseError(f"{fx['path']}: unknown histogram name(s) {missing}")
        reports.append(
            _geometry_entry(
                fx.get("name", str(fx["path"])),
                {n: hists[n] for n in src_names},
                {n: hists[n] for n in cand_names},
                fx.get("weights"),
            )
        )
    _write_json(Path(out) / "geometry_report.json", {"reports": reports})
    return ["geometry_report.json"]


# ---------------------------------------------------------------------------
# gen-data / train
# ---------------------------------------------------------------------------


def _make_task(data_cfg, seed):
    data_cfg = dict(data_cfg or {})
    data_seed = data_cfg.pop("seed", seed)
    if "specs" in data_cfg:
        specs = [_dataclass_from(DomainSpec, s, "domain spec") for s in data_cfg.pop("specs")]
        return generate(specs, data_seed, data_cfg.pop("target_index", -1))
    allowed = {"source_angles", "target_angle", "n_classes", "per_domain", "noise"}
    unknown = set(data_cfg) - allowed
    if unknown:
        raise ParseError(f"unknown data field(s): {', '.join(sorted(unknown))}")
    if "source_angles" in data_cfg:
        data_cfg["source_angles"] = tuple(data_cfg["source_angles"])
    return rotated_benchmark(seed=data_seed, **data_cfg)


def cmd_gen_data(cfg, out, seed):
    task = _make_task(cfg.get("data"), seed)
    write_dataset(task, Path(out) / "dataset.csv")
    return ["dataset.csv"]


def _load_task(cfg, seed, base):
    if "dataset" in cfg:
        path = _resolve_path(cfg["dataset"], base)
        if not path.is_file():
            raise ParseError(f"{path}: dataset file not found")
        return read_dataset(path)
    return _make_task(cfg.get("data"), seed)


def cmd_train(cfg, out, seed, mode, base=None):
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}")
    task = _load_task(cfg, seed, base)
    tcfg = _dataclass_from(TrainingConfig, {**cfg.get("training", {}), "seed": seed}, "training")
    net_cfg = dict(cfg.get("network", {}))
    unknown = set(net_cfg) - {"hidden", "feature_dim", "head_hidden"}
    if unknown:
        raise ParseError(f"unknown network field(s): {', '.join(sorted(unknown))}")

    def make():
        return nn.make_triple(task.dim, task.n_classes, len(task.sources), np.random.default_rng([seed, 1]), **net_cfg)

    outputs = []
    if mode == "erm":
        res = train_erm(make(), task.sources, tcfg, target=task.target)
    elif mode == "dann":
        res = train_dann(make(), task.sources, tcfg, target=task.target)
    else:
        coop_rec = dict(cfg.get("cooperative", {}))
        if coop_rec.get("step_size") == "auto":
            coop_rec.pop("step_size")
            base_coop = _dataclass_from(CooperativeConfig, coop_rec, "cooperative")
            best, scores = select_step_size(make, task.sources, tcfg, base_coop, seed=seed)
            coop_rec["step_size"] = best
            _write_json(Path(out) / "step_size_selection.json", {"selected": best, "validation_loss": {str(k): v for k, v in scores.items()}})
            outputs.append("step_size_selection.json")
        coop = _dataclass_from(CooperativeConfig, coop_rec, "cooperative")
        res = train_dannce(make(), task.sources, tcfg, coop, target=task.target)

    out = Path(out)
    write_metrics_csv(res.metrics, out / "metrics.csv")
    write_metrics_jsonl(res.metrics, out / "metrics.jsonl")
    write_curve_jsonl(res.domain_loss_curve, out / "domain_loss_curve.jsonl")
    nn.save_checkpoint(res.triple, out / "checkpoint.json")
    return outputs + ["metrics.csv", "metrics.jsonl", "domain_loss_curve.jsonl", "checkpoint.json"]


# ---------------------------------------------------------------------------
# bound
# ---------------------------------------------------------------------------


def _bound_world(cfg, base):
    kind = cfg.get("world", "example1")
    if kind == "example1":
        fx = example1_fixture()
        edges = fx.s.grid_edges
        labels = cfg.get("labels", ((edges[:-1] >= 0) & (edges[:-1] < 2)).astype(int).tolist())
        return HistogramWorld(edges, labels), fx.sources, fx.s
    if kind == "finite":
        try:
            cls = geo.FiniteHypothesisClass(cfg["hypotheses"])
            world = FiniteWorld(cls, cfg["labels"], cfg.get("target_labels"))
            srcs = [geo.FiniteDistribution(m) for m in cfg["sources"]]
            target = geo.FiniteDistribution(cfg["target"])
        except KeyError as exc:
            raise ParseError(f"finite world config missing field {exc}") from None
        return world, geo.SourceCollection(tuple(srcs), cfg.get("weights")), target
    if kind == "histogram":
        try:
            hists = geo.load_histograms(_resolve_path(cfg["fixture"], base))
            srcs = [hists[n] for n in cfg["sources"]]
            target = hists[cfg["target"]]
        except KeyError as exc:
            raise ParseError(f"histogram world config missing field or name {exc}") from None
        edges = geo.regrid(*srcs, target)[0].grid_edges
        srcs = [geo.resample(s, edges) for s in srcs]
        target = geo.resample(target, edges)
        labels = cfg.get("labels", [0] * (edges.size - 1))
        return HistogramWorld(edges, labels), geo.SourceCollection(tuple(srcs), cfg.get("weights")), target
    raise ParseError(f"unknown world {kind!r}")


def cmd_bound(cfg, out, seed, base=None):
    world, sources, target = _bound_world(cfg, base)
    resolution = int(cfg.get("resolution", 50))
    n_perturb = int(cfg.get("n_perturb", 200))
    rows = []
    for i, h in enumerate(world.hypotheses()):
        pair = {}
        for mode in ("mixture-hull", "ball-intersection"):
            pair[mode] = dg_bound_report(world, h, sources, target, mode, resolution, n_perturb, seed).to_record()
        rows.append({"hypothesis": i, "labeling": [int(v) for v in h], **pair})
    report = {
        "n_hypotheses": len(rows),
        "all_hold": all(r[m]["observed_target_error"] <= r[m]["total_bound"] + 1e-12
                        for r in rows for m in ("mixture-hull", "ball-intersection")),
        "reports": rows,
    }
    if cfg.get("single_source", False):
        report["single_source"] = [
            da_bound_report(world, h, sources.sources[0], target).to_record() for h in world.hypotheses()
        ]
    _write_json(Path(out) / "bound_report.json", report)
    return ["bound_report.json"]


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(suite, out, seed):
    names = list(SUITES) if suite == "all" else [suite]
    results = [run_suite(n, seed) for n in names]
    for r in results:
        print("\n".join(r.summary_lines()))
    record = [r.to_record() for r in results]
    for rec in record:
        rec.pop("seconds")  # keep the report byte-stable across reruns
    _write_json(Path(out) / "verify_report.json", record)
    if not all(r.passed for r in results):
        raise VerificationFailure(", ".join(r.name for r in results if not r.passed))
    return ["verify_report.json"]


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _set_dotted(cfg, key, value):
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _sweep_run(args):
    run_cfg, run_out, seed, mode = args
    Path(run_out).mkdir(parents=True, exist_ok=True)
    outputs = cmd_train(run_cfg, run_out, seed, mode)
    write_manifest(run_out, "train", {"train": run_cfg, "mode": mode}, seed, outputs)
    with open(Path(run_out) / "metrics.jsonl") as fh:
        last = json.loads(fh.read().splitlines()[-1])
    return last


def cmd_sweep(cfg, out, seed, base=None):
    """Cartesian product over ``grid`` (dotted keys), modes and seeds."""
    base_cfg = dict(cfg.get("base", {}))
    if "dataset" in base_cfg:
        base_cfg["dataset"] = str(_resolve_path(base_cfg["dataset"], base))
    grid = cfg.get("grid", {})
    modes = cfg.get("modes", ["dann"])
    seeds = cfg.get("seeds", [seed])
    workers = int(cfg.get("workers", 1))
    keys = sorted(grid)
    jobs, rows = [], []
    for combo in itertools.product(*(grid[k] for k in keys)):
        for mode in modes:
            for s in seeds:
                run_cfg = json.loads(json.dumps(base_cfg))
                for k, v in zip(keys, combo):
                    _set_dotted(run_cfg, k, v)
                tag = "_".join([mode, f"seed{s}"] + [f"{k.split('.')[-1]}{v}" for k, v in zip(keys, combo)])
                jobs.append((run_cfg, str(Path(out) / tag), s, mode))
                rows.append({"run": tag, "mode": mode, "seed": s, **dict(zip(keys, combo))})
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(_sweep_run, jobs))
    else:
        finals = [_sweep_run(j) for j in jobs]
    header = ["run", "mode", "seed", *keys, "task_loss", "domain_loss", "target_accuracy"]
    with open(Path(out) / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, last in zip(rows, finals):
            row.update({k: last[k] for k in ("task_loss", "domain_loss", "target_accuracy")})
            w.writerow([row[h] for h in header])
    outputs = ["sweep_summary.csv"]
    for _, run_out, _, _ in jobs:
        rel = Path(run_out).relative_to(out)
        for name in sorted(os.listdir(run_out)):
            outputs.append(str(rel / name))
    return outputs


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def execute(command, cfg, out, seed, mode=None, suite=None, base=None):
    """Run one command into ``out``; returns the list of output files."""
    Path(out).mkdir(parents=True, exist_ok=True)
    if command == "geometry":
        return cmd_geometry(cfg, out, base)
    if command == "gen-data":
        return cmd_gen_data(cfg, out, seed)
    if command == "train":
        return cmd_train(cfg, out, seed, mode or cfg.get("mode", "dann"), base)
    if command == "bound":
        return cmd_bound(cfg, out, seed, base)
    if command == "verify":
        return cmd_verify(suite, out, seed)
    if command == "sweep":
        return cmd_sweep(cfg, out, seed, base)
    raise InvalidInputError(f"unknown command {command!r}")


def _absolutise(cfg, base):
    """Make config file references absolute so the manifest is self-contained."""
    cfg = json.loads(json.dumps(cfg))
    for key in ("dataset", "fixture"):
        if key in cfg:
            cfg[key] = str(_resolve_path(cfg[key], base).resolve())
    for fx in cfg.get("fixtures", []):
        if isinstance(fx, dict) and "path" in fx:
            fx["path"] = str(_resolve_path(fx["path"], base).resolve())
    if isinstance(cfg.get("base"), dict) and "dataset" in cfg["base"]:
        cfg["base"]["dataset"] = str(_resolve_path(cfg["base"]["dataset"], base).resolve())
    return cfg


def run(command, cfg, out, seed, mode=None, suite=None, base=None):
    cfg = _absolutise(cfg, base)
    outputs = execute(command, cfg, out, seed, mode, suite)
    manifest_cfg = {"command_config": cfg, "mode": mode, "suite": suite}
    return write_manifest(out, command, manifest_cfg, seed, outputs)


def replay(manifest_path, out=None):
    """Rerun a manifest; returns the list of outputs whose hash differs."""
    path = Path(manifest_path)
    if not path.is_file():
        raise ParseError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(path.read_text())
        command, cfg, seed = manifest["command"], manifest["config"], manifest["seed"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"{manifest_path}: not a run manifest ({exc})") from None
    out = out or tempfile.mkdtemp(prefix="dannce-replay-")
    execute(command, cfg["command_config"], out, seed, cfg.get("mode"), cfg.get("suite"))
    mismatched = []
    for name, digest in manifest["outputs"].items():
        p = Path(out) / name
        if not p.is_file() or file_sha256(p) != digest:
            mismatched.append(name)
    return mismatched, out


def build_parser():
    parser = argparse.ArgumentParser(prog="dannce-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./out/<command>)")
        if mode:
            p.add_argument("--mode", choices=MODES, default=None)

    common(sub.add_parser("geometry", help="divergence, condition and ball checks on fixtures"))
    common(sub.add_parser("gen-data", help="write a seeded multi-domain dataset"))
    common(sub.add_parser("train", help="train ERM, DANN or DANNCE"), mode=True)
    common(sub.add_parser("bound", help="bound reports for both reference objects"))
    common(sub.add_parser("sweep", help="grid of training runs"), mode=True)
    p = sub.add_parser("verify", help="run a seeded oracle suite")
    p.add_argument("suite", choices=[*SUITES, "all"])
    common(p)
    p = sub.add_parser("replay", help="rerun a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            bad, where = replay(args.manifest, args.out)
            if bad:
                print(f"replay differs in: {', '.join(bad)} (outputs in {where})", file=sys.stderr)
                return EXIT_VERIFICATION
            print(f"replay identical ({where})")
            return EXIT_OK
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent if args.config else None
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            seed = 0
        out = args.out or os.environ.get(OUT_ENV) or str(Path("out") / args.command)
        mode = getattr(args, "mode", None)
        if args.command == "sweep" and mode:
            cfg = {**cfg, "modes": [mode]}
        manifest = run(args.command, cfg, out, int(seed), mode, getattr(args, "suite", None), base)
        print(f"{args.command}: wrote {len(manifest['outputs'])} file(s) and manifest.json to {out}")
        return EXIT_OK
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (TrainingDivergenceError, GenerationError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DegenerateObjectError as exc:
        print(f"degenerate object: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (InvalidInputError, ContractViolation) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
