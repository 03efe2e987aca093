"""Seeded multi-source benchmarks and the 1-D fixture of the two-uniforms example."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError, ParseError
from .geometry import HistogramDistribution, SourceCollection
from .training import LabeledBatch

KINDS = ("rotated-gaussians", "shifted-uniform-1d", "two-moons-rotation")


@dataclass(frozen=True)
class DomainSpec:
    kind: str = "rotated-gaussians"
    transform: float = 0.0  # rotation in degrees, or shift for the 1-D family
    n_classes: int = 3
    points_per_class: int = 100
    noise: float = 0.6
    radius: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown generator kind {self.kind!r}")
        if self.n_classes < 2 or self.points_per_class < 1:
            raise InvalidInputError("need n_classes >= 2 and points_per_class >= 1")
        if self.kind == "two-moons-rotation" and self.n_classes != 2:
            raise InvalidInputError("two-moons has exactly two classes")
        if self.noise < 0:
            raise InvalidInputError("noise must be non-negative")


@dataclass
class BenchmarkTask:
    sources: list
    target: LabeledBatch
    specs: list
    seed: int
    target_domain: int = field(default=-1)

    @property
    def n_classes(self):
        return self.specs[0].n_classes

    @property
    def dim(self):
        return self.target.dim


def rotation(degrees):
    t = np.deg2rad(degrees)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def class_centers(n_classes, radius):
    # Uneven angular spacing so no rotation maps the class layout onto itself.
    angles = np.linspace(0.0, 2 * np.pi, n_classes, endpoint=False)
    angles = angles + 0.35 * np.arange(n_classes) / n_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _canonical(spec, rng):
    """Untransformed points and labels, class-balanced."""
    n, c = spec.points_per_class, spec.n_classes
    y = np.repeat(np.arange(c), n)
    if spec.kind == "rotated-gaussians":
        x = class_centers(c, spec.radius)[y] + spec.noise * rng.standard_normal((n * c, 2))
    elif spec.kind == "two-moons-rotation":
        t = rng.uniform(0.0, np.pi, n * c)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where((y == 0)[:, None], upper, lower) - np.array([0.5, 0.25])
        x = spec.radius * x + spec.noise * rng.standard_normal((n * c, 2))
    else:
        # class j occupies [2j/c, 2(j+1)/c) of a width-2 window
        u = rng.uniform(0.0, 1.0, n * c)
        x = ((y + u) * 2.0 / c)[:, None] + spec.noise * rng.standard_normal((n * c, 1))
    return x, y


def apply_transform(spec, x):
    if spec.kind == "shifted-uniform-1d":
        return x + spec.transform
    return x @ rotation(spec.transform).T


def invert_transform(spec, x):
    if spec.kind == "shifted-uniform-1d":
        return x - spec.transform
    return x @ rotation(-spec.transform).T


def generate_domain(spec, domain_label, rng):
    x, y = _canonical(spec, rng)
    x = apply_transform(spec, x)
    return LabeledBatch(x, y, np.full(len(y), domain_label))


def generate(specs, seed, target_index=-1):
    """Sources plus one target domain; ``specs[target_index]`` is the target.

    Sources get domain labels 0..k-1 in order; the target carries label k.
    """
    specs = list(specs)
    if len(specs) < 3:
        raise InvalidInputError("need at least two sources and a target")
    transforms = [s.transform for s in specs]
    if len(set(transforms)) != len(transforms):
        raise InvalidInputError("domain transforms must be distinct")
    kinds = {(s.kind, s.n_classes) for s in specs}
    if len(kinds) != 1:
        raise InvalidInputError("all domains must share generator kind and class count")
    t_idx = target_index % len(specs)
    children = np.random.SeedSequence(seed).spawn(len(specs))
    source_specs = [s for i, s in enumerate(specs) if i != t_idx]
    source_seqs = [c for i, c in enumerate(children) if i != t_idx]
    sources = [
        generate_domain(s, d, np.random.default_rng(c))
        for d, (s, c) in enumerate(zip(source_specs, source_seqs))
    ]
    target = generate_domain(specs[t_idx], len(sources), np.random.default_rng(children[t_idx]))
    return BenchmarkTask(sources, target, source_specs + [specs[t_idx]], seed, len(sources))


def rotated_benchmark(
    seed=0, source_angles=(0.0, 15.0, 30.0), target_angle=45.0, n_classes=3, per_domain=300, noise=0.6
):
    """Default desk-scale task: three rotated sources, held-out rotation as target."""
    ppc = per_domain // n_classes
    specs = [
        DomainSpec("rotated-gaussians", a, n_classes, ppc, noise)
        for a in (*source_angles, target_angle)
    ]
    return generate(specs, seed)


def identical_sources(seed=0, k=3, n_classes=3, per_domain=300, noise=0.6):
    """k sources sharing one point set; only the domain labels differ."""
    spec = DomainSpec("rotated-gaussians", 0.0, n_classes, per_domain // n_classes, noise)
    base = generate_domain(spec, 0, np.random.default_rng(seed))
    return [LabeledBatch(base.points, base.class_labels, np.full(len(base), d)) for d in range(k)]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_dataset(task, path):
    header = {
        "seed": task.seed,
        "target_domain": task.target_domain,
        "specs": [asdict(s) for s in task.specs],
    }
    dim = task.dim
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        fh.write(",".join([f"x{i}" for i in range(dim)] + ["class_label", "domain_label"]) + "\n")
        for b in [*task.sources, task.target]:
            for x, y, d in zip(b.points, b.class_labels, b.domain_labels):
                fh.write(",".join([repr(float(v)) for v in x] + [str(int(y)), str(int(d))]) + "\n")


def read_dataset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ParseError(f"{path}:1: missing JSON header line")
    try:
        header = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: bad header: {exc.msg}") from None
    columns = lines[1].split(",")
    dim = len(columns) - 2
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise ParseError(f"{path}:{lineno}: expected {dim + 2} fields")
        try:
            rows.append(([float(v) for v in parts[:dim]], int(parts[dim]), int(parts[dim + 1])))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    x = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    d = np.array([r[2] for r in rows])
    t = header["target_domain"]
    sources = [LabeledBatch(x[d == i], y[d == i], d[d == i]) for i in range(t)]
    target = LabeledBatch(x[d == t], y[d == t], d[d == t])
    specs = [DomainSpec(**s) for s in header["specs"]]
    return BenchmarkTask(sources, target, specs, header["seed"], t)


# ---------------------------------------------------------------------------
# Two-uniforms fixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Example1Fixture:
    sources: SourceCollection  # U(0,2), U(2,4)
    s: HistogramDistribution  # U(1,3), inside the balls but not a mixture
    far: HistogramDistribution  # U(4,5)
    tight_sources: SourceCollection  # U(0,2), U(1,3): max gap 1, so `far` fails


def example1_fixture():
    """Two disjoint uniforms on a unit grid over [-1, 5], plus candidates.

    With disjoint sources the largest pairwise divergence already equals the
    ceiling 2, so nothing can fail the condition against them; the far-away
    candidate is therefore paired with an overlapping source pair whose
    largest gap is 1.
    """
    edges = np.arange(-1.0, 6.0)
    u = HistogramDistribution.uniform
    sources = SourceCollection((u(0, 2, edges), u(2, 4, edges)))
    s = u(1, 3, edges)
    far = u(4, 5, edges)
    tight = SourceCollection((u(0, 2, edges), u(1, 3, edges)))
    return Example1Fixture(sources, s, far, tight)
