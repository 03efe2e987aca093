"""Seeded oracle suites shared by the ``verify`` command and the acceptance tests.

Each suite returns a :class:`SuiteResult` with per-property pass counts.
Suites never raise on a failed property; they count it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import nn
from .bounds import (
    FiniteWorld,
    HistogramWorld,
    dg_bound_report,
    find_contracting_gamma,
)
from .errors import InvalidInputError
from .training import LabeledBatch, objective_gradients, source_domain_loss, task_loss


@dataclass
class SuiteResult:
    name: str
    counts: dict = field(default_factory=dict)  # property -> [passed, total]
    max_error: float = 0.0
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    def record(self, prop, ok):
        c = self.counts.setdefault(prop, [0, 0])
        c[0] += bool(ok)
        c[1] += 1

    @property
    def passed(self):
        return all(p == t for p, t in self.counts.values()) and bool(self.counts)

    def to_record(self):
        return {
            "suite": self.name,
            "passed": self.passed,
            "counts": {k: {"passed": p, "total": t} for k, (p, t) in self.counts.items()},
            "max_error": self.max_error,
            "seconds": self.seconds,
            "notes": list(self.notes),
        }

    def summary_lines(self):
        lines = [f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({self.seconds:.2f}s)"]
        for k, (p, t) in self.counts.items():
            lines.append(f"  {k}: {p}/{t}")
        if self.max_error:
            lines.append(f"  max error: {self.max_error:.3g}")
        lines.extend(f"  {n}" for n in self.notes)
        return lines


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@_timed
def example1(resolution=100):
    """The two-uniforms example: exact divergences and the condition for every φ."""
    from .domains import example1_fixture

    fx = example1_fixture()
    p1, p2 = fx.sources.sources
    res = SuiteResult("example1")
    res.record("d(U(0,2),U(2,4)) == 2", geo.exact_interval_divergence(p1, p2) == 2.0)
    for name, p in (("d(U(0,2),U(1,3)) == 1", p1), ("d(U(2,4),U(1,3)) == 1", p2)):
        res.record(name, geo.exact_interval_divergence(p, fx.s) == 1.0)
        res.record(name + " (brute force)", geo.brute_force_interval_divergence(p, fx.s) == 1.0)
    rho = geo.max_pairwise_divergence(fx.sources.sources)
    for w in geo.simplex_grid(2, resolution):
        res.record("condition for phi on grid", geo.check_condition(fx.sources, fx.s, w, rho=rho).passed)
    return res


def _random_pair(rng, max_bins):
    n = int(rng.integers(1, max_bins + 1))
    if rng.random() < 0.5:
        edges = np.arange(n + 1, dtype=float)
        return (
            geo.random_histogram(rng, grid_edges=edges, sparsity=rng.uniform(0, 0.7)),
            geo.random_histogram(rng, grid_edges=edges, sparsity=rng.uniform(0, 0.7)),
        )
    # independent grids over a shared range exercise the regridding path
    def grid(k):
        inner = np.sort(rng.uniform(0.0, 10.0, k - 1))
        return np.unique(np.concatenate([[0.0], inner, [10.0]]))

    m = int(rng.integers(1, max_bins + 1))
    return (
        geo.random_histogram(rng, grid_edges=grid(n), sparsity=rng.uniform(0, 0.7)),
        geo.random_histogram(rng, grid_edges=grid(m), sparsity=rng.uniform(0, 0.7)),
    )


@_timed
def divergence_oracle(n_cases=1000, max_bins=64, seed=0, tol=1e-12):
    """Maximum-subarray scan against O(n²) enumeration of bin ranges."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("divergence-oracle")
    for _ in range(n_cases):
        p, q = _random_pair(rng, max_bins)
        err = abs(geo.exact_interval_divergence(p, q) - geo.brute_force_interval_divergence(p, q))
        res.max_error = max(res.max_error, err)
        res.record("scan == enumeration", err <= tol)
    return res


@_timed
def pseudometric(n_cases=1000, max_bins=64, seed=0, tol=1e-9):
    """Symmetry, identity and the triangle inequality on random triples."""
    rng = np.random.default_rng(seed)
    d = geo.exact_interval_divergence
    res = SuiteResult("pseudometric")
    for _ in range(n_cases):
        n = int(rng.integers(1, max_bins + 1))
        edges = np.arange(n + 1, dtype=float)
        p, q, r = (geo.random_histogram(rng, grid_edges=edges, sparsity=rng.uniform(0, 0.7)) for _ in range(3))
        pq, qp = d(p, q), d(q, p)
        res.record("symmetry", abs(pq - qp) <= tol)
        res.record("identity", abs(d(p, p)) <= tol)
        res.record("non-negative", pq >= -tol)
        res.record("triangle", pq <= d(p, r) + d(r, q) + tol)
    return res


def random_finite_instance(rng, max_support=6, max_sources=3):
    """Support size, a random non-empty sub-class of all labelings, and sources."""
    n = int(rng.integers(2, max_support + 1))
    labelings = geo.all_labelings(n).hypotheses
    size = int(rng.integers(1, len(labelings) + 1))
    pick = np.sort(rng.choice(len(labelings), size=size, replace=False))
    cls = geo.FiniteHypothesisClass(labelings[pick])
    k = int(rng.integers(2, max_sources + 1))
    sources = geo.SourceCollection(tuple(_finite_dist(rng, n) for _ in range(k)))
    return cls, sources


def _finite_dist(rng, n):
    mass = rng.dirichlet(np.full(n, rng.choice([0.3, 1.0, 3.0])))
    if rng.random() < 0.3:
        keep = rng.random(n) < 0.6
        if keep.any():
            mass = np.where(keep, mass, 0.0)
    return geo.FiniteDistribution(mass / mass.sum())


@_timed
def prop2(n_instances=1000, seed=0, n_phi=20, n_candidates=10, max_support=6):
    """The three ball/mixture statements by enumeration on finite worlds.

    1. every mixture of the sources lies in every ρ-ball;
    2. every point in the intersection satisfies the condition for every φ;
    3. every point outside all balls violates it for every φ.
    """
    rng = np.random.default_rng(seed)
    res = SuiteResult("prop2")
    for _ in range(n_instances):
        cls, sources = random_finite_instance(rng, max_support)
        div = cls.hdh_divergence
        k = len(sources)
        rho = geo.max_pairwise_divergence(sources.sources, div)
        phis = [np.eye(k)[i] for i in range(k)] + [rng.dirichlet(np.ones(k)) for _ in range(n_phi)]
        for _ in range(n_candidates):
            m = geo.mixture(sources, rng.dirichlet(np.full(k, 0.5)))
            res.record("statement 1: mixtures in every ball", geo.intersection_membership(sources, m, div, rho))
        cands = [_finite_dist(rng, cls.support_size) for _ in range(n_candidates)]
        cands += [geo.mixture(sources, rng.dirichlet(np.ones(k))) for _ in range(n_candidates // 2)]
        for s in cands:
            dists = [div(p, s) for p in sources.sources]
            inside = all(d <= rho + geo.MEMBERSHIP_TOL for d in dists)
            outside = all(d > rho + geo.MEMBERSHIP_TOL for d in dists)
            if inside:
                ok = all(geo.check_condition(sources, s, w, div, rho).passed for w in phis)
                res.record("statement 2: intersection implies condition", ok)
            if outside:
                ok = not any(geo.check_condition(sources, s, w, div, rho).passed for w in phis)
                res.record("statement 3: outside all balls implies failure", ok)
    return res


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def _swap(triple, name, flat):
    nets = dict(triple.named())
    nets[name] = nn.DenseNetwork.from_flat(nets[name].descriptor(), flat)
    return nn.NetworkTriple(nets["extractor"], nets["task_head"], nets["domain_head"])


def _param_fd(triple, name, f):
    net = dict(triple.named())[name]
    return numeric_grad(lambda flat: f(_swap(triple, name, flat)), net.flat_parameters())


@_timed
def gradcheck(n_configs=100, seed=0, tol=1e-4):
    """Analytic gradients of every loss against central finite differences."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("gradcheck")

    def check(prop, analytic, numeric):
        e = rel_error(analytic, numeric)
        res.max_error = max(res.max_error, e)
        res.record(prop, e < tol)

    for _ in range(n_configs):
        dim, c, k = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 4))
        n = int(rng.integers(2, 7))
        triple = nn.make_triple(dim, c, k, rng, hidden=int(rng.integers(2, 6)), feature_dim=int(rng.integers(2, 5)),
                                head_hidden=int(rng.integers(2, 6)))
        batch = LabeledBatch(rng.standard_normal((n, dim)), rng.integers(0, c, n), rng.integers(0, k, n))
        z = rng.standard_normal((n, c)) * 2
        zq = rng.standard_normal((n, c))

        check("task CE (logits)", nn.cross_entropy(z, batch.class_labels)[1],
              numeric_grad(lambda a: nn.cross_entropy(a, batch.class_labels)[0], z))
        check("entropy (logits)", nn.entropy_loss(z)[1], numeric_grad(lambda a: nn.entropy_loss(a)[0], z))
        check("KL (logits)", nn.kl_divergence(z, zq)[1], numeric_grad(lambda a: nn.kl_divergence(z, a)[0], zq))

        ent = float(rng.uniform(0.0, 0.5))
        _, tapes = task_loss(triple, batch, ent)
        for name in ("task_head", "extractor"):
            check(f"task loss ({name})", tapes[name].flat(),
                  _param_fd(triple, name, lambda t: task_loss(t, batch, ent)[0]))

        lam = float(rng.uniform(0.05, 1.0))
        _, tapes = source_domain_loss(triple, batch, lam)
        sd = lambda t: source_domain_loss(t, batch)[0]
        check("L_SD (domain_head)", tapes["domain_head"].flat(), _param_fd(triple, "domain_head", sd))
        check("L_SD reversed (extractor)", tapes["extractor"].flat(), -lam * _param_fd(triple, "extractor", sd))

        step = objective_gradients(triple, batch, lam, ent)
        outer = lambda t: task_loss(t, batch, ent)[0] - lam * source_domain_loss(t, batch)[0]
        check("objective (extractor)", step.tapes["extractor"].flat(), _param_fd(triple, "extractor", outer))
        check("objective (task_head)", step.tapes["task_head"].flat(), _param_fd(triple, "task_head", outer))
        check("objective (domain_head)", step.tapes["domain_head"].flat(), _param_fd(triple, "domain_head", sd))
    return res


# ---------------------------------------------------------------------------
# Bounds and contraction
# ---------------------------------------------------------------------------


@_timed
def contraction(n_instances=20, seed=0, steps=100, target=0.99):
    """Halving search finds a step size contracting the proxy on each instance."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("contraction")
    worst = 1.0
    for i in range(n_instances):
        dim = int(rng.integers(1, 4))
        n = int(rng.integers(40, 120))
        p = rng.standard_normal((n, dim))
        q = rng.standard_normal((n, dim)) * rng.uniform(0.5, 2.0) + rng.uniform(-2.0, 2.0, dim)
        rep = nn.init_network([dim, int(rng.integers(4, 17)), int(rng.integers(2, 9))], ["tanh", "tanh"], rng)
        try:
            trace = find_contracting_gamma(p, q, rep, steps=steps, target=target, seed=int(rng.integers(2**31)))
        except InvalidInputError:
            res.record("contracting gamma found", False)
            continue
        frac = trace.fraction_contracting()
        worst = min(worst, frac)
        res.record("contracting gamma found", frac >= target)
    res.notes.append(f"worst contracting fraction {worst:.4f}")
    return res


@_timed
def bound_validity(n_instances=200, seed=0, max_support=6):
    """Observed target error never exceeds the bound, for every hypothesis."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("bound-validity")
    for i in range(n_instances):
        cls, sources = random_finite_instance(rng, max_support)
        n = cls.support_size
        labels = rng.integers(0, 2, n)
        target_labels = labels if rng.random() < 0.5 else rng.integers(0, 2, n)
        world = FiniteWorld(cls, labels, target_labels)
        target = _finite_dist(rng, n)
        mode = "mixture-hull" if i % 2 == 0 else "ball-intersection"
        for h in cls.hypotheses:
            rep = dg_bound_report(world, h, sources, target, mode, resolution=10, n_perturb=20, seed=i)
            res.record("target error <= bound", rep.holds)
    return res


@_timed
def object_tightness(n_random=50, seed=0):
    """Ball-intersection third term never exceeds the mixture-hull one."""
    from .domains import example1_fixture

    fx = example1_fixture()
    edges = fx.s.grid_edges
    world = HistogramWorld(edges, np.zeros(edges.size - 1))
    h = world.hypotheses()[0]
    res = SuiteResult("object-tightness")
    mix = dg_bound_report(world, h, fx.sources, fx.s, "mixture-hull")
    ball = dg_bound_report(world, h, fx.sources, fx.s, "ball-intersection")
    res.record("example 1", ball.third_term <= mix.third_term)
    res.notes.append(f"example 1 third terms: mixture {mix.third_term:.4f}, ball {ball.third_term:.4f}")
    rng = np.random.default_rng(seed)
    for i in range(n_random):
        n = int(rng.integers(2, 17))
        edges = np.arange(n + 1, dtype=float)
        world = HistogramWorld(edges, rng.integers(0, 2, n))
        k = int(rng.integers(2, 4))
        srcs = geo.SourceCollection(tuple(geo.random_histogram(rng, grid_edges=edges, sparsity=0.3) for _ in range(k)))
        target = geo.random_histogram(rng, grid_edges=edges, sparsity=0.3)
        h = world.hypotheses()[int(rng.integers(0, n + 1))]
        mix = dg_bound_report(world, h, srcs, target, "mixture-hull", resolution=50 if k == 2 else 20)
        ball = dg_bound_report(world, h, srcs, target, "ball-intersection", resolution=50 if k == 2 else 20, seed=i)
        res.record("random histogram instances", ball.third_term <= mix.third_term + 1e-12)
    return res


SUITES = {
    "example1": example1,
    "divergence-oracle": divergence_oracle,
    "pseudometric": pseudometric,
    "prop2": prop2,
    "gradcheck": gradcheck,
    "contraction": contraction,
    "bound-validity": bound_validity,
    "object-tightness": object_tightness,
}


def run_suite(name, seed=0):
    if name not in SUITES:
        raise InvalidInputError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    fn = SUITES[name]
    return fn() if name == "example1" else fn(seed=seed)
