"""Target-error bounds on concrete instances, and contraction traces.

A *world* bundles a hypothesis class, its HΔH-divergence, and the labeling
function(s).  :class:`FiniteWorld` enumerates an explicit class on a finite
support; :class:`HistogramWorld` uses threshold rays on a histogram grid,
whose symmetric difference is the interval class, so divergences are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .errors import DegenerateObjectError, InvalidInputError, TrainingDivergenceError
from .geometry import (
    FiniteDistribution,
    SourceCollection,
    exact_interval_divergence,
    intersection_membership,
    max_pairwise_divergence,
    mixture,
    random_histogram,
    resample,
    simplex_grid,
)

OBJECT_MODES = ("mixture-hull", "ball-intersection")


@dataclass(frozen=True, eq=False)
class FiniteWorld:
    """Finite support, enumerated class, and a labeling per support point.

    ``target_labels`` defaults to ``labels`` (co-variate shift).
    """

    hypothesis_class: object
    labels: np.ndarray
    target_labels: np.ndarray = None

    def __post_init__(self):
        n = self.hypothesis_class.support_size
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.shape != (n,):
            raise InvalidInputError("one label per support point required")
        object.__setattr__(self, "labels", labels)
        t = labels if self.target_labels is None else np.asarray(self.target_labels, np.uint8)
        object.__setattr__(self, "target_labels", t)

    def hypotheses(self):
        return self.hypothesis_class.hypotheses

    def divergence(self, p, q):
        return self.hypothesis_class.hdh_divergence(p, q)

    def masses(self, dist):
        return dist.mass

    def random_like(self, rng, base):
        return FiniteDistribution(rng.dirichlet(np.ones(base.support_size)))


@dataclass(frozen=True, eq=False)
class HistogramWorld:
    """Threshold rays on a fixed grid with a per-bin binary labeling."""

    grid_edges: np.ndarray
    labels: np.ndarray
    target_labels: np.ndarray = None

    def __post_init__(self):
        edges = np.asarray(self.grid_edges, dtype=float)
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.shape != (edges.size - 1,):
            raise InvalidInputError("one label per bin required")
        object.__setattr__(self, "grid_edges", edges)
        object.__setattr__(self, "labels", labels)
        t = labels if self.target_labels is None else np.asarray(self.target_labels, np.uint8)
        object.__setattr__(self, "target_labels", t)

    def hypotheses(self):
        # h_a = 1 on (-inf, a]; with uniform density per bin only grid
        # thresholds matter for any error or gap.
        n = self.labels.size
        return np.tril(np.ones((n + 1, n), dtype=np.uint8), -1)

    def divergence(self, p, q):
        return exact_interval_divergence(p, q)

    def masses(self, dist):
        return resample(dist, self.grid_edges).bin_mass

    def random_like(self, rng, base):
        return random_histogram(rng, grid_edges=self.grid_edges, sparsity=0.5)


def error(world, h, dist, labels=None):
    """Mass on which hypothesis ``h`` disagrees with the labeling."""
    labels = world.labels if labels is None else labels
    return float(world.masses(dist) @ (np.asarray(h, dtype=np.uint8) != labels))


def ideal_joint_error(world, source, target):
    """Exact min over the class of E_source(h) + E_target(h)."""
    hs = world.hypotheses()
    ps, qs = world.masses(source), world.masses(target)
    if ps.size == 0 or qs.size == 0:
        raise InvalidInputError("empty distribution")
    errs = (hs != world.labels) @ ps + (hs != world.target_labels) @ qs
    return float(errs.min())


def ideal_joint_error_nn(source, target, config=None, runs=3, seed=0):
    """Upper estimate: best of ``runs`` seeded joint ERM trainings on both samples.

    ``source`` and ``target`` are labeled batches; returns ``(estimate,
    per_run)``.  The value is only an estimate of the ideal joint error.
    """
    from .training import LabeledBatch, TrainingConfig, train_erm

    if len(source) == 0 or len(target) == 0:
        raise InvalidInputError("empty samples")
    config = config or TrainingConfig(epochs=20)
    n_classes = int(max(source.class_labels.max(), target.class_labels.max())) + 1
    a = LabeledBatch(source.points, source.class_labels, np.zeros(len(source)))
    b = LabeledBatch(target.points, target.class_labels, np.ones(len(target)))
    per_run = []
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        triple = nn.make_triple(source.dim, n_classes, 2, rng)
        res = train_erm(triple, [a, b], replace(config, seed=seed * 1000 + r))
        t = res.triple
        per_run.append(
            float(np.mean(t.predict(a.points) != a.class_labels))
            + float(np.mean(t.predict(b.points) != b.class_labels))
        )
    return min(per_run), per_run


@dataclass
class BoundReport:
    lambda_phi: float
    weighted_source_error: float
    min_divergence_to_target: float
    max_pairwise_source_divergence: float
    total_bound: float
    observed_target_error: float
    object_mode: str = "mixture-hull"
    mixture_min_divergence: float = float("nan")
    tighter_object: str = ""
    n_candidates: int = 0
    lambda_is_estimate: bool = False

    @property
    def third_term(self):
        return 0.5 * self.min_divergence_to_target

    @property
    def holds(self):
        return self.observed_target_error <= self.total_bound + 1e-12

    def to_record(self):
        """JSON-safe dict; an unset mixture term (NaN) becomes ``None``."""
        rec = asdict(self)
        return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in rec.items()}

    def to_json(self):
        return json.dumps(self.to_record(), allow_nan=False)


def _total(lam, err, min_div, max_pair):
    return lam + err + 0.5 * min_div + 0.5 * max_pair


def object_candidates(world, sources, target, mode, resolution=50, n_perturb=200, seed=0):
    """Candidate members of the reference object.

    The mixture grid is always included.  For the ball intersection, seeded
    perturbations (mixtures blended towards random distributions or towards
    the target, plus the target itself) are kept if they lie in every source
    ball of radius ρ.
    """
    if mode not in OBJECT_MODES:
        raise InvalidInputError(f"unknown object mode {mode!r}")
    if resolution < 1:
        raise InvalidInputError("simplex grid resolution must be at least 1")
    dists = sources.sources
    grid = simplex_grid(len(dists), resolution)
    cands = [mixture(dists, w) for w in grid]
    if mode == "mixture-hull":
        return cands
    rng = np.random.default_rng(seed)
    rho = max_pairwise_divergence(dists, world.divergence)
    extra = [target]
    for i in range(n_perturb):
        m = mixture(dists, rng.dirichlet(np.ones(len(dists))))
        other = target if i % 2 else world.random_like(rng, m)
        t = float(rng.uniform(0.0, 1.0))
        extra.append(mixture((m, other), (1.0 - t, t)))
    kept = [s for s in extra if intersection_membership(sources, s, world.divergence, rho)]
    out = cands + kept
    if not out:
        raise DegenerateObjectError("no candidate survived the ball-intersection filter")
    return out


def dg_bound_report(
    world, h, sources, target, object_mode="mixture-hull", resolution=50, n_perturb=200, seed=0
):
    """All four terms of the multi-source bound for hypothesis ``h``."""
    if not isinstance(sources, SourceCollection):
        sources = SourceCollection(tuple(sources))
    phi = sources.weights
    div = world.divergence
    lam = float(sum(w * ideal_joint_error(world, p, target) for w, p in zip(phi, sources)))
    src_err = float(sum(w * error(world, h, p) for w, p in zip(phi, sources)))
    rho = max_pairwise_divergence(sources.sources, div)
    mix = object_candidates(world, sources, target, "mixture-hull", resolution)
    mix_min = min(div(s, target) for s in mix)
    if object_mode == "mixture-hull":
        cands, min_div = mix, mix_min
    else:
        cands = object_candidates(world, sources, target, object_mode, resolution, n_perturb, seed)
        min_div = min(div(s, target) for s in cands)
    if not cands:
        raise DegenerateObjectError("empty candidate set")
    tighter = "tie" if min_div == mix_min else (object_mode if min_div < mix_min else "mixture-hull")
    return BoundReport(
        lambda_phi=lam,
        weighted_source_error=src_err,
        min_divergence_to_target=float(min_div),
        max_pairwise_source_divergence=float(rho),
        total_bound=_total(lam, src_err, float(min_div), float(rho)),
        observed_target_error=error(world, h, target, world.target_labels),
        object_mode=object_mode,
        mixture_min_divergence=float(mix_min),
        tighter_object=tighter,
        n_candidates=len(cands),
    )


def da_bound_report(world, h, source, target):
    """Single-source form: λ + E_P(h) + ½ d(P, Q)."""
    lam = ideal_joint_error(world, source, target)
    err = error(world, h, source)
    d = world.divergence(source, target)
    return BoundReport(
        lambda_phi=lam,
        weighted_source_error=err,
        min_divergence_to_target=float(d),
        max_pairwise_source_divergence=0.0,
        total_bound=_total(lam, err, float(d), 0.0),
        observed_target_error=error(world, h, target, world.target_labels),
        object_mode="source",
        n_candidates=1,
    )


# ---------------------------------------------------------------------------
# Contraction of a smooth divergence proxy under gradient descent
# ---------------------------------------------------------------------------


@dataclass
class ContractionTrace:
    losses: list
    ratios: list
    gamma: float

    def fraction_contracting(self, tol=1e-6):
        """Share of steps with ratio < 1 among those still ``tol`` above the minimum."""
        floor = min(self.losses)
        steps = [r for l, r in zip(self.losses[:-1], self.ratios) if l - floor > tol]
        if not steps:
            return 1.0
        return float(np.mean([r < 1.0 for r in steps]))

    def to_record(self):
        return asdict(self)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,loss,ratio\n")
            for t, l in enumerate(self.losses):
                r = self.ratios[t] if t < len(self.ratios) else float("nan")
                fh.write(f"{t},{l!r},{r!r}\n")


@dataclass(frozen=True)
class SoftDiscriminator:
    """Fixed logistic scorer s(z) = sigmoid(w . z + b)."""

    weight: np.ndarray
    bias: float = 0.0

    @classmethod
    def random(cls, dim, rng):
        return cls(rng.standard_normal(dim), float(rng.standard_normal()))


def proxy_loss(rep, p_points, q_points, disc):
    """Squared gap of mean discriminator scores, and its gradient tape for ``rep``.

    A smooth, non-negative stand-in for twice the acceptance-probability gap
    that defines the divergence.
    """
    zp, cp = nn.forward(rep, p_points)
    zq, cq = nn.forward(rep, q_points)
    sp = 1.0 / (1.0 + np.exp(-(zp @ disc.weight + disc.bias)))
    sq = 1.0 / (1.0 + np.exp(-(zq @ disc.weight + disc.bias)))
    gap = sp.mean() - sq.mean()
    loss = float(gap * gap)
    up_p = (2 * gap / len(sp)) * (sp * (1 - sp))[:, None] * disc.weight[None, :]
    up_q = (-2 * gap / len(sq)) * (sq * (1 - sq))[:, None] * disc.weight[None, :]
    tp, _ = nn.backward(rep, cp, up_p)
    tq, _ = nn.backward(rep, cq, up_q)
    return loss, tp + tq


def contraction_trace(p_points, q_points, rep, gamma, steps, disc=None, seed=0):
    """Gradient descent on the proxy over ``rep``'s parameters, recording ratios."""
    if gamma < 0:
        raise InvalidInputError("gamma must be non-negative")
    if disc is None:
        disc = SoftDiscriminator.random(rep.output_dim, np.random.default_rng(seed))
    losses, ratios = [], []
    loss, tape = proxy_loss(rep, p_points, q_points, disc)
    losses.append(loss)
    for _ in range(steps):
        if gamma > 0:
            if not tape.is_finite():
                raise TrainingDivergenceError("non-finite proxy gradient")
            rep = nn.DenseNetwork(
                tuple(
                    nn.Layer(l.weight - gamma * dw, l.bias - gamma * db, l.activation)
                    for l, (dw, db) in zip(rep.layers, tape.grads)
                )
            )
        new, tape = proxy_loss(rep, p_points, q_points, disc)
        if not math.isfinite(new):
            raise TrainingDivergenceError("non-finite proxy loss")
        ratios.append(new / loss if loss > 0 else float("nan"))
        losses.append(new)
        loss = new
    return ContractionTrace(losses, ratios, float(gamma))


def find_contracting_gamma(
    p_points, q_points, rep, steps=100, gamma0=64.0, min_gamma=1e-8, target=0.99, tol=1e-6, seed=0
):
    """Halve γ until ≥ ``target`` of recorded steps contract; returns the trace."""
    gamma = gamma0
    while gamma >= min_gamma:
        try:
            trace = contraction_trace(p_points, q_points, rep, gamma, steps, seed=seed)
        except TrainingDivergenceError:
            trace = None
        if trace is not None and trace.fraction_contracting(tol) >= target:
            return trace
        gamma /= 2.0
    raise InvalidInputError("no contracting step size found above min_gamma")
