"""Exact HΔH-divergence geometry on tractable distribution families.

Two worlds are supported:

* piecewise-uniform histograms on the real line, with the interval class
  (the symmetric difference of threshold rays).  Divergences are exact and
  computed in linear time by a two-sided maximum-subarray scan;
* finite supports with an explicitly enumerated hypothesis class, where
  everything is computed by brute force.

Every geometric predicate (condition check, ball and intersection
membership, augmentation check) takes an optional ``divergence`` callable so
the same code serves both worlds.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, InvalidInputError, ParseError, ResourceLimitError

MASS_TOL = 1e-9
MEMBERSHIP_TOL = 1e-12
DEFAULT_CLASS_CAP = 2**20


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_mass(mass):
    if mass.ndim != 1 or mass.size == 0:
        raise InvalidInputError("mass must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(mass)):
        raise InvalidInputError("mass contains NaN or infinite entries")
    if np.any(mass < 0):
        raise InvalidInputError("mass entries must be non-negative")
    total = float(mass.sum())
    if abs(total - 1.0) > MASS_TOL:
        raise InvalidInputError(f"mass sums to {total!r}, expected 1")


# ---------------------------------------------------------------------------
# Histogram world
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HistogramDistribution:
    """Piecewise-uniform density: ``bin_mass[i]`` spread evenly on bin i."""

    grid_edges: np.ndarray
    bin_mass: np.ndarray

    def __post_init__(self):
        edges = _readonly(self.grid_edges)
        mass = _readonly(self.bin_mass)
        if edges.ndim != 1 or edges.size != mass.size + 1:
            raise InvalidInputError("need len(grid_edges) == len(bin_mass) + 1")
        if not np.all(np.isfinite(edges)) or np.any(np.diff(edges) <= 0):
            raise InvalidInputError("grid_edges must be finite and strictly increasing")
        _check_mass(mass)
        object.__setattr__(self, "grid_edges", edges)
        object.__setattr__(self, "bin_mass", mass)

    @property
    def n_bins(self):
        return self.bin_mass.size

    @classmethod
    def uniform(cls, low, high, grid_edges):
        """U(low, high) on ``grid_edges``; the grid must cover [low, high]."""
        edges = np.asarray(grid_edges, dtype=float)
        if not high > low:
            raise InvalidInputError("uniform needs high > low")
        if low < edges[0] or high > edges[-1]:
            raise InvalidInputError("grid does not cover the support")
        overlap = np.clip(np.minimum(edges[1:], high) - np.maximum(edges[:-1], low), 0.0, None)
        return cls(edges, overlap / (high - low))

    def cdf_at(self, x):
        cum = np.concatenate([[0.0], np.cumsum(self.bin_mass)])
        return np.interp(x, self.grid_edges, cum, left=0.0, right=cum[-1])

    def to_dict(self):
        return {"edges": self.grid_edges.tolist(), "mass": self.bin_mass.tolist()}

    @classmethod
    def from_dict(cls, record):
        try:
            return cls(record["edges"], record["mass"])
        except KeyError as exc:
            raise ParseError(f"histogram record missing field {exc}") from None
        except TypeError:
            raise ParseError("histogram record must be an object with edges and mass") from None

    def __eq__(self, other):
        if not isinstance(other, HistogramDistribution):
            return NotImplemented
        return (
            np.array_equal(self.grid_edges, other.grid_edges)
            and np.array_equal(self.bin_mass, other.bin_mass)
        )

    __hash__ = None


def union_edges(*dists):
    return np.unique(np.concatenate([d.grid_edges for d in dists]))


def resample(p, edges):
    """Re-express ``p`` on a refinement ``edges``, splitting mass by length."""
    edges = np.asarray(edges, dtype=float)
    if edges.shape == p.grid_edges.shape and np.array_equal(edges, p.grid_edges):
        return p
    if edges[0] > p.grid_edges[0] or edges[-1] < p.grid_edges[-1]:
        raise ContractViolation("target grid does not cover the source grid")
    # Piecewise-linear CDF is exact for piecewise-uniform densities.
    mass = np.diff(p.cdf_at(edges))
    mass = np.clip(mass, 0.0, None)
    return HistogramDistribution(edges, mass)


def regrid(*dists):
    """Put every histogram on the union of all their edges."""
    if not dists:
        return ()
    first = dists[0].grid_edges
    if all(d.grid_edges.shape == first.shape and np.array_equal(d.grid_edges, first) for d in dists):
        return tuple(dists)
    edges = union_edges(*dists)
    return tuple(resample(d, edges) for d in dists)


def max_subarray(values):
    """Kadane scan. Returns ``(best_sum, start, stop)``; empty range gives 0.

    ``values[start:stop]`` attains the best sum.
    """
    best, best_start, best_stop = 0.0, 0, 0
    running, run_start = 0.0, 0
    for i, v in enumerate(values):
        if running <= 0.0:
            running, run_start = float(v), i
        else:
            running += float(v)
        if running > best:
            best, best_start, best_stop = running, run_start, i + 1
    return best, best_start, best_stop


def interval_gap(p, q):
    """Largest ``|P(I) - Q(I)|`` over intervals I, with the maximising bin range."""
    p, q = regrid(p, q)
    if not np.array_equal(p.grid_edges, q.grid_edges):
        raise ContractViolation("grids differ after regrid")
    diff = p.bin_mass - q.bin_mass
    up = max_subarray(diff)
    down = max_subarray(-diff)
    return up if up[0] >= down[0] else down


def exact_interval_divergence(p, q):
    """HΔH-divergence for the threshold-ray class: twice the largest interval gap."""
    return min(2.0, 2.0 * interval_gap(p, q)[0])


def brute_force_interval_divergence(p, q):
    """O(n^2) enumeration of every contiguous bin range; an oracle for the scan."""
    p, q = regrid(p, q)
    diff = p.bin_mass - q.bin_mass
    prefix = np.concatenate([[0.0], np.cumsum(diff)])
    gaps = np.abs(prefix[None, :] - prefix[:, None])
    return float(min(2.0, 2.0 * gaps.max()))


def random_histogram(rng, n_bins=None, grid_edges=None, concentration=1.0, sparsity=0.0):
    """Random histogram for property tests; ``sparsity`` zeroes a fraction of bins."""
    if grid_edges is None:
        n_bins = n_bins or int(rng.integers(1, 65))
        grid_edges = np.arange(n_bins + 1, dtype=float)
    grid_edges = np.asarray(grid_edges, dtype=float)
    n = grid_edges.size - 1
    mass = rng.dirichlet(np.full(n, concentration))
    if sparsity > 0 and n > 1:
        keep = rng.random(n) >= sparsity
        if keep.any():
            mass = np.where(keep, mass, 0.0)
    return HistogramDistribution(grid_edges, mass / mass.sum())


# ---------------------------------------------------------------------------
# Finite world
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    mass: np.ndarray

    def __post_init__(self):
        mass = _readonly(self.mass)
        _check_mass(mass)
        object.__setattr__(self, "mass", mass)

    @property
    def support_size(self):
        return self.mass.size

    # shared with HistogramDistribution so mixtures work in both worlds
    @property
    def bin_mass(self):
        return self.mass


@dataclass(frozen=True, eq=False)
class FiniteHypothesisClass:
    """Explicit list of binary labelings, stored as a ``(m, n)`` 0/1 array."""

    hypotheses: np.ndarray

    def __post_init__(self):
        h = np.array(self.hypotheses, dtype=np.uint8)
        if h.ndim != 2 or h.shape[0] == 0 or h.shape[1] == 0:
            raise InvalidInputError("hypothesis class must be a non-empty list of labelings")
        if np.any(h > 1):
            raise InvalidInputError("labelings must be binary")
        h.setflags(write=False)
        object.__setattr__(self, "hypotheses", h)

    @property
    def support_size(self):
        return self.hypotheses.shape[1]

    def __len__(self):
        return self.hypotheses.shape[0]

    @cached_property
    def symmetric_difference(self):
        return symmetric_difference_class(self)

    def hdh_divergence(self, p, q):
        """HΔH-divergence of this class; usable as a ``divergence`` callable."""
        return brute_force_divergence(p, q, self.symmetric_difference)

    def error(self, labeling, dist, target_labels):
        """Probability mass where ``labeling`` disagrees with ``target_labels``."""
        return float(dist.mass @ (np.asarray(labeling) != np.asarray(target_labels)))


def all_labelings(n):
    return FiniteHypothesisClass(np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.uint8))


def brute_force_divergence(p, q, cls):
    """2 * max over h in ``cls`` of |P(h=1) - Q(h=1)|, by enumeration."""
    if len(cls) == 0:
        raise InvalidInputError("empty hypothesis class")
    if p.support_size != q.support_size or p.support_size != cls.support_size:
        raise InvalidInputError("supports of p, q and the class differ")
    gaps = np.abs(cls.hypotheses @ (p.mass - q.mass))
    return float(min(2.0, 2.0 * gaps.max()))


def symmetric_difference_class(cls, max_size=DEFAULT_CLASS_CAP):
    """All distinct pointwise XORs h1 ^ h2 over pairs from ``cls``."""
    h = cls.hypotheses
    m, n = h.shape
    if n > 62:
        raise ResourceLimitError("support too large to pack labelings into int64")
    weights = np.left_shift(np.int64(1), np.arange(n, dtype=np.int64))
    codes = np.unique(h.astype(np.int64) @ weights)
    seen = set()
    for c in codes:
        seen.update((codes ^ c).tolist())
        if len(seen) > max_size:
            raise ResourceLimitError(
                f"symmetric difference class exceeds cap of {max_size} labelings"
            )
    out = np.array(sorted(seen), dtype=np.int64)
    bits = ((out[:, None] >> np.arange(n, dtype=np.int64)) & 1).astype(np.uint8)
    return FiniteHypothesisClass(bits)


# ---------------------------------------------------------------------------
# Source collections and the main condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceCollection:
    sources: tuple
    weights: np.ndarray = None

    def __post_init__(self):
        sources = tuple(self.sources)
        if len(sources) < 2:
            raise InvalidInputError("need at least two sources")
        k = len(sources)
        w = np.full(k, 1.0 / k) if self.weights is None else _readonly(self.weights)
        _check_simplex(w, k)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "weights", _readonly(w))

    def __len__(self):
        return len(self.sources)

    def __iter__(self):
        return iter(self.sources)

    def with_weights(self, weights):
        return SourceCollection(self.sources, weights)


def _check_simplex(w, k):
    if w.shape != (k,):
        raise InvalidInputError(f"expected {k} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or abs(w.sum() - 1.0) > MASS_TOL:
        raise InvalidInputError("weights must lie in the probability simplex")


def _resolve(divergence):
    return exact_interval_divergence if divergence is None else divergence


def pairwise_divergences(dists, divergence=None):
    div = _resolve(divergence)
    k = len(dists)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = div(dists[i], dists[j])
    return out


def max_pairwise_divergence(dists, divergence=None):
    return float(pairwise_divergences(list(dists), divergence).max())


@dataclass(frozen=True)
class ConditionReport:
    lhs: float
    rhs: float
    slack: float
    passed: bool

    def __bool__(self):
        return self.passed

    def to_record(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "pass": self.passed}

    def to_json(self):
        return json.dumps(self.to_record())


def check_condition(sources, s, weights=None, divergence=None, rho=None):
    """Is the weighted source-to-``s`` divergence at most the largest source gap?

    ``weights`` overrides the collection's own φ.  ``rho`` may be passed when
    the caller has already computed the maximum pairwise divergence.
    """
    div = _resolve(divergence)
    w = sources.weights if weights is None else np.asarray(weights, dtype=float)
    _check_simplex(w, len(sources))
    if rho is None:
        rho = max_pairwise_divergence(sources.sources, div)
    lhs = float(sum(wi * div(p, s) for wi, p in zip(w, sources.sources)))
    slack = rho - lhs
    return ConditionReport(lhs, float(rho), float(slack), bool(slack >= -MEMBERSHIP_TOL))


def ball_membership(center, rho, s, divergence=None):
    if rho < 0:
        raise InvalidInputError("ball radius must be non-negative")
    return bool(_resolve(divergence)(center, s) <= rho + MEMBERSHIP_TOL)


def intersection_membership(sources, s, divergence=None, rho=None):
    """Does ``s`` lie in every ρ-ball around the sources, ρ the largest source gap?"""
    div = _resolve(divergence)
    if rho is None:
        rho = max_pairwise_divergence(sources.sources, div)
    return all(ball_membership(p, rho, s, div) for p in sources.sources)


def union_membership(sources, s, divergence=None, rho=None):
    div = _resolve(divergence)
    if rho is None:
        rho = max_pairwise_divergence(sources.sources, div)
    return any(ball_membership(p, rho, s, div) for p in sources.sources)


def mixture(sources, weights):
    """Bin-wise convex combination of the source masses."""
    dists = sources.sources if isinstance(sources, SourceCollection) else tuple(sources)
    w = np.asarray(weights, dtype=float)
    _check_simplex(w, len(dists))
    if isinstance(dists[0], HistogramDistribution):
        dists = regrid(*dists)
        mass = np.einsum("k,kn->n", w, np.stack([d.bin_mass for d in dists]))
        return HistogramDistribution(dists[0].grid_edges, mass / mass.sum())
    mass = np.einsum("k,kn->n", w, np.stack([d.mass for d in dists]))
    return FiniteDistribution(mass / mass.sum())


def _blend(a, b, t):
    """(1 - t) a + t b for two distributions of the same world."""
    return mixture((a, b), (1.0 - t, t))


def simplex_grid(k, resolution):
    """All weight vectors with entries in {0, 1/r, ..., 1} summing to one."""
    out = []
    for combo in itertools.combinations(range(resolution + k - 1), k - 1):
        parts = np.diff(np.concatenate([[-1], combo, [resolution + k - 1]])) - 1
        out.append(parts / resolution)
    return np.array(out)


# ---------------------------------------------------------------------------
# Augmentation with auxiliary distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationReport:
    rho: float
    rho_star: float
    aux_penalty: float
    condition_holds: bool
    candidates_checked: int
    violations: int
    mixed_sources: tuple = field(repr=False, default=())

    def to_record(self):
        return {
            "rho": self.rho,
            "rho_star": self.rho_star,
            "aux_penalty": self.aux_penalty,
            "condition_holds": self.condition_holds,
            "candidates_checked": self.candidates_checked,
            "violations": self.violations,
        }


def _random_like(rng, base):
    if isinstance(base, HistogramDistribution):
        return random_histogram(rng, grid_edges=base.grid_edges, sparsity=0.5)
    return FiniteDistribution(rng.dirichlet(np.ones(base.support_size)))


def sample_candidates(sources, n, rng):
    """Seeded mixtures of the sources, some pushed towards random distributions."""
    dists = sources.sources
    out = []
    for i in range(n):
        m = mixture(dists, rng.dirichlet(np.ones(len(dists))))
        if i % 2:
            m = _blend(m, _random_like(rng, m), float(rng.uniform(0.0, 0.6)))
        out.append(m)
    return out


def check_augmentation_condition(
    sources, aux, alpha, beta, divergence=None, n_candidates=200, seed=0
):
    """Form S_i = α P_i + β R_i and test the ball-preservation inequality.

    When ``rho_star - beta * max_i d(R_i, P_i) >= rho`` holds, every sampled
    member of the original ball intersection is checked for membership in the
    new one; failures are counted in ``violations``.
    """
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > MASS_TOL:
        raise InvalidInputError("alpha and beta must be non-negative and sum to 1")
    aux = tuple(aux)
    if len(aux) != len(sources):
        raise InvalidInputError("need one auxiliary distribution per source")
    div = _resolve(divergence)
    mixed = tuple(mixture((p, r), (alpha, beta)) for p, r in zip(sources.sources, aux))
    rho = max_pairwise_divergence(sources.sources, div)
    rho_star = max_pairwise_divergence(mixed, div)
    penalty = beta * max(div(r, p) for r, p in zip(aux, sources.sources))
    holds = rho_star - penalty >= rho - MEMBERSHIP_TOL

    checked = violations = 0
    if holds:
        new = SourceCollection(mixed)
        rng = np.random.default_rng(seed)
        for s in sample_candidates(sources, n_candidates, rng):
            if not intersection_membership(sources, s, div, rho):
                continue
            checked += 1
            if not intersection_membership(new, s, div, rho_star):
                violations += 1
    return AugmentationReport(
        float(rho), float(rho_star), float(penalty), bool(holds), checked, violations, mixed
    )


def load_histograms(path):
    """Read a JSON fixture: a list of ``{edges, mass}`` records or a dict of them."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text) if text.strip() else []
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if isinstance(data, dict) and "edges" not in data:
        return {k: HistogramDistribution.from_dict(v) for k, v in data.items()}
    if isinstance(data, dict):
        data = [data]
    return [HistogramDistribution.from_dict(v) for v in data]
