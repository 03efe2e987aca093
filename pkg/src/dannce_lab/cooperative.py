"""Cooperative examples: inputs nudged to make the domain head's job easier.

Selected points take ``steps`` gradient steps on their own domain loss
(optionally plus a KL penalty keeping the task prediction close to the
original point's), with all network parameters frozen.  Class and domain
labels are carried over untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import ContractViolation, GenerationError, InvalidInputError
from .training import LabeledBatch, train_dann


@dataclass(frozen=True)
class CooperativeConfig:
    beta: float = 0.5
    steps: int = 5
    step_size: float = 0.01  # grid-selected on source validation loss
    kl_weight: float = 1.0
    use_kl: bool = True

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise InvalidInputError("beta must lie in [0, 1]")
        if self.steps < 0:
            raise InvalidInputError("steps must be non-negative")
        if self.step_size < 0:
            raise InvalidInputError("step_size must be non-negative")
        if self.kl_weight < 0:
            raise InvalidInputError("kl_weight must be non-negative")


@dataclass(frozen=True, eq=False)
class CooperativeBatch:
    original: LabeledBatch
    updated: LabeledBatch
    indices: np.ndarray  # positions in the source batch these points came from
    kl_drift: np.ndarray
    sd_before: np.ndarray
    sd_after: np.ndarray

    def __len__(self):
        return len(self.original)


def point_domain_losses(triple, x, domains):
    """Per-point domain cross-entropy and its gradient w.r.t. each point."""
    feats, c_ext = nn.forward(triple.extractor, x)
    logits, c_dom = nn.forward(triple.domain_head, feats)
    logp = nn.log_softmax(logits)
    rows = np.arange(len(x))
    losses = -logp[rows, domains]
    g = np.exp(logp)
    g[rows, domains] -= 1.0
    _, d_feat = nn.backward(triple.domain_head, c_dom, g)
    _, dx = nn.backward(triple.extractor, c_ext, d_feat)
    return losses, dx


def point_kl(triple, ref_logits, x):
    """Per-point KL(task(x0) || task(x)) and gradient w.r.t. x; x0 is frozen."""
    feats, c_ext = nn.forward(triple.extractor, x)
    logits, c_task = nn.forward(triple.task_head, feats)
    logp, logq = nn.log_softmax(ref_logits), nn.log_softmax(logits)
    p = np.exp(logp)
    kl = np.maximum((p * (logp - logq)).sum(axis=1), 0.0)
    g = np.exp(logq) - p
    _, d_feat = nn.backward(triple.task_head, c_task, g)
    _, dx = nn.backward(triple.extractor, c_ext, d_feat)
    return kl, dx


def _cooperate(triple, batch, config, use_kl, indices=None):
    if len(batch) and np.any(batch.domain_labels >= triple.n_domains):
        raise InvalidInputError("unknown domain label")
    x0 = batch.points
    dom = batch.domain_labels
    ref_logits = triple.task_head(triple.extractor(x0)) if len(batch) else None
    x = x0.copy()
    sd_before = point_domain_losses(triple, x0, dom)[0] if len(batch) else np.zeros(0)
    for _ in range(config.steps if config.step_size > 0 else 0):
        _, grad = point_domain_losses(triple, x, dom)
        if use_kl and config.kl_weight:
            _, gkl = point_kl(triple, ref_logits, x)
            grad = grad + config.kl_weight * gkl
        bad = ~np.all(np.isfinite(grad), axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise GenerationError(f"non-finite input gradient at point {i}", point_index=i)
        x = x - config.step_size * grad
    if len(batch):
        sd_after = point_domain_losses(triple, x, dom)[0]
        drift = point_kl(triple, ref_logits, x)[0]
    else:
        sd_after = drift = np.zeros(0)
    idx = np.arange(len(batch)) if indices is None else np.asarray(indices)
    return CooperativeBatch(batch, batch.with_points(x), idx, drift, sd_before, sd_after)


def cooperate_update_plain(triple, batch, config):
    """Iterate x <- x - η ∇_x L_SD(x) for ``config.steps`` steps."""
    return _cooperate(triple, batch, config, use_kl=False)


def cooperate_update_kl(triple, batch, config):
    """As the plain rule, plus the gradient of KL(task(x0) || task(x))."""
    return _cooperate(triple, batch, config, use_kl=True)


def n_updated(batch_size, beta):
    return int(math.ceil(beta * batch_size - 1e-12))


def select_indices(batch_size, beta, rng):
    """Uniformly random subset of size ceil(β B), sorted."""
    return np.sort(rng.choice(batch_size, size=n_updated(batch_size, beta), replace=False))


def assemble_mixed_sources(originals, cooperatives, beta):
    """Splice updated points into their source batches.

    Each output batch keeps every label and position of its original; only
    the ``ceil(beta * B)`` selected points carry new coordinates.
    """
    if len(originals) != len(cooperatives):
        raise ContractViolation("one cooperative batch per source batch required")
    out = []
    for orig, coop in zip(originals, cooperatives):
        if len(coop.indices) != n_updated(len(orig), beta):
            raise ContractViolation(
                f"expected {n_updated(len(orig), beta)} updated points, got {len(coop.indices)}"
            )
        if not np.array_equal(orig.domain_labels[coop.indices], coop.updated.domain_labels) or (
            not np.array_equal(orig.class_labels[coop.indices], coop.updated.class_labels)
        ):
            raise ContractViolation("cooperative batch labels do not match the source batch")
        x = orig.points.copy()
        x[coop.indices] = coop.updated.points
        out.append(orig.with_points(x))
    return out


def cooperative_transform(config):
    """Batch transform for :func:`train_dann` realising the mixed sources."""
    update = cooperate_update_kl if config.use_kl else cooperate_update_plain

    def transform(triple, batches, epoch, rng):
        coops = []
        for b in batches:
            idx = select_indices(len(b), config.beta, rng)
            c = update(triple, b.take(idx), config)
            coops.append(replace(c, indices=idx))
        stats = {
            "sd_before": [float(c.sd_before.mean()) for c in coops if len(c)],
            "sd_after": [float(c.sd_after.mean()) for c in coops if len(c)],
            "kl_drift": [float(d) for c in coops for d in c.kl_drift],
        }
        return assemble_mixed_sources(batches, coops, config.beta), stats

    return transform


def train_dannce(triple, sources, config, cooperative=None, target=None, **kwargs):
    """Adversarial training on sources mixed with cooperative examples."""
    cooperative = cooperative or CooperativeConfig()
    return train_dann(
        triple,
        sources,
        config,
        target=target,
        batch_transform=cooperative_transform(cooperative),
        **kwargs,
    )


def dump_triples(coop, path):
    """JSON-lines of (original, updated, KL drift) per point."""
    import json

    with open(path, "w") as fh:
        for x0, xt, kl in zip(coop.original.points, coop.updated.points, coop.kl_drift):
            fh.write(json.dumps({"x0": x0.tolist(), "xt": xt.tolist(), "kl_drift": float(kl)}) + "\n")


STEP_SIZE_GRID = (0.01, 0.05, 0.1)


def split_sources(sources, val_fraction=0.2, seed=0):
    """Seeded per-source train/validation split."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for s in sources:
        order = rng.permutation(len(s))
        n_val = max(1, int(round(val_fraction * len(s))))
        val.append(s.take(np.sort(order[:n_val])))
        train.append(s.take(np.sort(order[n_val:])))
    return train, val


def select_step_size(make_triple, sources, config, cooperative=None, grid=STEP_SIZE_GRID, seed=0):
    """Pick η from ``grid`` by mean task loss on held-out source points.

    ``make_triple()`` must return a fresh, identically initialised network
    triple on each call.  Returns ``(best_eta, {eta: validation_loss})``.
    """
    from .training import LabeledBatch

    cooperative = cooperative or CooperativeConfig()
    train, val = split_sources(sources, seed=seed)
    held_out = LabeledBatch.concat(val)
    scores = {}
    for eta in grid:
        res = train_dannce(make_triple(), train, config, replace(cooperative, step_size=eta))
        t = res.triple
        scores[eta] = nn.cross_entropy(t.task_head(t.extractor(held_out.points)), held_out.class_labels)[0]
    best = min(grid, key=lambda e: (scores[e], e))
    return best, scores
