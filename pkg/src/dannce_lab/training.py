"""Source-source domain-adversarial training.

The objective per step is the task cross-entropy (plus an optional entropy
penalty on task outputs) for the extractor and task head, and a multi-class
domain cross-entropy for the domain head.  The extractor receives the domain
gradient through a reversal layer scaled by the current λ.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .errors import ContractViolation, InvalidInputError, TrainingDivergenceError


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    points: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray

    def __post_init__(self):
        x = np.array(self.points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.class_labels, dtype=np.int64)
        d = np.array(self.domain_labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],) or d.shape != (x.shape[0],):
            raise InvalidInputError("points, class_labels and domain_labels must align")
        for a in (x, y, d):
            a.setflags(write=False)
        object.__setattr__(self, "points", x)
        object.__setattr__(self, "class_labels", y)
        object.__setattr__(self, "domain_labels", d)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def take(self, idx):
        return LabeledBatch(self.points[idx], self.class_labels[idx], self.domain_labels[idx])

    def with_points(self, points):
        """Same labels, new coordinates; labels are shared, never copied or edited."""
        out = object.__new__(LabeledBatch)
        x = np.array(points, dtype=float)
        if x.shape != self.points.shape:
            raise ContractViolation("replacement points must keep the batch shape")
        x.setflags(write=False)
        object.__setattr__(out, "points", x)
        object.__setattr__(out, "class_labels", self.class_labels)
        object.__setattr__(out, "domain_labels", self.domain_labels)
        return out

    @classmethod
    def concat(cls, batches):
        return cls(
            np.concatenate([b.points for b in batches]),
            np.concatenate([b.class_labels for b in batches]),
            np.concatenate([b.domain_labels for b in batches]),
        )

    def __eq__(self, other):
        if not isinstance(other, LabeledBatch):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.class_labels, other.class_labels)
            and np.array_equal(self.domain_labels, other.domain_labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 16  # points per source per step under uniform weights
    learning_rate: float = 0.05
    lr_decay: float = 0.1
    decay_at: float = 0.8
    kappa: float = 10.0
    entropy_weight: float = 0.1
    lambda_mode: str = "schedule"  # schedule | zero | constant
    lambda_max: float = 1.0
    domain_weights: object = None  # None/"uniform", "empirical", or a weight list
    seed: int = 0
    proxy_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.kappa <= 0:
            raise InvalidInputError("learning rate and kappa must be positive")
        if not 0 < self.lr_decay <= 1 or not 0 <= self.decay_at <= 1:
            raise InvalidInputError("lr_decay must be in (0, 1], decay_at in [0, 1]")
        if self.lambda_mode not in ("schedule", "zero", "constant"):
            raise InvalidInputError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.entropy_weight < 0 or self.lambda_max < 0:
            raise InvalidInputError("entropy_weight and lambda_max must be non-negative")

    def lam(self, epoch):
        if self.lambda_mode == "zero":
            return 0.0
        if self.lambda_mode == "constant":
            return self.lambda_max
        return self.lambda_max * lambda_schedule(epoch, max(self.epochs - 1, 1), self.kappa)

    def learning_rate_at(self, epoch):
        if epoch >= int(self.decay_at * self.epochs) and self.lr_decay < 1:
            return self.learning_rate * self.lr_decay
        return self.learning_rate


@dataclass
class EpochMetrics:
    epoch: int
    task_loss: float
    domain_loss: float
    lam: float
    learning_rate: float
    source_accuracy: list
    target_accuracy: float = float("nan")
    proxy_divergence: list = field(default_factory=list)
    coop_sd_before: list = field(default_factory=list)
    coop_sd_after: list = field(default_factory=list)
    coop_kl_drift: float = float("nan")

    def to_record(self):
        """JSON-safe dict; undefined values (NaN) become ``None``."""

        def clean(v):
            if isinstance(v, list):
                return [clean(a) for a in v]
            if isinstance(v, (float, np.floating)):
                return None if math.isnan(v) else float(v)
            return v

        return {k: clean(v) for k, v in asdict(self).items()}


def lambda_schedule(epoch, max_epoch, kappa=10.0):
    """Phase-in 2 / (1 + exp(-κ p)) - 1 with p = epoch / max_epoch."""
    if kappa <= 0:
        raise InvalidInputError("kappa must be positive")
    if not 0 <= epoch <= max_epoch or max_epoch <= 0:
        raise InvalidInputError("need 0 <= epoch <= max_epoch and max_epoch > 0")
    p = epoch / max_epoch
    return 2.0 / (1.0 + math.exp(-kappa * p)) - 1.0


# ---------------------------------------------------------------------------
# Losses with gradients
# ---------------------------------------------------------------------------


def task_loss(triple, batch, entropy_weight=0.0):
    """Mean task cross-entropy; returns ``(loss, {"task_head", "extractor"} tapes)``.

    With ``entropy_weight > 0`` the weighted entropy of the task outputs is
    added to the loss and its gradient.
    """
    if np.any(batch.class_labels >= triple.n_classes) or np.any(batch.class_labels < 0):
        raise InvalidInputError("class label outside the task head's range")
    feats, c_ext = nn.forward(triple.extractor, batch.points)
    logits, c_task = nn.forward(triple.task_head, feats)
    loss, g = nn.cross_entropy(logits, batch.class_labels)
    if entropy_weight:
        h, gh = nn.entropy_loss(logits)
        loss += entropy_weight * h
        g = g + entropy_weight * gh
    tape_task, d_feat = nn.backward(triple.task_head, c_task, g)
    tape_ext, _ = nn.backward(triple.extractor, c_ext, d_feat)
    return loss, {"task_head": tape_task, "extractor": tape_ext}


def source_domain_loss(triple, batch, lam=1.0):
    """Mean multi-class domain cross-entropy.

    The domain-head tape descends the loss; the extractor tape is the
    gradient after the reversal layer, i.e. ``-lam`` times the true gradient.
    """
    if np.any(batch.domain_labels >= triple.n_domains) or np.any(batch.domain_labels < 0):
        raise InvalidInputError("unknown domain label")
    feats, c_ext = nn.forward(triple.extractor, batch.points)
    logits, c_dom = nn.forward(triple.domain_head, feats)
    loss, g = nn.cross_entropy(logits, batch.domain_labels)
    tape_dom, d_feat = nn.backward(triple.domain_head, c_dom, g)
    tape_ext, _ = nn.backward(triple.extractor, c_ext, nn.gradient_reversal(d_feat, lam))
    return loss, {"domain_head": tape_dom, "extractor": tape_ext}


@dataclass
class StepResult:
    task_loss: float
    domain_loss: float
    tapes: dict


def objective_gradients(triple, batch, lam, entropy_weight=0.0):
    """One forward/backward pass over the whole adversarial objective.

    Tapes are update directions: descending them lowers the task loss for
    (extractor, task head), lowers the domain loss for the domain head, and
    raises ``lam`` times the domain loss for the extractor.  With ``lam == 0``
    the reversal branch is skipped entirely so the extractor update is
    bitwise the plain task-training one.
    """
    feats, c_ext = nn.forward(triple.extractor, batch.points)
    logits, c_task = nn.forward(triple.task_head, feats)
    lt, g = nn.cross_entropy(logits, batch.class_labels)
    if entropy_weight:
        h, gh = nn.entropy_loss(logits)
        g = g + entropy_weight * gh
    tape_task, d_feat = nn.backward(triple.task_head, c_task, g)

    dlogits, c_dom = nn.forward(triple.domain_head, feats)
    lsd, gd = nn.cross_entropy(dlogits, batch.domain_labels)
    tape_dom, d_feat_dom = nn.backward(triple.domain_head, c_dom, gd)
    if lam:
        d_feat = d_feat + nn.gradient_reversal(d_feat_dom, lam)
    tape_ext, _ = nn.backward(triple.extractor, c_ext, d_feat)
    return StepResult(
        lt, lsd, {"extractor": tape_ext, "task_head": tape_task, "domain_head": tape_dom}
    )


def apply_step(triple, tapes, gamma):
    return nn.NetworkTriple(
        nn.sgd_step(triple.extractor, tapes["extractor"], gamma),
        nn.sgd_step(triple.task_head, tapes["task_head"], gamma),
        nn.sgd_step(triple.domain_head, tapes["domain_head"], gamma),
    )


def accuracy(triple, batch):
    if len(batch) == 0:
        return float("nan")
    return float(np.mean(triple.predict(batch.points) == batch.class_labels))


def mean_domain_loss(triple, batch):
    feats = triple.extractor(batch.points)
    return nn.cross_entropy(triple.domain_head(feats), batch.domain_labels)[0]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingResult:
    triple: nn.NetworkTriple
    metrics: list
    trajectory: list = field(default_factory=list, repr=False)

    @property
    def domain_loss_curve(self):
        return [m.domain_loss for m in self.metrics]


def _per_domain_counts(sources, config):
    k = len(sources)
    w = config.domain_weights
    if w is None or (isinstance(w, str) and w == "uniform"):
        phi = np.full(k, 1.0 / k)
    elif isinstance(w, str) and w == "empirical":
        sizes = np.array([len(s) for s in sources], dtype=float)
        phi = sizes / sizes.sum()
    else:
        phi = np.asarray(w, dtype=float)
        if phi.shape != (k,) or np.any(phi < 0) or abs(phi.sum() - 1) > 1e-9:
            raise InvalidInputError("domain_weights must be a simplex vector, one per source")
    return np.maximum(1, np.rint(phi * k * config.batch_size)).astype(int)


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng([seed, epoch, stream])


def train_dann(
    triple,
    sources,
    config,
    target=None,
    batch_transform=None,
    batch_hook=None,
    record_trajectory=False,
):
    """Simultaneous-gradient training of the source-source adversarial objective.

    ``sources`` is a list of :class:`LabeledBatch`, one per domain, whose
    ``domain_labels`` equal the source index.  ``batch_transform(triple,
    batches, epoch, rng)`` may rewrite the per-domain batches before the step
    (used for cooperative examples) and returns ``(batches, stats)``.
    """
    sources = list(sources)
    if len(sources) < 2:
        raise InvalidInputError("need at least two sources")
    for i, s in enumerate(sources):
        if len(s) == 0 or np.any(s.domain_labels != i):
            raise InvalidInputError(f"source {i} must be non-empty with domain label {i}")
    frozen_labels = [s.domain_labels.copy() for s in sources]
    counts = _per_domain_counts(sources, config)
    n_steps = min(len(s) // c for s, c in zip(sources, counts))
    if n_steps < 1:
        raise InvalidInputError("batch size exceeds the smallest source")

    metrics, trajectory = [], []
    if record_trajectory:
        trajectory.append(triple)
    for epoch in range(config.epochs):
        lam = config.lam(epoch)
        gamma = config.learning_rate_at(epoch)
        shuffle_rng = _epoch_rng(config.seed, epoch, 0)
        coop_rng = _epoch_rng(config.seed, epoch, 1)
        orders = [shuffle_rng.permutation(len(s)) for s in sources]
        lt_sum = lsd_sum = 0.0
        sd_before, sd_after, kl_drift = [], [], []
        for step in range(n_steps):
            batches = [
                s.take(o[step * c : (step + 1) * c]) for s, o, c in zip(sources, orders, counts)
            ]
            if batch_transform is not None:
                batches, stats = batch_transform(triple, batches, epoch, coop_rng)
                sd_before.extend(stats.get("sd_before", []))
                sd_after.extend(stats.get("sd_after", []))
                kl_drift.extend(stats.get("kl_drift", []))
            batch = LabeledBatch.concat(batches)
            if batch_hook is not None:
                batch_hook(epoch, step, batches)
            for i, b in enumerate(batches):
                if np.any(b.domain_labels != frozen_labels[i][0]):
                    raise ContractViolation("domain labels changed during training")
            res = objective_gradients(triple, batch, lam, config.entropy_weight)
            if not (math.isfinite(res.task_loss) and math.isfinite(res.domain_loss)):
                raise TrainingDivergenceError("non-finite loss", epoch=epoch)
            try:
                triple = apply_step(triple, res.tapes, gamma)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(str(exc), epoch=epoch) from None
            lt_sum += res.task_loss
            lsd_sum += res.domain_loss
            if record_trajectory:
                trajectory.append(triple)
        proxies = []
        if config.proxy_every and (epoch + 1) % config.proxy_every == 0:
            from .divergence import representation_proxy_distances

            proxies = representation_proxy_distances(triple, sources, seed=config.seed)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                task_loss=lt_sum / n_steps,
                domain_loss=lsd_sum / n_steps,
                lam=lam,
                learning_rate=gamma,
                source_accuracy=[accuracy(triple, s) for s in sources],
                target_accuracy=accuracy(triple, target) if target is not None else float("nan"),
                proxy_divergence=proxies,
                coop_sd_before=sd_before,
                coop_sd_after=sd_after,
                coop_kl_drift=float(np.mean(kl_drift)) if kl_drift else float("nan"),
            )
        )
    for s, lab in zip(sources, frozen_labels):
        if not np.array_equal(s.domain_labels, lab):
            raise ContractViolation("source domain labels were modified")
    return TrainingResult(triple, metrics, trajectory)


def train_erm(triple, sources, config, target=None, **kwargs):
    """Plain task training: λ fixed at zero and no entropy term.

    The domain head still trains on the frozen-by-λ representation so the
    domain-loss curve is available, but it never influences the extractor.
    """
    cfg = replace(config, lambda_mode="zero", entropy_weight=0.0)
    return train_dann(triple, sources, cfg, target=target, **kwargs)


def write_metrics_csv(metrics, path):
    scalar = ["epoch", "task_loss", "domain_loss", "lam", "learning_rate", "target_accuracy", "coop_kl_drift"]
    k = len(metrics[0].source_accuracy) if metrics else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(scalar + [f"source_accuracy_{i}" for i in range(k)])
        for m in metrics:
            w.writerow([repr(float(getattr(m, f))) if f != "epoch" else m.epoch for f in scalar]
                       + [repr(float(a)) for a in m.source_accuracy])


def write_metrics_jsonl(metrics, path):
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_record(), allow_nan=False) + "\n")
