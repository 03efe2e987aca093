"""Learned estimates of the divergence between sampled domains."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class DomainSample:
    points: np.ndarray
    domain_id: int = 0

    def __post_init__(self):
        x = np.array(self.points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] == 0:
            raise InvalidInputError("a domain sample needs at least one point")
        x.setflags(write=False)
        object.__setattr__(self, "points", x)

    def __len__(self):
        return self.points.shape[0]


def _points(sample):
    return sample.points if isinstance(sample, DomainSample) else DomainSample(sample).points


def _sgd_classifier(x, y, n_out, rng, hidden, epochs, lr, batch_size):
    net = nn.init_network([x.shape[1], hidden, n_out], ["tanh", "identity"], rng)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            out, cache = nn.forward(net, x[idx])
            _, g = nn.cross_entropy(out, y[idx])
            tape, _ = nn.backward(net, cache, g)
            net = nn.sgd_step(net, tape, lr)
    return net


def proxy_a_distance(a, b, seed=0, hidden=32, epochs=100, lr=0.2, batch_size=32):
    """2 (1 - 2 ε) from the held-out error ε of a fresh binary discriminator.

    Both samples are truncated to a common size, shuffled, and split 50/50 so
    train and test sets are class-balanced.  The result is clamped to [0, 2].
    """
    xa, xb = _points(a), _points(b)
    if xa.shape[1] != xb.shape[1]:
        raise InvalidInputError("samples have different dimensionality")
    m = min(len(xa), len(xb))
    n_train = m // 2
    if m - n_train < 1 or n_train < 1:
        raise InvalidInputError("split leaves no train or test point for some domain")
    rng = np.random.default_rng(seed)
    ia, ib = rng.permutation(len(xa))[:m], rng.permutation(len(xb))[:m]
    train_x = np.concatenate([xa[ia[:n_train]], xb[ib[:n_train]]])
    test_x = np.concatenate([xa[ia[n_train:]], xb[ib[n_train:]]])
    train_y = np.repeat([0, 1], n_train)
    test_y = np.repeat([0, 1], m - n_train)
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    net = _sgd_classifier(
        (train_x - mu) / sd, train_y, 2, rng, hidden, epochs, lr, batch_size
    )
    pred = np.argmax(net((test_x - mu) / sd), axis=1)
    err = float(np.mean(pred != test_y))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def representation_proxy_distances(triple, sources, seed=0, epochs=30):
    """Proxy distance between every pair of sources in feature space."""
    feats = [triple.extractor(s.points) for s in sources]
    out = []
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            out.append(proxy_a_distance(feats[i], feats[j], seed=seed, epochs=epochs))
    return out


def discriminator_loss_curve(
    triple, sources, epochs=50, lr=0.1, batch_size=16, seed=0, fresh_head=False
):
    """Per-epoch mean domain loss of a domain head trained on frozen features.

    ``sources`` are point arrays, :class:`DomainSample` or labeled batches, in
    domain-label order.  The extractor is never updated.  With
    ``fresh_head`` a new head of the same shape replaces the triple's one.
    """
    if len(sources) < 2:
        raise InvalidInputError("need at least two domains")
    if len(sources) != triple.n_domains:
        raise InvalidInputError("domain head width must equal the number of domains")
    rng = np.random.default_rng(seed)
    feats = [triple.extractor(_points(s) if not hasattr(s, "class_labels") else s.points) for s in sources]
    head = triple.domain_head
    if fresh_head:
        sizes = [head.input_dim] + [l.shape[0] for l in head.layers]
        head = nn.init_network(sizes, [l.activation for l in head.layers], rng)
    per = batch_size
    n_steps = min(len(f) for f in feats) // per
    if n_steps < 1:
        raise InvalidInputError("batch size exceeds the smallest domain")
    labels = np.repeat(np.arange(len(feats)), per)
    curve = []
    for _ in range(epochs):
        orders = [rng.permutation(len(f)) for f in feats]
        total = 0.0
        for step in range(n_steps):
            x = np.concatenate([f[o[step * per : (step + 1) * per]] for f, o in zip(feats, orders)])
            out, cache = nn.forward(head, x)
            loss, g = nn.cross_entropy(out, labels)
            tape, _ = nn.backward(head, cache, g)
            head = nn.sgd_step(head, tape, lr)
            total += loss
        curve.append(total / n_steps)
    return curve


def curve_from_metrics(metrics):
    """The domain-loss curve recorded by a training run."""
    return [m.domain_loss for m in metrics]


def write_curve_jsonl(curve, path):
    with open(path, "w") as fh:
        for epoch, value in enumerate(curve):
            fh.write(json.dumps({"epoch": epoch, "mean_domain_loss": value}) + "\n")


def uniform_loss(k):
    return math.log(k)
