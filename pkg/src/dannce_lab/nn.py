"""Small dense networks with hand-written reverse-mode gradients.

Networks are treated as values: :func:`sgd_step` returns a new network and
never touches the arrays of the old one.  All functions accept either a
single vector or a ``(batch, dim)`` array; batch losses are means.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidInputError, TrainingDivergenceError

ACTIVATIONS = ("relu", "tanh", "identity")
_tokens = itertools.count()


def _act(tag, z):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _act_grad(tag, z, a):
    if tag == "relu":
        return (z > 0).astype(z.dtype)
    if tag == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        w = np.array(self.weight, dtype=float)
        b = np.array(self.bias, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidInputError("layer weight must be (out, in) and bias (out,)")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def shape(self):
        return self.weight.shape


@dataclass(frozen=True, eq=False)
class DenseNetwork:
    layers: tuple
    _token: int = field(default_factory=lambda: next(_tokens), repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidInputError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise InvalidInputError(f"layer dims incompatible: {a.shape} then {b.shape}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self):
        return self.layers[0].shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].shape[0]

    @property
    def parameter_count(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def descriptor(self):
        return {
            "layers": [
                {"in": l.shape[1], "out": l.shape[0], "activation": l.activation}
                for l in self.layers
            ]
        }

    def flat_parameters(self):
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    @classmethod
    def from_flat(cls, descriptor, flat):
        flat = np.asarray(flat, dtype=float)
        layers, pos = [], 0
        for spec in descriptor["layers"]:
            n_in, n_out = spec["in"], spec["out"]
            w = flat[pos : pos + n_in * n_out].reshape(n_out, n_in)
            pos += n_in * n_out
            b = flat[pos : pos + n_out]
            pos += n_out
            layers.append(Layer(w, b, spec["activation"]))
        if pos != flat.size:
            raise InvalidInputError("flat parameter vector does not match descriptor")
        return cls(tuple(layers))

    def same_parameters(self, other):
        return all(
            np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        ) and len(self.layers) == len(other.layers)

    def __call__(self, x):
        return forward(self, x)[0]


def init_network(sizes, activations, rng):
    """Glorot-uniform weights, zero biases.

    ``sizes`` lists layer widths including the input; ``activations`` has one
    tag per layer.
    """
    if len(activations) != len(sizes) - 1:
        raise InvalidInputError("need one activation per layer")
    layers = []
    for n_in, n_out, act in zip(sizes, sizes[1:], activations):
        limit = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(rng.uniform(-limit, limit, (n_out, n_in)), np.zeros(n_out), act))
    return DenseNetwork(tuple(layers))


@dataclass
class ForwardCache:
    token: int
    squeeze: bool
    inputs: list  # input to each layer
    pre: list  # pre-activations
    post: list  # activations


@dataclass
class GradientTape:
    """Per-layer ``(dW, db)`` aligned with a network."""

    grads: list

    @classmethod
    def zeros_like(cls, net):
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers])

    def __add__(self, other):
        return GradientTape([(a + c, b + d) for (a, b), (c, d) in zip(self.grads, other.grads)])

    def scaled(self, factor):
        return GradientTape([(factor * a, factor * b) for a, b in self.grads])

    def flat(self):
        return np.concatenate([np.concatenate([a.ravel(), b]) for a, b in self.grads])

    def is_finite(self):
        return all(np.all(np.isfinite(a)) and np.all(np.isfinite(b)) for a, b in self.grads)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise InvalidInputError(f"expected input of dimension {dim}, got shape {np.shape(x)}")
    return x, squeeze


def forward(net, x):
    x, squeeze = _as_batch(x, net.input_dim)
    inputs, pre, post = [], [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        a = _act(layer.activation, z)
        pre.append(z)
        post.append(a)
    out = a[0] if squeeze else a
    return out, ForwardCache(net._token, squeeze, inputs, pre, post)


def backward(net, cache, upstream):
    """Reverse pass: returns the parameter tape and the gradient w.r.t. the input."""
    if cache.token != net._token:
        raise ContractViolation("forward cache belongs to a different network")
    g = np.asarray(upstream, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    grads = []
    for layer, a_in, z, a in zip(
        reversed(net.layers), reversed(cache.inputs), reversed(cache.pre), reversed(cache.post)
    ):
        dz = g * _act_grad(layer.activation, z, a)
        grads.append((dz.T @ a_in, dz.sum(axis=0)))
        g = dz @ layer.weight
    grads.reverse()
    return GradientTape(grads), (g[0] if cache.squeeze else g)


def grl_forward(x):
    """Gradient reversal is the identity going forward."""
    return x


def gradient_reversal(upstream, lam):
    if lam < 0:
        raise InvalidInputError("reversal strength must be non-negative")
    return -lam * np.asarray(upstream, dtype=float)


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _batch_logits(logits):
    z = np.asarray(logits, dtype=float)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def cross_entropy(logits, labels, sample_weight=None):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z, squeeze = _batch_logits(logits)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise InvalidInputError("one label per row of logits required")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= z.shape[1]):
        raise InvalidInputError(f"labels must be integers in [0, {z.shape[1]})")
    n = z.shape[0]
    w = np.full(n, 1.0 / n) if sample_weight is None else np.asarray(sample_weight, float)
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = float(-(w * logp[rows, y]).sum())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= w[:, None]
    return loss, (grad[0] if squeeze else grad)


def kl_divergence(p_logits, q_logits):
    """Mean KL(softmax(p) || softmax(q)); gradient w.r.t. ``q_logits`` only."""
    p, squeeze = _batch_logits(p_logits)
    q, _ = _batch_logits(q_logits)
    if p.shape != q.shape:
        raise InvalidInputError(f"logit shapes differ: {p.shape} vs {q.shape}")
    n = p.shape[0]
    logp, logq = log_softmax(p), log_softmax(q)
    pp = np.exp(logp)
    loss = float((pp * (logp - logq)).sum() / n)
    grad = (np.exp(logq) - pp) / n
    return max(loss, 0.0), (grad[0] if squeeze else grad)


def entropy_loss(logits):
    """Mean Shannon entropy of the softmax and its gradient."""
    z, squeeze = _batch_logits(logits)
    n = z.shape[0]
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    grad = -p * (logp + h[:, None]) / n
    return float(h.mean()), (grad[0] if squeeze else grad)


def sgd_step(net, tape, gamma):
    if gamma <= 0:
        raise InvalidInputError("learning rate must be positive")
    if not tape.is_finite():
        raise TrainingDivergenceError("non-finite gradient in sgd_step")
    layers = tuple(
        Layer(l.weight - gamma * dw, l.bias - gamma * db, l.activation)
        for l, (dw, db) in zip(net.layers, tape.grads)
    )
    return DenseNetwork(layers)


@dataclass(frozen=True)
class NetworkTriple:
    """Feature extractor, task head and domain head."""

    extractor: DenseNetwork
    task_head: DenseNetwork
    domain_head: DenseNetwork

    def __post_init__(self):
        d = self.extractor.output_dim
        if self.task_head.input_dim != d or self.domain_head.input_dim != d:
            raise InvalidInputError("both heads must read the extractor's output")

    @property
    def n_classes(self):
        return self.task_head.output_dim

    @property
    def n_domains(self):
        return self.domain_head.output_dim

    def same_parameters(self, other):
        return (
            self.extractor.same_parameters(other.extractor)
            and self.task_head.same_parameters(other.task_head)
            and self.domain_head.same_parameters(other.domain_head)
        )

    def predict(self, x):
        return np.argmax(self.task_head(self.extractor(x)), axis=-1)

    def to_record(self):
        return {
            name: {
                "architecture": net.descriptor(),
                "parameters": net.flat_parameters().tolist(),
            }
            for name, net in self.named()
        }

    @classmethod
    def from_record(cls, record):
        nets = {
            name: DenseNetwork.from_flat(rec["architecture"], rec["parameters"])
            for name, rec in record.items()
        }
        return cls(nets["extractor"], nets["task_head"], nets["domain_head"])

    def named(self):
        return (
            ("extractor", self.extractor),
            ("task_head", self.task_head),
            ("domain_head", self.domain_head),
        )


def make_triple(
    input_dim, n_classes, n_domains, rng, hidden=32, feature_dim=16, head_hidden=32
):
    extractor = init_network([input_dim, hidden, feature_dim], ["tanh", "tanh"], rng)
    task_head = init_network([feature_dim, n_classes], ["identity"], rng)
    domain_head = init_network([feature_dim, head_hidden, n_domains], ["relu", "identity"], rng)
    return NetworkTriple(extractor, task_head, domain_head)


def save_checkpoint(triple, path):
    with open(path, "w") as fh:
        json.dump(triple.to_record(), fh)


def load_checkpoint(path):
    with open(path) as fh:
        return NetworkTriple.from_record(json.load(fh))
