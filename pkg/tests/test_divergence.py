import json
import math

import numpy as np
import pytest

from dannce_lab import nn
from dannce_lab.divergence import (
    DomainSample,
    curve_from_metrics,
    discriminator_loss_curve,
    proxy_a_distance,
    representation_proxy_distances,
    uniform_loss,
    write_curve_jsonl,
)
from dannce_lab.domains import rotated_benchmark
from dannce_lab.errors import InvalidInputError
from dannce_lab.training import TrainingConfig, train_dann


class TestProxyDistance:
    def test_same_distribution_small(self):
        rng = np.random.default_rng(0)
        vals = [proxy_a_distance(rng.standard_normal((300, 2)), rng.standard_normal((300, 2)), seed=s) for s in range(5)]
        assert np.mean(vals) < 0.3

    def test_disjoint_large(self):
        rng = np.random.default_rng(1)
        assert proxy_a_distance(rng.standard_normal((300, 2)), rng.standard_normal((300, 2)) + 10, seed=0) > 1.7

    def test_identical_samples(self):
        x = np.random.default_rng(2).standard_normal((200, 2))
        assert proxy_a_distance(x, x) == pytest.approx(0.0, abs=0.05)

    def test_range_and_determinism(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((100, 3)), rng.standard_normal((120, 3)) + 0.7
        v = proxy_a_distance(a, b, seed=9)
        assert 0.0 <= v <= 2.0 and v == proxy_a_distance(a, b, seed=9)

    def test_monotone_in_shift(self):
        rng = np.random.default_rng(4)
        vals = []
        for d in (0.0, 0.5, 1.0, 2.0, 4.0):
            vals.append(np.mean([
                proxy_a_distance(rng.standard_normal((300, 2)), rng.standard_normal((300, 2)) + [d, 0.0], seed=s)
                for s in range(3)
            ]))
        assert all(b >= a - 0.15 for a, b in zip(vals, vals[1:]))

    def test_bad_inputs(self):
        with pytest.raises(InvalidInputError):
            proxy_a_distance(np.zeros((10, 2)), np.zeros((10, 3)))
        with pytest.raises(InvalidInputError):
            proxy_a_distance(np.zeros((1, 2)), np.zeros((10, 2)))
        with pytest.raises(InvalidInputError):
            DomainSample(np.zeros((0, 2)))

    def test_one_dimensional(self):
        x = DomainSample(np.linspace(0, 1, 100))
        assert x.points.shape == (100, 1)
        assert proxy_a_distance(x, DomainSample(np.linspace(5, 6, 100))) > 1.7


class TestLossCurve:
    def test_identical_domains(self):
        x = np.random.default_rng(0).standard_normal((300, 2))
        triple = nn.make_triple(2, 3, 3, np.random.default_rng(0))
        curve = discriminator_loss_curve(triple, [x, x, x], epochs=30)
        assert abs(curve[-1] - uniform_loss(3)) < 0.05

    def test_separable_domains_decrease(self):
        x = np.random.default_rng(0).standard_normal((300, 2))
        triple = nn.make_triple(2, 3, 3, np.random.default_rng(0))
        before = triple.extractor.flat_parameters().copy()
        curve = discriminator_loss_curve(triple, [x, x + 3, x - 3], epochs=30)
        assert curve[-1] < curve[0] and curve[-1] < 0.5 * uniform_loss(3)
        np.testing.assert_array_equal(triple.extractor.flat_parameters(), before)

    def test_fresh_head_and_batches(self):
        task = rotated_benchmark(seed=0, per_domain=60)
        triple = nn.make_triple(2, 3, 3, np.random.default_rng(0))
        a = discriminator_loss_curve(triple, task.sources, epochs=3, fresh_head=True)
        b = discriminator_loss_curve(triple, task.sources, epochs=3, fresh_head=True)
        assert a == b and len(a) == 3

    def test_validation(self):
        triple = nn.make_triple(2, 3, 3, np.random.default_rng(0))
        x = np.zeros((20, 2))
        with pytest.raises(InvalidInputError):
            discriminator_loss_curve(triple, [x])
        with pytest.raises(InvalidInputError):
            discriminator_loss_curve(triple, [x, x])
        with pytest.raises(InvalidInputError):
            discriminator_loss_curve(triple, [x, x, x], batch_size=50)

    def test_from_metrics_and_file(self, tmp_path):
        task = rotated_benchmark(seed=0, per_domain=60)
        res = train_dann(nn.make_triple(2, 3, 3, np.random.default_rng(0)), task.sources, TrainingConfig(epochs=2))
        curve = curve_from_metrics(res.metrics)
        write_curve_jsonl(curve, tmp_path / "c.jsonl")
        rows = [json.loads(l) for l in (tmp_path / "c.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1]
        assert rows[1]["mean_domain_loss"] == curve[1]


def test_representation_distances():
    task = rotated_benchmark(seed=0, per_domain=60)
    triple = nn.make_triple(2, 3, 3, np.random.default_rng(0))
    d = representation_proxy_distances(triple, task.sources, epochs=5)
    assert len(d) == 3 and all(0 <= v <= 2 for v in d)


def test_uniform_loss():
    assert uniform_loss(4) == math.log(4)
