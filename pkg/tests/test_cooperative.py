import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from dannce_lab import nn
from dannce_lab.cooperative import (
    CooperativeConfig,
    STEP_SIZE_GRID,
    assemble_mixed_sources,
    cooperate_update_kl,
    cooperate_update_plain,
    dump_triples,
    n_updated,
    point_domain_losses,
    point_kl,
    select_indices,
    select_step_size,
    split_sources,
    train_dannce,
)
from dannce_lab.domains import rotated_benchmark
from dannce_lab.errors import ContractViolation, GenerationError, InvalidInputError
from dannce_lab.training import LabeledBatch, TrainingConfig, train_dann


@pytest.fixture(scope="module")
def task():
    return rotated_benchmark(seed=0, per_domain=60)


@pytest.fixture
def setup(task):
    triple = nn.make_triple(2, 3, 3, np.random.default_rng(5))
    return triple, LabeledBatch.concat(task.sources).take(np.arange(0, 180, 9))


class TestUpdateRules:
    @pytest.mark.parametrize("rule", [cooperate_update_plain, cooperate_update_kl])
    def test_no_steps_is_identity(self, setup, rule):
        triple, batch = setup
        for cfg in (CooperativeConfig(steps=0, step_size=0.1), CooperativeConfig(steps=5, step_size=0.0)):
            out = rule(triple, batch, cfg)
            np.testing.assert_array_equal(out.updated.points, batch.points)
            np.testing.assert_allclose(out.kl_drift, 0.0, atol=1e-15)

    def test_plain_one_step(self, setup):
        triple, batch = setup
        eta = 0.05
        out = cooperate_update_plain(triple, batch, CooperativeConfig(steps=1, step_size=eta))
        # each point's loss depends only on that point, so the sum's gradient is per-point
        f = lambda x: float(point_domain_losses(triple, x, batch.domain_labels)[0].sum())
        g = numeric_grad(f, batch.points)
        assert rel_error(batch.points - out.updated.points, eta * g) < 1e-4

    def test_kl_two_steps(self, setup):
        # the KL gradient vanishes at the reference, so step one is a plain step
        triple, batch = setup
        eta, w = 0.05, 2.0
        x0, dom = batch.points, batch.domain_labels
        ref = triple.task_head(triple.extractor(x0))
        x1 = x0 - eta * point_domain_losses(triple, x0, dom)[1]
        x2 = x1 - eta * (point_domain_losses(triple, x1, dom)[1] + w * point_kl(triple, ref, x1)[1])
        out = cooperate_update_kl(triple, batch, CooperativeConfig(steps=2, step_size=eta, kl_weight=w))
        np.testing.assert_allclose(out.updated.points, x2, atol=1e-12)

    def test_kl_gradient_fd(self, setup, rng):
        triple, batch = setup
        ref = rng.standard_normal((len(batch), 3))
        kl, g = point_kl(triple, ref, batch.points)
        fd = numeric_grad(lambda x: float(point_kl(triple, ref, x)[0].sum()), batch.points)
        assert np.all(kl >= 0) and rel_error(g, fd) < 1e-4

    @pytest.mark.parametrize("rule", [cooperate_update_plain, cooperate_update_kl])
    def test_frozen_parameters_and_labels(self, setup, rule):
        triple, batch = setup
        before = [n.flat_parameters().copy() for _, n in triple.named()]
        out = rule(triple, batch, CooperativeConfig(steps=5, step_size=0.1))
        for (_, n), b in zip(triple.named(), before):
            np.testing.assert_array_equal(n.flat_parameters(), b)
        np.testing.assert_array_equal(out.updated.domain_labels, batch.domain_labels)
        np.testing.assert_array_equal(out.updated.class_labels, batch.class_labels)

    def test_domain_loss_decreases(self, setup):
        triple, batch = setup
        out = cooperate_update_plain(triple, batch, CooperativeConfig(steps=5, step_size=0.01))
        assert np.all(out.sd_after <= out.sd_before + 1e-12)

    def test_kl_contains_drift(self, task):
        b = LabeledBatch.concat(task.sources)
        for seed in range(3):
            triple = nn.make_triple(2, 3, 3, np.random.default_rng(seed))
            cfg = CooperativeConfig(steps=10, step_size=0.5)
            plain = cooperate_update_plain(triple, b, cfg)
            kl = cooperate_update_kl(triple, b, cfg)
            assert kl.kl_drift.mean() <= plain.kl_drift.mean()

    def test_empty_batch(self, setup):
        triple, batch = setup
        out = cooperate_update_kl(triple, batch.take(np.arange(0)), CooperativeConfig())
        assert len(out) == 0 and out.kl_drift.shape == (0,)

    def test_nonfinite_point(self, setup):
        triple, batch = setup
        x = batch.points.copy()
        x[3] = np.nan
        with pytest.raises(GenerationError) as exc:
            cooperate_update_plain(triple, batch.with_points(x), CooperativeConfig(steps=1, step_size=0.1))
        assert exc.value.point_index == 3

    def test_unknown_domain(self, setup):
        triple, batch = setup
        bad = LabeledBatch(batch.points, batch.class_labels, np.full(len(batch), 5))
        with pytest.raises(InvalidInputError):
            cooperate_update_plain(triple, bad, CooperativeConfig())

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            CooperativeConfig(beta=1.5)
        with pytest.raises(InvalidInputError):
            CooperativeConfig(steps=-1)
        with pytest.raises(InvalidInputError):
            CooperativeConfig(step_size=-0.1)


class TestMixing:
    def test_counts(self):
        assert n_updated(8, 0.0) == 0
        assert n_updated(8, 1.0) == 8
        assert n_updated(8, 0.5) == 4
        assert n_updated(7, 0.5) == 4

    @given(st.integers(1, 200), st.floats(0.0, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_selection(self, b, beta):
        idx = select_indices(b, beta, np.random.default_rng(0))
        assert len(idx) == n_updated(b, beta) and len(set(idx.tolist())) == len(idx)
        assert n_updated(b, beta) >= beta * b - 1e-9

    def test_assemble(self, setup):
        triple, batch = setup
        beta = 0.5
        idx = select_indices(len(batch), beta, np.random.default_rng(0))
        coop = cooperate_update_plain(triple, batch.take(idx), CooperativeConfig(step_size=0.1))
        coop = replace(coop, indices=idx)
        (mixed,) = assemble_mixed_sources([batch], [coop], beta)
        rest = np.setdiff1d(np.arange(len(batch)), idx)
        np.testing.assert_array_equal(mixed.points[rest], batch.points[rest])
        np.testing.assert_array_equal(mixed.points[idx], coop.updated.points)
        np.testing.assert_array_equal(mixed.domain_labels, batch.domain_labels)
        with pytest.raises(ContractViolation):
            assemble_mixed_sources([batch], [coop], 1.0)
        with pytest.raises(ContractViolation):
            assemble_mixed_sources([batch, batch], [coop], beta)
        relabeled = replace(coop, updated=LabeledBatch(coop.updated.points, coop.updated.class_labels, coop.updated.domain_labels + 1))
        with pytest.raises(ContractViolation):
            assemble_mixed_sources([batch], [relabeled], beta)


class TestTraining:
    def test_runs_and_records(self, task):
        cfg = TrainingConfig(epochs=3, seed=2)
        seen = []

        def hook(epoch, step, batches):
            seen.extend(bool(np.all(b.domain_labels == i)) for i, b in enumerate(batches))

        res = train_dannce(nn.make_triple(2, 3, 3, np.random.default_rng(0)), task.sources, cfg, batch_hook=hook)
        assert seen and all(seen)
        for m in res.metrics:
            assert len(m.coop_sd_before) > 0 and len(m.coop_sd_before) == len(m.coop_sd_after)
            assert m.coop_kl_drift >= 0

    def test_deterministic(self, task):
        cfg = TrainingConfig(epochs=2, seed=4)
        mk = lambda: nn.make_triple(2, 3, 3, np.random.default_rng(0))
        a = train_dannce(mk(), task.sources, cfg)
        b = train_dannce(mk(), task.sources, cfg)
        assert a.triple.same_parameters(b.triple)

    def test_beta_zero_is_dann(self, task):
        cfg = TrainingConfig(epochs=2, seed=4)
        mk = lambda: nn.make_triple(2, 3, 3, np.random.default_rng(0))
        a = train_dannce(mk(), task.sources, cfg, CooperativeConfig(beta=0.0))
        b = train_dann(mk(), task.sources, cfg)
        assert a.triple.same_parameters(b.triple)

    def test_step_size_selection(self, task):
        cfg = TrainingConfig(epochs=2, seed=0)
        best, scores = select_step_size(lambda: nn.make_triple(2, 3, 3, np.random.default_rng(0)), task.sources, cfg)
        assert best in STEP_SIZE_GRID and set(scores) == set(STEP_SIZE_GRID)
        assert scores[best] == min(scores.values())

    def test_split(self, task):
        train, val = split_sources(task.sources, 0.2, seed=0)
        for s, tr, va in zip(task.sources, train, val):
            assert len(tr) + len(va) == len(s) and len(va) == 12
            assert np.all(va.domain_labels == s.domain_labels[0])


def test_dump_triples(setup, tmp_path):
    triple, batch = setup
    coop = cooperate_update_kl(triple, batch, CooperativeConfig(step_size=0.1))
    dump_triples(coop, tmp_path / "t.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(rows) == len(batch) and set(rows[0]) == {"x0", "xt", "kl_drift"}
