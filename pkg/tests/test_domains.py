import itertools

import numpy as np
import pytest

from dannce_lab import geometry as geo
from dannce_lab.domains import (
    DomainSpec,
    example1_fixture,
    generate,
    identical_sources,
    invert_transform,
    read_dataset,
    rotated_benchmark,
    rotation,
    write_dataset,
)
from dannce_lab.errors import InvalidInputError


class TestGenerate:
    def test_deterministic(self):
        a, b = rotated_benchmark(seed=7), rotated_benchmark(seed=7)
        for x, y in zip([*a.sources, a.target], [*b.sources, b.target]):
            assert x == y

    def test_seed_changes_data(self):
        a, b = rotated_benchmark(seed=1), rotated_benchmark(seed=2)
        assert not np.array_equal(a.target.points, b.target.points)

    def test_labels(self):
        task = rotated_benchmark(seed=0, per_domain=60)
        for i, s in enumerate(task.sources):
            assert np.all(s.domain_labels == i)
            assert np.bincount(s.class_labels).tolist() == [20, 20, 20]
        assert np.all(task.target.domain_labels == 3)

    def test_duplicate_transform(self):
        specs = [DomainSpec(transform=a) for a in (0, 15, 15, 45)]
        with pytest.raises(InvalidInputError):
            generate(specs, seed=0)

    def test_too_few_domains(self):
        with pytest.raises(InvalidInputError):
            generate([DomainSpec(transform=0), DomainSpec(transform=10)], seed=0)

    def test_mixed_kinds(self):
        specs = [DomainSpec(transform=0), DomainSpec(transform=1), DomainSpec("shifted-uniform-1d", 2.0)]
        with pytest.raises(InvalidInputError):
            generate(specs, seed=0)

    def test_bad_spec(self):
        with pytest.raises(InvalidInputError):
            DomainSpec(kind="spirals")
        with pytest.raises(InvalidInputError):
            DomainSpec(kind="two-moons-rotation", n_classes=3)

    def test_rotation_orthogonal(self):
        r = rotation(37.0)
        np.testing.assert_allclose(r @ r.T, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(rotation(90.0) @ [1.0, 0.0], [0.0, 1.0], atol=1e-15)

    def test_covariate_shift(self):
        # undoing each domain's transform must give the same class-conditional
        # law: class means agree within sampling error, priors are identical
        specs = [DomainSpec(transform=a, points_per_class=2000, noise=0.6) for a in (0, 20, 40, 70)]
        task = generate(specs, seed=0)
        batches = [*task.sources, task.target]
        means = []
        for spec, b in zip(task.specs, batches):
            x = invert_transform(spec, b.points)
            means.append([x[b.class_labels == c].mean(axis=0) for c in range(3)])
            assert np.bincount(b.class_labels).tolist() == [2000] * 3
        se = 0.6 / np.sqrt(2000)
        for m1, m2 in itertools.combinations(means, 2):
            assert np.max(np.abs(np.array(m1) - np.array(m2))) < 6 * se * np.sqrt(2)

    @pytest.mark.parametrize("kind,transforms,classes", [
        ("shifted-uniform-1d", (0.0, 0.5, 1.0), 3),
        ("two-moons-rotation", (0.0, 30.0, 60.0), 2),
    ])
    def test_other_kinds(self, kind, transforms, classes):
        task = generate([DomainSpec(kind, t, classes, 50) for t in transforms], seed=0)
        assert task.dim == (1 if kind == "shifted-uniform-1d" else 2)
        assert all(np.isfinite(s.points).all() for s in task.sources)

    def test_identical_sources(self):
        srcs = identical_sources(seed=0, k=4, per_domain=30)
        assert len(srcs) == 4
        for i, s in enumerate(srcs):
            np.testing.assert_array_equal(s.points, srcs[0].points)
            assert np.all(s.domain_labels == i)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        task = rotated_benchmark(seed=4, per_domain=30)
        path = tmp_path / "data.csv"
        write_dataset(task, path)
        back = read_dataset(path)
        assert back.seed == 4 and back.target_domain == 3
        assert back.specs == task.specs
        for x, y in zip([*task.sources, task.target], [*back.sources, back.target]):
            assert x == y

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text('# {"seed": 0, "target_domain": 1, "specs": []}\nx0,class_label,domain_label\n0.5,1\n')
        with pytest.raises(InvalidInputError, match=":3:"):
            read_dataset(path)
        path.write_text("x0,class_label,domain_label\n")
        with pytest.raises(InvalidInputError, match=":1:"):
            read_dataset(path)


class TestExample1:
    def test_divergences(self):
        fx = example1_fixture()
        p1, p2 = fx.sources.sources
        assert geo.exact_interval_divergence(p1, p2) == 2.0
        assert geo.exact_interval_divergence(p1, fx.s) == 1.0
        assert geo.exact_interval_divergence(p2, fx.s) == 1.0

    def test_condition(self):
        fx = example1_fixture()
        rep = geo.check_condition(fx.sources, fx.s)
        assert (rep.lhs, rep.rhs, rep.slack, rep.passed) == (1.0, 2.0, 1.0, True)
        bad = geo.check_condition(fx.tight_sources, fx.far)
        assert not bad.passed and bad.slack == pytest.approx(-1.0)

    def test_not_a_mixture(self):
        # every convex combination on a 1e-3 weight grid misses U(1,3)
        fx = example1_fixture()
        p1, p2 = fx.sources.sources
        ws = np.linspace(0.0, 1.0, 1001)
        best = min(np.abs(w * p1.bin_mass + (1 - w) * p2.bin_mass - fx.s.bin_mass).sum() for w in ws)
        assert best > 0.5

    def test_in_every_ball(self):
        fx = example1_fixture()
        assert geo.intersection_membership(fx.sources, fx.s)
        assert geo.intersection_membership(fx.sources, fx.s, rho=1.0)
        assert geo.intersection_membership(fx.sources, fx.far)  # ρ = 2 is the ceiling
        assert not geo.intersection_membership(fx.tight_sources, fx.far)
