import math

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from dannce_lab import nn
from dannce_lab.errors import ContractViolation, InvalidInputError, TrainingDivergenceError


def small_net(rng, act="tanh"):
    return nn.init_network([3, 5, 4], [act, "identity"], rng)


def with_flat(net, flat):
    return nn.DenseNetwork.from_flat(net.descriptor(), flat)


class TestForward:
    def test_identity_layer(self):
        net = nn.DenseNetwork((nn.Layer(np.eye(3), np.zeros(3)),))
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(nn.forward(net, x)[0], x)

    def test_relu_negative(self):
        net = nn.DenseNetwork((nn.Layer(np.eye(2), [-5.0, -5.0], "relu"),))
        np.testing.assert_array_equal(net(np.array([1.0, 2.0])), [0.0, 0.0])

    def test_two_layer_by_hand(self):
        w1 = np.array([[1.0, 2.0], [0.0, -1.0]])
        b1 = np.array([0.5, 0.0])
        w2 = np.array([[1.0, -1.0]])
        net = nn.DenseNetwork((nn.Layer(w1, b1, "relu"), nn.Layer(w2, [0.25])))
        # hidden = relu([1*1+2*1+.5, -1]) = [3.5, 0]; out = 3.5 - 0 + .25
        assert net(np.array([1.0, 1.0]))[0] == 3.75

    def test_dimension_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            nn.forward(small_net(rng), np.zeros(4))

    def test_incompatible_layers(self):
        with pytest.raises(InvalidInputError):
            nn.DenseNetwork((nn.Layer(np.ones((2, 3)), np.zeros(2)), nn.Layer(np.ones((2, 3)), np.zeros(2))))

    def test_deterministic(self, rng):
        net = small_net(rng)
        x = rng.standard_normal((6, 3))
        np.testing.assert_array_equal(net(x), net(x))


class TestBackward:
    def test_linear_input_grad(self, rng):
        w = rng.standard_normal((2, 3))
        net = nn.DenseNetwork((nn.Layer(w, np.zeros(2)),))
        up = np.array([1.0, -2.0])
        _, cache = nn.forward(net, rng.standard_normal(3))
        _, dx = nn.backward(net, cache, up)
        np.testing.assert_allclose(dx, w.T @ up)

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_finite_differences(self, rng, act):
        net = small_net(rng, act)
        x = rng.standard_normal((4, 3))
        up = rng.standard_normal((4, 4))

        out, cache = nn.forward(net, x)
        tape, dx = nn.backward(net, cache, up)
        f_params = lambda flat: float((with_flat(net, flat)(x) * up).sum())
        f_input = lambda xx: float((net(xx) * up).sum())
        assert rel_error(tape.flat(), numeric_grad(f_params, net.flat_parameters())) < 1e-4
        assert rel_error(dx, numeric_grad(f_input, x)) < 1e-4

    def test_zero_upstream(self, rng):
        net = small_net(rng)
        _, cache = nn.forward(net, rng.standard_normal((2, 3)))
        tape, dx = nn.backward(net, cache, np.zeros((2, 4)))
        assert not tape.flat().any() and not dx.any()

    def test_stale_cache(self, rng):
        net = small_net(rng)
        _, cache = nn.forward(net, rng.standard_normal(3))
        tape, _ = nn.backward(net, cache, np.ones(4))
        newer = nn.sgd_step(net, tape, 0.1)
        with pytest.raises(ContractViolation):
            nn.backward(newer, cache, np.ones(4))


class TestReversal:
    def test_values(self):
        g = np.array([2.0, -4.0])
        np.testing.assert_array_equal(nn.gradient_reversal(g, 1.0), -g)
        np.testing.assert_array_equal(nn.gradient_reversal(g, 0.0), [0.0, 0.0])
        np.testing.assert_array_equal(nn.gradient_reversal(g, 0.5), [-1.0, 2.0])

    def test_involution(self, rng):
        g = rng.standard_normal(5)
        np.testing.assert_array_equal(nn.gradient_reversal(nn.gradient_reversal(g, 1.0), 1.0), g)

    def test_forward_identity(self):
        x = np.arange(3.0)
        assert nn.grl_forward(x) is x

    def test_negative_lambda(self):
        with pytest.raises(InvalidInputError):
            nn.gradient_reversal(np.ones(2), -1.0)


class TestLosses:
    def test_ce_uniform(self):
        loss, _ = nn.cross_entropy(np.zeros(5), 2)
        assert loss == pytest.approx(math.log(5))

    def test_ce_peaked(self):
        assert nn.cross_entropy(np.array([50.0, 0.0, 0.0]), 0)[0] < 1e-20

    def test_ce_fd_fixed(self):
        z = np.array([1.0, 0.0, -1.0])
        loss, g = nn.cross_entropy(z, 0)
        # independent: -log(e / (e + 1 + 1/e))
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1 + math.exp(-1))), abs=1e-14)
        assert rel_error(g, numeric_grad(lambda zz: nn.cross_entropy(zz, 0)[0], z)) < 1e-4

    def test_ce_bad_label(self):
        with pytest.raises(InvalidInputError):
            nn.cross_entropy(np.zeros(3), 3)
        with pytest.raises(InvalidInputError):
            nn.cross_entropy(np.zeros((2, 3)), np.array([0.5, 1.0]))

    def test_kl_identical(self, rng):
        z = rng.standard_normal(4)
        assert nn.kl_divergence(z, z)[0] == pytest.approx(0.0, abs=1e-15)

    def test_kl_nonnegative(self, rng):
        for _ in range(200):
            assert nn.kl_divergence(rng.standard_normal(5) * 3, rng.standard_normal(5) * 3)[0] >= 0.0

    def test_kl_summation_oracle(self):
        p_logits, q_logits = np.array([0.3, -1.2, 2.0]), np.array([1.0, 0.0, -0.5])
        ep, eq = [math.exp(v) for v in p_logits], [math.exp(v) for v in q_logits]
        p = [v / sum(ep) for v in ep]
        q = [v / sum(eq) for v in eq]
        expected = sum(a * math.log(a / b) for a, b in zip(p, q))
        loss, g = nn.kl_divergence(p_logits, q_logits)
        assert loss == pytest.approx(expected, abs=1e-14)
        fd = numeric_grad(lambda qq: nn.kl_divergence(p_logits, qq)[0], q_logits)
        assert rel_error(g, fd) < 1e-4

    def test_kl_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            nn.kl_divergence(np.zeros(3), np.zeros(4))

    def test_entropy(self, rng):
        assert nn.entropy_loss(np.zeros(4))[0] == pytest.approx(math.log(4))
        assert nn.entropy_loss(np.array([40.0, 0.0, 0.0]))[0] < 1e-12
        z = rng.standard_normal((3, 4))
        _, g = nn.entropy_loss(z)
        assert rel_error(g, numeric_grad(lambda zz: nn.entropy_loss(zz)[0], z)) < 1e-4

    def test_random_fd(self, rng):
        for _ in range(20):
            z = rng.standard_normal((3, 4)) * 2
            y = rng.integers(0, 4, 3)
            zq = rng.standard_normal((3, 4))
            assert rel_error(nn.cross_entropy(z, y)[1], numeric_grad(lambda a: nn.cross_entropy(a, y)[0], z)) < 1e-4
            assert rel_error(nn.kl_divergence(z, zq)[1], numeric_grad(lambda a: nn.kl_divergence(z, a)[0], zq)) < 1e-4


class TestSGD:
    def test_zero_tape(self, rng):
        net = small_net(rng)
        assert nn.sgd_step(net, nn.GradientTape.zeros_like(net), 0.5).same_parameters(net)

    def test_single_parameter(self):
        net = nn.DenseNetwork((nn.Layer([[3.0]], [0.0]),))
        tape = nn.GradientTape([(np.array([[2.0]]), np.array([0.0]))])
        assert nn.sgd_step(net, tape, 1.0).layers[0].weight[0, 0] == 1.0

    def test_nonfinite(self, rng):
        net = small_net(rng)
        tape = nn.GradientTape.zeros_like(net)
        tape.grads[0][0][0, 0] = np.nan
        with pytest.raises(TrainingDivergenceError):
            nn.sgd_step(net, tape, 0.1)

    def test_bad_rate(self, rng):
        net = small_net(rng)
        with pytest.raises(InvalidInputError):
            nn.sgd_step(net, nn.GradientTape.zeros_like(net), 0.0)

    @pytest.mark.parametrize("curvature", [0.5, 2.0, 10.0])
    def test_quadratic_monotone(self, curvature):
        # loss c * w^2 has L = 2c; any gamma < 1/L must not increase it
        net = nn.DenseNetwork((nn.Layer([[3.0]], [0.0]),))
        gamma = 0.9 / (2 * curvature)
        prev = curvature * 9.0
        for _ in range(30):
            w = net.layers[0].weight[0, 0]
            tape = nn.GradientTape([(np.array([[2 * curvature * w]]), np.array([0.0]))])
            net = nn.sgd_step(net, tape, gamma)
            loss = curvature * net.layers[0].weight[0, 0] ** 2
            assert loss <= prev
            prev = loss

    def test_does_not_mutate(self, rng):
        net = small_net(rng)
        before = net.flat_parameters().copy()
        _, cache = nn.forward(net, np.ones(3))
        tape, _ = nn.backward(net, cache, np.ones(4))
        nn.sgd_step(net, tape, 0.3)
        np.testing.assert_array_equal(net.flat_parameters(), before)


def test_init_range(rng):
    net = nn.init_network([10, 20], ["identity"], rng)
    limit = math.sqrt(6 / 30)
    assert np.all(np.abs(net.layers[0].weight) <= limit)
    again = nn.init_network([10, 20], ["identity"], np.random.default_rng(1234))
    assert net.same_parameters(again)


def test_checkpoint_roundtrip(tmp_path, rng):
    triple = nn.make_triple(2, 3, 3, rng)
    path = tmp_path / "ckpt.json"
    nn.save_checkpoint(triple, path)
    assert nn.load_checkpoint(path).same_parameters(triple)
    flat = triple.extractor.flat_parameters()
    assert nn.DenseNetwork.from_flat(triple.extractor.descriptor(), flat).same_parameters(triple.extractor)


def test_triple_dims(rng):
    a = nn.init_network([2, 4], ["tanh"], rng)
    b = nn.init_network([5, 3], ["identity"], rng)
    with pytest.raises(InvalidInputError):
        nn.NetworkTriple(a, b, b)
