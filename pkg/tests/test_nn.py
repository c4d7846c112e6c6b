import math

import numpy as np
import pytest

from mwgrad.core import InvalidArgumentError, TrainingDivergedError
from mwgrad.nn import (
    JS,
    RELU_EPS,
    KLEnergy,
    KLSample,
    MlpParams,
    init_mlp,
    mlp_forward,
    mlp_input_grad,
    mlp_param_grads,
    train_variational,
    variational_value,
)
from mwgrad.objectives import sample_targets_from_paper, standard_normal


def zero_net(d=2, hidden=(3, 3), act="identity"):
    widths = [d, *hidden, 1]
    return MlpParams([np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
                     [np.zeros(o) for o in widths[1:]], act)


def linear_net(w, act="identity"):
    return MlpParams([np.array([w], dtype=float)], [np.zeros(1)], act)


def random_net(rng, d, hidden, act="identity", scale=1.0):
    p = init_mlp(d, hidden, act, rng)
    for arr in p.arrays():
        arr *= scale
    return p


def scalar_loss(p, batch, coeffs):
    return float(np.dot(coeffs, mlp_forward(p, batch)))


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestForward:
    def test_zero_network(self):
        assert mlp_forward(zero_net(), [1.0, -2.0]) == 0.0

    def test_single_linear_layer(self):
        assert mlp_forward(linear_net([1.0, 0.0]), [3.0, 5.0]) == 3.0

    def test_sigmoid_range(self):
        rng = np.random.default_rng(0)
        p = random_net(rng, 2, (5,), "sigmoid", scale=3.0)
        out = mlp_forward(p, rng.normal(scale=3.0, size=(500, 2)))
        assert np.all((out > 0) & (out < 1))

    def test_relu_eps_floor(self):
        rng = np.random.default_rng(1)
        p = random_net(rng, 2, (5,), "relu_eps", scale=3.0)
        out = mlp_forward(p, rng.normal(scale=5.0, size=(2000, 2)))
        assert np.all(out >= RELU_EPS)
        assert np.all(np.isfinite(np.log(out)))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            mlp_forward(zero_net(d=2), [1.0, 2.0, 3.0])

    def test_layer_chain_validated(self):
        with pytest.raises(InvalidArgumentError):
            MlpParams([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)])


class TestParamGrads:
    def test_zero_loss_gradient(self):
        rng = np.random.default_rng(0)
        p = random_net(rng, 2, (4, 4))
        g = mlp_param_grads(p, np.zeros(5), rng.normal(size=(5, 2)))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_linearity(self):
        rng = np.random.default_rng(1)
        p = random_net(rng, 2, (4, 4), "sigmoid")
        batch, c = rng.normal(size=(6, 2)), rng.normal(size=6)
        g1 = mlp_param_grads(p, c, batch)
        g2 = mlp_param_grads(p, 2 * c, batch)
        for a, b in zip(g1.arrays(), g2.arrays()):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-14, atol=0)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        p = random_net(rng, 2, (4,))
        with pytest.raises(InvalidArgumentError):
            mlp_param_grads(p, np.ones(3), rng.normal(size=(4, 2)))

    @pytest.mark.parametrize("act", ["identity", "sigmoid", "relu_eps"])
    def test_finite_differences(self, act):
        rng = np.random.default_rng(3)
        p = random_net(rng, 3, (6, 5), act)
        batch, c = rng.normal(size=(8, 3)), rng.normal(size=8)
        grads = mlp_param_grads(p, c, batch)
        for arr, g in zip(p.arrays(), grads.arrays()):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + 1e-5
                up = scalar_loss(p, batch, c)
                arr[idx] = old - 1e-5
                down = scalar_loss(p, batch, c)
                arr[idx] = old
                fd[idx] = (up - down) / 2e-5
            assert rel_err(g, fd) < 1e-4


class TestInputGrad:
    def test_linear(self):
        np.testing.assert_array_equal(mlp_input_grad(linear_net([2.5, -1.0]), [7.0, 3.0]), [2.5, -1.0])

    def test_zero_network(self):
        np.testing.assert_array_equal(mlp_input_grad(zero_net(), [1.0, 1.0]), [0.0, 0.0])

    @pytest.mark.parametrize("act", ["identity", "sigmoid"])
    def test_finite_differences(self, act):
        rng = np.random.default_rng(4)
        p = random_net(rng, 2, (10, 10), act)
        for _ in range(10):
            x = rng.normal(size=2)
            fd = np.array([(mlp_forward(p, x + e) - mlp_forward(p, x - e)) / 2e-5 for e in 1e-5 * np.eye(2)])
            assert rel_err(mlp_input_grad(p, x), fd) < 1e-4


class TestVariationalObjectives:
    def test_kl_zero_critic_value(self):
        rng = np.random.default_rng(0)
        v = variational_value(KLSample(), zero_net(act="identity"), rng.normal(size=(7, 2)), rng.normal(size=(11, 2)))
        assert v == 0.0

    def test_js_uninformative_critic(self):
        rng = np.random.default_rng(1)
        # zero logits -> h' = 1/2 everywhere
        v = variational_value(JS(), zero_net(act="sigmoid"), rng.normal(size=(7, 2)), rng.normal(size=(9, 2)))
        assert v == pytest.approx(2 * math.log(0.5), rel=1e-14)
        assert v == pytest.approx(-1.386294, abs=1e-6)

    def test_spec_must_match_activation(self):
        with pytest.raises(InvalidArgumentError):
            variational_value(JS(), zero_net(act="identity"), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_kl_energy_uses_log_ratio(self):
        """With h' = const and q == p == target, the objective is exactly 0."""
        spec = KLEnergy(standard_normal(2))
        p = zero_net(act="relu_eps")
        p.biases[-1][:] = 2.0
        rng = np.random.default_rng(2)
        assert variational_value(spec, p, rng.normal(size=(5, 2)), rng.normal(size=(6, 2))) == pytest.approx(0.0, abs=1e-12)


class TestTraining:
    def test_kl_gaussians(self):
        """N(0,1) vs N(1,1): closed-form KL is (1 - 0)^2 / 2 = 0.5."""
        rng = np.random.default_rng(0)
        q = rng.normal(0.0, 1.0, (2000, 1))
        pi = rng.normal(1.0, 1.0, (2000, 1))
        p = train_variational(KLSample(), q, pi, steps=500, step_size=1e-2, rng=np.random.default_rng(1))
        assert abs(variational_value(KLSample(), p, q, pi) - 0.5) <= 0.15

    def test_identical_samples(self):
        x = np.random.default_rng(2).normal(size=(500, 1))
        p = train_variational(KLSample(), x, x, steps=500, step_size=1e-2, rng=np.random.default_rng(3))
        v = variational_value(KLSample(), p, x, x)
        assert -0.05 <= v <= 0.25

    def test_js_improves_on_separated_sets(self):
        rng = np.random.default_rng(4)
        q, pi = rng.normal(-2, 1, (300, 2)), rng.normal(2, 1, (300, 2))
        p0 = init_mlp(2, (10, 10), "sigmoid", np.random.default_rng(5))
        p = train_variational(JS(), q, pi, steps=200, step_size=5e-2, init=p0)
        assert variational_value(JS(), p, q, pi) > variational_value(JS(), p0, q, pi) + 0.5

    def test_kl_energy_trains(self):
        target = sample_targets_from_paper()[0]
        spec = KLEnergy(target)
        rng = np.random.default_rng(6)
        q, base = rng.normal(size=(50, 2)), rng.normal(size=(100, 2))
        p0 = init_mlp(2, (20, 20), "relu_eps", np.random.default_rng(7))
        p = train_variational(spec, q, base, steps=50, step_size=1e-2, init=p0)
        assert variational_value(spec, p, q, base) >= variational_value(spec, p0, q, base)

    def test_warm_start_does_not_mutate_init(self):
        p0 = init_mlp(2, (4,), "identity", np.random.default_rng(8))
        before = [a.copy() for a in p0.arrays()]
        rng = np.random.default_rng(9)
        train_variational(KLSample(), rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), 5, 0.1, init=p0)
        for a, b in zip(before, p0.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        q, pi = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        a = train_variational(KLSample(), q, pi, 10, 0.05, rng=np.random.default_rng(11))
        b = train_variational(KLSample(), q, pi, 10, 0.05, rng=np.random.default_rng(11))
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_divergence_reports_step(self):
        rng = np.random.default_rng(12)
        q, pi = rng.normal(-3, 0.1, (20, 1)), rng.normal(3, 0.1, (20, 1))
        with pytest.raises(TrainingDivergedError) as info:
            train_variational(KLSample(), q, pi, 50, 1e307, rng=np.random.default_rng(13))
        assert info.value.step >= 1

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            train_variational(KLSample(), np.zeros((3, 2)), np.zeros((3, 1)), 1, 0.1, rng=np.random.default_rng(0))


class TestGradientSweep:
    """Backprop against central differences on 20 random nets up to widths (50, 50)."""

    def test_random_nets(self):
        rng = np.random.default_rng(20)
        for trial in range(20):
            widths = (int(rng.integers(1, 51)), int(rng.integers(1, 51)))
            act = ("identity", "sigmoid", "relu_eps")[trial % 3]
            p = random_net(rng, 2, widths, act)
            batch, c = rng.normal(size=(4, 2)), rng.normal(size=4)
            grads = mlp_param_grads(p, c, batch)
            for arr, g in zip(p.arrays(), grads.arrays()):
                # spot-check up to 15 coordinates per array
                flat = [np.unravel_index(i, arr.shape) for i in rng.choice(arr.size, min(15, arr.size), replace=False)]
                an, fd = [], []
                for idx in flat:
                    old = arr[idx]
                    arr[idx] = old + 1e-5
                    up = scalar_loss(p, batch, c)
                    arr[idx] = old - 1e-5
                    down = scalar_loss(p, batch, c)
                    arr[idx] = old
                    fd.append((up - down) / 2e-5)
                    an.append(g[idx])
                assert rel_err(np.array(an), np.array(fd)) < 1e-4
            x = rng.normal(size=2)
            fdx = np.array([(mlp_forward(p, x + e) - mlp_forward(p, x - e)) / 2e-5 for e in 1e-5 * np.eye(2)])
            assert rel_err(mlp_input_grad(p, x), fdx) < 1e-4
