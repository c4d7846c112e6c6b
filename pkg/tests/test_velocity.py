import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mwgrad.core import InvalidArgumentError
from mwgrad.kernels import RbfKernel
from mwgrad.nn import JS, KLEnergy, KLSample, MlpParams, init_mlp
from mwgrad.objectives import EnergyObjective, GaussianMixture, potential_grad, standard_normal
from mwgrad.velocity import blob_velocity, nn_velocity, recovered_first_variation, svgd_velocity

from oracles import blob_transcription, central_diff

K001 = RbfKernel(0.01)
STD2 = EnergyObjective(standard_normal(2))


def mixture_obj():
    gm = GaussianMixture([0.6, 0.4], [[1.0, -1.0], [-2.0, 0.5]], [np.eye(2), [[2.0, 0.3], [0.3, 0.5]]])
    return EnergyObjective(gm)


class TestSvgdVelocity:
    def test_single_particle(self):
        obj = mixture_obj()
        x = np.array([[0.3, -0.7]])
        np.testing.assert_array_equal(svgd_velocity(x, obj, K001), potential_grad(obj, x))

    def test_two_particle_worked_example(self):
        v = svgd_velocity(np.array([[0.0, 0.0], [1.0, 0.0]]), STD2, K001)
        np.testing.assert_allclose(v[0], [1.0098508304241514, 0.0], rtol=1e-12, atol=1e-15)

    def test_mean_normalization(self):
        x = np.random.default_rng(0).normal(size=(7, 2))
        np.testing.assert_allclose(svgd_velocity(x, STD2, K001, "mean"), svgd_velocity(x, STD2, K001) / 7,
                                   rtol=1e-14)

    def test_unknown_normalization(self):
        with pytest.raises(InvalidArgumentError):
            svgd_velocity(np.zeros((2, 2)), STD2, K001, "median")

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            svgd_velocity(np.zeros((2, 3)), STD2, K001)

    def test_far_particles_follow_drift(self):
        rng = np.random.default_rng(1)
        dirs = rng.normal(size=(30, 2))
        x = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * rng.uniform(10.5, 40, size=(30, 1))
        v = svgd_velocity(x, STD2, K001)
        assert np.all(np.sum(v * x, axis=1) > 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 12))
    def test_permutation_equivariance(self, seed, m):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=3.0, size=(m, 2))
        perm = rng.permutation(m)
        obj = mixture_obj()
        np.testing.assert_allclose(svgd_velocity(x[perm], obj, K001), svgd_velocity(x, obj, K001)[perm],
                                   rtol=1e-12, atol=1e-12)


class TestBlobVelocity:
    def test_single_particle(self):
        obj = mixture_obj()
        x = np.array([[1.5, 2.0]])
        np.testing.assert_array_equal(blob_velocity(x, obj, K001), potential_grad(obj, x))

    def test_coincident_particles(self):
        x = np.array([[0.7, -0.2], [0.7, -0.2]])
        v = blob_velocity(x, STD2, K001)
        np.testing.assert_array_equal(v, potential_grad(STD2, x))

    @pytest.mark.parametrize("seed", range(5))
    def test_transcription(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 2))
        gamma = 0.5
        ref = blob_transcription(x.tolist(), lambda p: list(p), gamma)
        got = blob_velocity(x, STD2, RbfKernel(gamma))
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-10

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(9, 2))
        perm = rng.permutation(9)
        np.testing.assert_allclose(blob_velocity(x[perm], STD2, K001), blob_velocity(x, STD2, K001)[perm],
                                   rtol=1e-12, atol=1e-12)


def random_params(act, seed, d=2, hidden=(8, 8), scale=1.0):
    p = init_mlp(d, hidden, act, np.random.default_rng(seed))
    for arr in p.arrays():
        arr *= scale
    return p


class TestNnVelocity:
    def test_zero_network_kl_sample(self):
        p = MlpParams([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)], "identity")
        np.testing.assert_array_equal(nn_velocity(p, np.ones((4, 2)), KLSample()), np.zeros((4, 2)))

    def test_kl_energy_constant_critic_matched_densities(self):
        spec = KLEnergy(standard_normal(2))
        p = MlpParams([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.full(1, 0.7)], "relu_eps")
        v = nn_velocity(p, np.random.default_rng(0).normal(size=(5, 2)), spec)
        np.testing.assert_allclose(v, 0.0, atol=1e-15)

    @pytest.mark.parametrize("spec", [KLSample(), JS(), KLEnergy(mixture_obj().target)],
                             ids=["kl-sample", "js", "kl-energy"])
    def test_matches_finite_differences(self, spec):
        p = random_params(spec.output_activation, 3, scale=1.5)
        x = np.random.default_rng(4).normal(size=(10, 2))
        v = nn_velocity(p, x, spec)
        for i in range(len(x)):
            fd = central_diff(lambda y: recovered_first_variation(p, y, spec), x[i])
            assert np.linalg.norm(v[i] - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)

    def test_js_saturated_critic_stays_finite(self):
        p = MlpParams([np.array([[1e3, 0.0]])], [np.zeros(1)], "sigmoid")
        v = nn_velocity(p, np.array([[50.0, 0.0], [-50.0, 0.0]]), JS())
        assert np.all(np.isfinite(v))
        np.testing.assert_allclose(v[0], [-500.0, 0.0])

    def test_activation_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            nn_velocity(random_params("identity", 0), np.zeros((2, 2)), JS())

    def test_permutation_equivariance(self):
        p = random_params("sigmoid", 5)
        x = np.random.default_rng(6).normal(size=(8, 2))
        perm = np.random.default_rng(7).permutation(8)
        np.testing.assert_allclose(nn_velocity(p, x[perm], JS()), nn_velocity(p, x, JS())[perm], rtol=1e-13)
