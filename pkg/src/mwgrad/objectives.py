"""Gaussian-mixture targets, energy objectives and sample-set objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import InvalidArgumentError, as_finite_array
from .kernels import RbfKernel, gram

DIVERGENCES = ("kl", "js")


class GaussianMixture:
    """Normalized mixture ``sum_c weight_c * N(mean_c, cov_c)``.

    Covariances are general SPD matrices; their Cholesky factors and inverses
    are cached at construction.
    """

    def __init__(self, weights, means, covs=None):
        weights = as_finite_array(weights, "mixture weights", ndim=1)
        means = as_finite_array(means, "mixture means", ndim=2)
        n_comp, d = means.shape
        if weights.shape != (n_comp,):
            raise InvalidArgumentError("need one weight per mixture component")
        if np.any(weights <= 0) or np.any(weights > 1) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError(f"mixture weights must lie in (0, 1] and sum to 1, got {weights}")
        if covs is None:
            covs = np.broadcast_to(np.eye(d), (n_comp, d, d))
        covs = as_finite_array(covs, "mixture covariances", ndim=3)
        if covs.shape != (n_comp, d, d):
            raise InvalidArgumentError(f"covariances must have shape {(n_comp, d, d)}, got {covs.shape}")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=1e-12):
            raise InvalidArgumentError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise InvalidArgumentError("covariances must be positive definite") from exc

        self.weights = weights.copy()
        self.means = means.copy()
        self.covs = covs.copy()
        self.precisions = np.linalg.inv(covs)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = np.log(weights) - 0.5 * (d * np.log(2 * np.pi) + logdet)
        for arr in (self.weights, self.means, self.covs, self.precisions):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self):
        return list(zip(self.weights, self.means, self.covs))

    @classmethod
    def isotropic(cls, weights, means):
        """Mixture with identity covariance for every component."""
        return cls(weights, means)

    def _component_log_terms(self, x: np.ndarray) -> np.ndarray:
        diff = x[:, None, :] - self.means[None, :, :]
        maha = np.einsum("ncj,cjk,nck->nc", diff, self.precisions, diff)
        return self._log_norm[None, :] - 0.5 * maha

    def to_dict(self) -> dict:
        return {
            "components": [
                {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in self.components
            ]
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "GaussianMixture":
        comps = spec["components"]
        weights = [c["weight"] for c in comps]
        means = [c["mean"] for c in comps]
        covs = None
        if any("cov" in c for c in comps):
            d = len(means[0])
            covs = [c.get("cov", np.eye(d).tolist()) for c in comps]
        return cls(weights, means, covs)


def _points(gm: GaussianMixture, x):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != gm.dim:
        raise InvalidArgumentError(f"expected points of dimension {gm.dim}, got {arr.shape[1]}")
    return arr, single


def mixture_log_density(gm: GaussianMixture, x):
    """Log density at one point (returns float) or at each row of a matrix."""
    pts, single = _points(gm, x)
    out = logsumexp(gm._component_log_terms(pts), axis=1)
    return float(out[0]) if single else out


def mixture_grad_log_density(gm: GaussianMixture, x):
    """Score ``grad_x log pi(x)`` via posterior component responsibilities."""
    pts, single = _points(gm, x)
    terms = gm._component_log_terms(pts)
    resp = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
    diff = gm.means[None, :, :] - pts[:, None, :]
    pulls = np.einsum("cjk,nck->ncj", gm.precisions, diff)
    out = np.einsum("nc,ncj->nj", resp, pulls)
    return out[0] if single else out


def standard_normal(d: int) -> GaussianMixture:
    return GaussianMixture([1.0], np.zeros((1, d)))


@dataclass(frozen=True)
class EnergyObjective:
    """``F(q) = E_q[g] + E_q[log q]`` with potential ``g = -log target``."""

    target: GaussianMixture

    @property
    def dim(self) -> int:
        return self.target.dim


@dataclass(frozen=True, eq=False)
class SampleObjective:
    """Divergence to a target known only through ``samples``."""

    samples: np.ndarray
    divergence: str = "kl"

    def __post_init__(self):
        arr = as_finite_array(self.samples, "target samples", ndim=2)
        if arr.shape[0] < 2:
            raise InvalidArgumentError("a sample objective needs at least 2 samples")
        if self.divergence not in DIVERGENCES:
            raise InvalidArgumentError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def potential(obj: EnergyObjective, x):
    out = mixture_log_density(obj.target, x)
    return -out


def potential_grad(obj: EnergyObjective, x):
    return -mixture_grad_log_density(obj.target, x)


# (weight, mean) pairs for the four targets; every covariance is the 2x2 identity.
FOUR_TARGETS = (
    ((0.7, (4.0, -4.0)), (0.3, (0.0, 0.1))),
    ((0.7, (-4.0, 4.0)), (0.3, (0.0, -0.1))),
    ((0.7, (-4.0, -4.0)), (0.3, (0.1, 0.0))),
    ((0.7, (4.0, 4.0)), (0.3, (-0.1, 0.0))),
)


def sample_targets_from_paper() -> list[GaussianMixture]:
    return [
        GaussianMixture([w for w, _ in comps], [mu for _, mu in comps])
        for comps in FOUR_TARGETS
    ]


def draw_target_samples(gm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise InvalidArgumentError(f"need n >= 1 samples, got {n}")
    labels = rng.choice(len(gm.weights), size=n, p=gm.weights)
    chol = np.linalg.cholesky(gm.covs)
    z = rng.standard_normal((n, gm.dim))
    return gm.means[labels] + np.einsum("njk,nk->nj", chol[labels], z)


def kde_log_density(particles: np.ndarray, kernel: RbfKernel, x: Optional[np.ndarray] = None) -> np.ndarray:
    """Log of the normalized RBF kernel density estimate built on ``particles``."""
    x = particles if x is None else x
    d = particles.shape[1]
    log_z = 0.5 * d * np.log(np.pi / kernel.gamma)
    kmat = gram(kernel, x, particles)
    return np.log(kmat.mean(axis=1)) - log_z


def estimate_energy_value(obj: EnergyObjective, particles, kernel: RbfKernel) -> float:
    """Plug-in estimate of ``F(q)`` for trace diagnostics (not a training signal)."""
    x = np.asarray(particles, dtype=np.float64)
    return float(np.mean(potential(obj, x) + kde_log_density(x, kernel)))


def objective_dims(objectives: Sequence) -> int:
    dims = {obj.dim for obj in objectives}
    if len(dims) != 1:
        raise InvalidArgumentError(f"objectives disagree on dimension: {sorted(dims)}")
    return dims.pop()
