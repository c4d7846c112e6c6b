"""RBF kernel ``K(x, y) = exp(-gamma * ||x - y||^2)`` and its gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgumentError, as_finite_array


@dataclass(frozen=True)
class RbfKernel:
    gamma: float = 0.01

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidArgumentError(f"kernel gamma must be positive and finite, got {self.gamma!r}")


def _pair(x, y):
    x = as_finite_array(x, "x", ndim=1)
    y = as_finite_array(y, "y", ndim=1)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def rbf_eval(k: RbfKernel, x, y) -> float:
    x, y = _pair(x, y)
    diff = x - y
    return float(np.exp(-k.gamma * np.dot(diff, diff)))


def rbf_grad_y(k: RbfKernel, x, y) -> np.ndarray:
    """Gradient of ``K(x, y)`` with respect to its second argument."""
    x, y = _pair(x, y)
    diff = x - y
    return 2.0 * k.gamma * diff * np.exp(-k.gamma * np.dot(diff, diff))


def sq_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Exact pairwise squared distances, ``out[i, j] = ||x_i - y_j||^2``."""
    y = x if y is None else y
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def gram(k: RbfKernel, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    return np.exp(-k.gamma * sq_distances(x, y))


def pairwise_grad_y(k: RbfKernel, x: np.ndarray, kmat: np.ndarray | None = None) -> np.ndarray:
    """``out[i, j] = grad_y K(x_i, y)`` at ``y = x_j``, shape ``(m, m, d)``."""
    if kmat is None:
        kmat = gram(k, x)
    diff = x[:, None, :] - x[None, :, :]
    return 2.0 * k.gamma * diff * kmat[:, :, None]


def median_gamma(x: np.ndarray, fallback: float) -> float:
    """Median-heuristic bandwidth: ``gamma = log(m) / median(||x_i - x_j||^2)``.

    Falls back to ``fallback`` when the heuristic is undefined (m < 2 or all
    particles coincide).
    """
    m = x.shape[0]
    if m < 2:
        return fallback
    d2 = sq_distances(x)[np.triu_indices(m, k=1)]
    med = float(np.median(d2))
    if med <= 0 or np.log(m) <= 0:
        return fallback
    return float(np.log(m) / med)


def kernel_for(particles: np.ndarray, gamma: float, bandwidth: str = "fixed") -> RbfKernel:
    if bandwidth == "median":
        return RbfKernel(median_gamma(particles, gamma))
    return RbfKernel(gamma)
