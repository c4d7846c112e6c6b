"""Per-objective velocity estimators evaluated at every particle.

All estimators return an ``(m, d)`` array whose row ``i`` approximates the
gradient of the first variation at particle ``i``. Particles move *against*
these velocities: ``x <- x - alpha * v``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .core import InvalidArgumentError, NumericDomainError
from .kernels import RbfKernel, gram, pairwise_grad_y
from .nn import JS, KLEnergy, KLSample, MlpParams, _activation_slope, _backward, _batch, _forward, mlp_forward
from .objectives import EnergyObjective, mixture_grad_log_density, potential_grad


def _particles(particles, obj) -> np.ndarray:
    x = np.asarray(particles, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"particles must be an (m, d) array, got shape {x.shape}")
    if obj is not None and x.shape[1] != obj.dim:
        raise InvalidArgumentError(f"particles have dimension {x.shape[1]}, objective has {obj.dim}")
    return x


def svgd_velocity(particles, obj: EnergyObjective, kernel: RbfKernel,
                  normalize: str = "sum") -> np.ndarray:
    """Kernel-smoothed drift minus kernel repulsion.

    ``v_i = sum_j K(x_i, x_j) grad g(x_j) - sum_j grad_{x_j} K(x_i, x_j)``,
    with plain sums by default; ``normalize="mean"`` divides by ``m``.
    """
    x = _particles(particles, obj)
    kmat = gram(kernel, x)
    drift = kmat @ potential_grad(obj, x)
    repulsion = pairwise_grad_y(kernel, x, kmat).sum(axis=1)
    v = drift - repulsion
    if normalize == "mean":
        v /= x.shape[0]
    elif normalize != "sum":
        raise InvalidArgumentError(f"unknown normalization {normalize!r}")
    return v


def blob_velocity(particles, obj: EnergyObjective, kernel: RbfKernel) -> np.ndarray:
    """Potential gradient plus the blob-smoothed entropy gradient.

    ``v_i = grad g(x_i) - sum_j grad_{x_j} K(x_i, x_j) / s_j
    - sum_j grad_{x_j} K(x_i, x_j) / s_i``, where ``s_j = sum_l K(x_j, x_l)``.
    """
    x = _particles(particles, obj)
    kmat = gram(kernel, x)
    pair = pairwise_grad_y(kernel, x, kmat)
    s = kmat.sum(axis=1)
    first = np.einsum("ijk,j->ik", pair, 1.0 / s)
    second = pair.sum(axis=1) / s[:, None]
    return potential_grad(obj, x) - first - second


def nn_velocity(params: MlpParams, particles, spec) -> np.ndarray:
    """Input gradient of the recovered first variation ``h`` at every particle."""
    x = _particles(particles, None)
    if params.output_activation != spec.output_activation:
        raise InvalidArgumentError(
            f"{spec.name} needs a {spec.output_activation} output, network has {params.output_activation}"
        )
    pts, _ = _batch(params, x)
    z, acts = _forward(params, pts)
    if isinstance(spec, KLSample):
        _, grad = _backward(params, acts, np.ones_like(z))
        return grad
    if isinstance(spec, KLEnergy):
        out = mlp_forward(params, pts)
        if np.any(out <= 0):
            raise NumericDomainError("kl-energy critic output must be strictly positive")
        _, grad_out = _backward(params, acts, _activation_slope(params, z))
        return (grad_out / out[:, None]
                + mixture_grad_log_density(spec.base, pts)
                - mixture_grad_log_density(spec.target, pts))
    if isinstance(spec, JS):
        # h = 0.5 log((1 - sigmoid(z)) / 2)  =>  grad h = -0.5 sigmoid(z) grad z,
        # evaluated in logit space so a saturated sigmoid stays finite
        _, grad_z = _backward(params, acts, np.ones_like(z))
        return -0.5 * expit(z)[:, None] * grad_z
    raise InvalidArgumentError(f"unknown variational spec {spec!r}")


def recovered_first_variation(params: MlpParams, x, spec):
    """Scalar ``h(x)`` implied by the critic; used to check ``nn_velocity``."""
    out = mlp_forward(params, x)
    if isinstance(spec, KLSample):
        return out
    if isinstance(spec, KLEnergy):
        return np.log(out) + spec.log_ratio(np.atleast_2d(x)).reshape(np.shape(out))
    if isinstance(spec, JS):
        return 0.5 * np.log((1.0 - out) / 2.0)
    raise InvalidArgumentError(f"unknown variational spec {spec!r}")
