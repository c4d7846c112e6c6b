"""Outer loop of multiple Wasserstein gradient descent and the MT-SGD / MOO-SVGD baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import aggregate
from .core import (
    DivergenceError,
    InvalidArgumentError,
    MWGradError,
    ParticleSet,
    RunConfig,
    SimplexWeights,
    TraceRecord,
    init_particles,
    init_weights,
    substream,
)
from .kernels import RbfKernel, gram, kernel_for, pairwise_grad_y
from .nn import JS, KLEnergy, KLSample, MlpParams, init_mlp, train_variational
from .objectives import EnergyObjective, SampleObjective, estimate_energy_value, objective_dims, potential_grad
from .velocity import blob_velocity, nn_velocity, svgd_velocity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerState:
    particles: ParticleSet
    weights: SimplexWeights
    iter: int = 0
    nn_params: Optional[tuple] = None

    def __post_init__(self):
        if self.iter < 0:
            raise InvalidArgumentError("iteration counter must be non-negative")


def initial_state(config: RunConfig, objectives: Sequence) -> OptimizerState:
    _check_objectives(config, objectives)
    return OptimizerState(init_particles(config), init_weights(len(objectives)))


def _check_objectives(config: RunConfig, objectives: Sequence) -> None:
    if not objectives:
        raise InvalidArgumentError("need at least one objective")
    if len(objectives) != config.num_objectives:
        raise InvalidArgumentError(
            f"config expects {config.num_objectives} objectives, got {len(objectives)}"
        )
    if objective_dims(objectives) != config.dim:
        raise InvalidArgumentError(f"objectives live in dimension {objective_dims(objectives)}, config says {config.dim}")
    if config.method != "mwgrad-nn" and not all(isinstance(o, EnergyObjective) for o in objectives):
        raise InvalidArgumentError(f"{config.method} needs energy objectives; sample targets require mwgrad-nn")


def variational_spec(obj):
    if isinstance(obj, EnergyObjective):
        return KLEnergy(obj.target)
    if isinstance(obj, SampleObjective):
        return KLSample() if obj.divergence == "kl" else JS()
    raise InvalidArgumentError(f"unsupported objective {obj!r}")


def _kernel(config: RunConfig, x: np.ndarray) -> RbfKernel:
    return kernel_for(x, config.kernel_gamma, config.kernel_bandwidth)


def kernel_velocities(x: np.ndarray, objectives: Sequence, config: RunConfig, estimator: str) -> np.ndarray:
    kernel = _kernel(config, x)
    if estimator == "svgd":
        return np.stack([svgd_velocity(x, obj, kernel, config.svgd_normalization) for obj in objectives])
    if estimator == "blob":
        return np.stack([blob_velocity(x, obj, kernel) for obj in objectives])
    raise InvalidArgumentError(f"unknown estimator {estimator!r}")


def nn_velocities(state: OptimizerState, objectives: Sequence, config: RunConfig):
    """Warm-started critic training per objective, then the critic velocities."""
    x = state.particles.data
    params = list(state.nn_params) if state.nn_params is not None else [None] * len(objectives)
    bundle = []
    for k, obj in enumerate(objectives):
        spec = variational_spec(obj)
        if params[k] is None:
            params[k] = init_mlp(config.dim, config.nn_hidden, spec.output_activation,
                                 substream(config.seed, "nn-init", k))
        if isinstance(spec, KLEnergy):
            rng = substream(config.seed, "nn-reference", k, state.iter)
            ref = rng.standard_normal((config.nn_reference_samples, config.dim))
        else:
            ref = obj.samples
        params[k] = train_variational(spec, x, ref, config.nn_train_steps, config.nn_step_size,
                                      init=params[k])
        bundle.append(nn_velocity(params[k], x, spec))
    return np.stack(bundle), tuple(params)


def estimate_bundle(state: OptimizerState, objectives: Sequence, config: RunConfig):
    """Velocity bundle ``(K, m, d)`` for the configured method, plus updated critics."""
    x = state.particles.data
    if config.method == "mwgrad-nn":
        return nn_velocities(state, objectives, config)
    estimator = "blob" if config.method == "mwgrad-blob" else "svgd"
    return kernel_velocities(x, objectives, config, estimator), state.nn_params


def _objective_values(x: np.ndarray, objectives: Sequence, config: RunConfig) -> list:
    kernel = _kernel(config, x)
    return [estimate_energy_value(obj, x, kernel) if isinstance(obj, EnergyObjective) else None
            for obj in objectives]


def _move(state: OptimizerState, velocity: np.ndarray, config: RunConfig) -> ParticleSet:
    new = state.particles.data - config.step_size_alpha * velocity
    bad = ~np.isfinite(new).all(axis=1) | (np.abs(new) > config.divergence_bound).any(axis=1)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise DivergenceError(state.iter, i)
    return ParticleSet(new)


def _record(state: OptimizerState, g: np.ndarray, w: np.ndarray, objectives, config,
            stationarity: Optional[float] = None) -> TraceRecord:
    current = aggregate.quadratic(w, g)
    if stationarity is None:
        stationarity = aggregate.pareto_stationarity(g, config.min_norm_tol, config.min_norm_solver)
    # the simplex minimum can never exceed the value at the current weights
    stationarity = min(stationarity, current)
    return TraceRecord(
        iter=state.iter,
        weights=np.asarray(w),
        stationarity=max(stationarity, 0.0),
        per_objective_value=_objective_values(state.particles.data, objectives, config),
        grad_norm_sq=max(current, 0.0),
    )


def mwgrad_step(state: OptimizerState, objectives: Sequence, config: RunConfig):
    """One iteration: estimate, aggregate with ``w^(t)``, move particles, then update ``w``.

    The weight update uses the Gram matrix of the pre-move velocities.
    """
    bundle, nn_params = estimate_bundle(state, objectives, config)
    w = state.weights.w
    particles = _move(state, aggregate.aggregate_velocity(bundle, w), config)
    g = aggregate.gram_matrix(bundle, config.gram_normalization)
    weights = aggregate.update_weights(w, g, config.step_size_beta)
    record = _record(state, g, w, objectives, config)
    return OptimizerState(particles, weights, state.iter + 1, nn_params), record


def mt_sgd_step(state: OptimizerState, objectives: Sequence, config: RunConfig):
    """SVGD velocities aggregated with the exact min-norm weights of the current Gram matrix."""
    x = state.particles.data
    bundle = kernel_velocities(x, objectives, config, "svgd")
    g = aggregate.gram_matrix(bundle, config.gram_normalization)
    weights = aggregate.min_norm_exact(g, config.min_norm_tol, config.min_norm_solver)
    particles = _move(state, aggregate.aggregate_velocity(bundle, weights.w), config)
    record = _record(state, g, weights.w, objectives, config,
                     stationarity=aggregate.quadratic(weights.w, g))
    return OptimizerState(particles, weights, state.iter + 1, state.nn_params), record


def per_particle_min_norm(bundle: np.ndarray, tol: float = 1e-10, solver: str = "wolfe") -> np.ndarray:
    """Min-norm weights solved independently at every particle, shape ``(m, K)``."""
    K, m, _ = bundle.shape
    grams = np.einsum("kid,lid->ikl", bundle, bundle)
    out = np.empty((m, K))
    for i in range(m):
        try:
            out[i] = aggregate.min_norm_exact(grams[i], tol, solver).w
        except MWGradError as exc:
            raise type(exc)(f"particle {i}: {exc}") from exc
    return out


def moo_svgd_step(state: OptimizerState, objectives: Sequence, config: RunConfig):
    """Every particle moves along its own min-norm combination of the SVGD velocities."""
    x = state.particles.data
    bundle = kernel_velocities(x, objectives, config, "svgd")
    w_particles = per_particle_min_norm(bundle, config.min_norm_tol, config.min_norm_solver)
    velocity = np.einsum("ik,kid->id", w_particles, bundle)
    particles = _move(state, velocity, config)
    w_mean = w_particles.mean(axis=0)
    w_mean = w_mean / w_mean.sum()
    g = aggregate.gram_matrix(bundle, config.gram_normalization)
    record = _record(state, g, w_mean, objectives, config)
    return OptimizerState(particles, SimplexWeights(w_mean), state.iter + 1, state.nn_params), record


STEPS: dict = {
    "mwgrad-svgd": mwgrad_step,
    "mwgrad-blob": mwgrad_step,
    "mwgrad-nn": mwgrad_step,
    "mt-sgd": mt_sgd_step,
    "moo-svgd": moo_svgd_step,
}


@dataclass
class RunResult:
    trace: list
    snapshots: dict
    final: OptimizerState
    config: RunConfig = field(repr=False, default=None)


def run(config: RunConfig, objectives: Sequence,
        on_step: Optional[Callable[[OptimizerState, TraceRecord], None]] = None) -> RunResult:
    """Run ``config.num_iterations`` steps of ``config.method`` from a seeded start.

    Snapshots are kept at iteration 0, every ``snapshot_every`` iterations and
    at the final iteration.
    """
    step = STEPS[config.method]
    state = initial_state(config, objectives)
    trace, snapshots = [], {0: state.particles.data}
    for t in range(config.num_iterations):
        try:
            state, record = step(state, objectives, config)
        except MWGradError as exc:
            log.error("run aborted at iteration %d: %s", t, exc)
            raise
        trace.append(record)
        if on_step is not None:
            on_step(state, record)
        if state.iter % config.snapshot_every == 0 or state.iter == config.num_iterations:
            snapshots[state.iter] = state.particles.data
    return RunResult(trace, snapshots, state, config)


def gradient_error(estimate, reference) -> float:
    """``(1/m) sum_i ||estimate_i - reference_i||^2``."""
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def reference_velocity(particles, obj: EnergyObjective, kernel: RbfKernel) -> np.ndarray:
    """``grad g + grad log q_hat`` with ``q_hat`` the RBF kernel density of the particles."""
    x = np.asarray(particles, dtype=np.float64)
    kmat = gram(kernel, x)
    # grad_x K(x, x_j) = -grad_y K(x, y)|_{y=x_j}
    grad_kde = -pairwise_grad_y(kernel, x, kmat).sum(axis=1)
    return potential_grad(obj, x) + grad_kde / kmat.sum(axis=1)[:, None]


def gradient_error_probe(particles, obj: EnergyObjective, kernel: RbfKernel,
                         estimate: Optional[np.ndarray] = None) -> float:
    """Squared velocity error against the kernel-density reference field (d <= 2 only).

    ``estimate`` defaults to the SVGD velocity at the particles.
    """
    x = np.asarray(particles, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] > 2:
        raise InvalidArgumentError(f"gradient error probe supports d <= 2, got shape {x.shape}")
    if estimate is None:
        estimate = svgd_velocity(x, obj, kernel)
    return gradient_error(estimate, reference_velocity(x, obj, kernel))
