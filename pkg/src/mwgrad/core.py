"""Shared domain types, run configuration, RNG substreams and trace records."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METHODS = ("mwgrad-svgd", "mwgrad-blob", "mwgrad-nn", "moo-svgd", "mt-sgd")
NORMALIZATIONS = ("sum", "mean")
BANDWIDTHS = ("fixed", "median")
MIN_NORM_SOLVERS = ("wolfe", "pgd")


class MWGradError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(MWGradError, ValueError):
    pass


class ConvergenceError(MWGradError):
    """An iterative solver hit its iteration cap; ``best`` holds the best iterate."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class TrainingDivergedError(MWGradError):
    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"non-finite variational objective at training step {step}")
        self.step = step


class NumericDomainError(MWGradError):
    pass


class DivergenceError(MWGradError):
    """Particles left the finite (or guarded) range during a run."""

    def __init__(self, iteration: int, particle: int, message: str = ""):
        super().__init__(
            message or f"particle {particle} diverged at iteration {iteration}"
        )
        self.iteration = iteration
        self.particle = particle


def as_finite_array(x, name: str, ndim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InvalidArgumentError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """``m`` particles in ``d`` dimensions, stored as a read-only ``(m, d)`` array."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_finite_array(self.data, "particles", ndim=2)
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidArgumentError(f"particle set needs m >= 1 and d >= 1, got {arr.shape}")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return self.m


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    w: np.ndarray

    def __post_init__(self):
        arr = as_finite_array(self.w, "weights", ndim=1)
        if arr.size < 1:
            raise InvalidArgumentError("weights must have at least one entry")
        if np.any(arr < 0.0) or abs(arr.sum() - 1.0) > 1e-10:
            raise InvalidArgumentError(f"weights {arr} are not on the probability simplex")
        object.__setattr__(self, "w", _frozen(arr))

    @property
    def K(self) -> int:
        return self.w.size

    def __array__(self, dtype=None, copy=None):
        return self.w if dtype is None else self.w.astype(dtype)

    def __len__(self):
        return self.K


@dataclass(frozen=True, eq=False)
class VelocityBundle:
    """Per-objective velocities at every particle, shape ``(K, m, d)``."""

    v: np.ndarray

    def __post_init__(self):
        arr = as_finite_array(self.v, "velocity bundle", ndim=3)
        object.__setattr__(self, "v", _frozen(arr))

    @property
    def shape(self):
        return self.v.shape

    def __array__(self, dtype=None, copy=None):
        return self.v if dtype is None else self.v.astype(dtype)


@dataclass(frozen=True)
class RunConfig:
    num_particles: int = 50
    dim: int = 2
    num_objectives: int = 4
    step_size_alpha: float = 1e-4
    step_size_beta: float = 1e-3
    num_iterations: int = 2000
    kernel_gamma: float = 0.01
    kernel_bandwidth: str = "fixed"
    method: str = "mwgrad-svgd"
    seed: int = 0
    nn_hidden: tuple = (50, 50)
    nn_train_steps: int = 20
    nn_step_size: float = 1e-2
    nn_reference_samples: int = 100
    gram_normalization: str = "sum"
    svgd_normalization: str = "sum"
    min_norm_solver: str = "wolfe"
    min_norm_tol: float = 1e-10
    snapshot_every: int = 100
    divergence_bound: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "nn_hidden", tuple(int(h) for h in self.nn_hidden))
        self.validate()

    def validate(self) -> None:
        for name in ("num_particles", "dim", "num_objectives", "num_iterations",
                     "nn_train_steps", "nn_reference_samples", "snapshot_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
        for name in ("step_size_alpha", "step_size_beta", "kernel_gamma", "nn_step_size",
                     "min_norm_tol", "divergence_bound"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and np.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be a positive finite real, got {value!r}")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not self.nn_hidden or any(h < 1 for h in self.nn_hidden):
            raise InvalidArgumentError(f"nn_hidden must be positive widths, got {self.nn_hidden!r}")
        choices = {
            "method": METHODS,
            "gram_normalization": NORMALIZATIONS,
            "svgd_normalization": NORMALIZATIONS,
            "kernel_bandwidth": BANDWIDTHS,
            "min_norm_solver": MIN_NORM_SOLVERS,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise InvalidArgumentError(
                    f"{name} must be one of {allowed}, got {getattr(self, name)!r}"
                )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["nn_hidden"] = list(self.nn_hidden)
        return out


def substream(seed: int, label: str, objective: int = 0, iteration: int = 0) -> np.random.Generator:
    """Independent generator keyed by ``(label, objective, iteration)`` under one root seed.

    Consumers never share a generator, so adding a new consumer leaves the
    draws of every existing one untouched.
    """
    key = (zlib.crc32(label.encode("utf-8")), int(objective), int(iteration))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def init_particles(config: RunConfig, rng: Optional[np.random.Generator] = None) -> ParticleSet:
    if rng is None:
        rng = substream(config.seed, "particles-init")
    return ParticleSet(rng.standard_normal((config.num_particles, config.dim)))


def init_weights(K: int) -> SimplexWeights:
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K < 1:
        raise InvalidArgumentError(f"number of objectives must be a positive integer, got {K!r}")
    return SimplexWeights(np.full(K, 1.0 / K))


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    weights: np.ndarray
    stationarity: float
    per_objective_value: Sequence[Optional[float]]
    grad_norm_sq: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stationarity < 0 or self.grad_norm_sq < 0:
            raise InvalidArgumentError("stationarity and grad_norm_sq must be non-negative")
        if self.stationarity > self.grad_norm_sq + 1e-9 * max(1.0, self.grad_norm_sq):
            raise InvalidArgumentError(
                f"stationarity {self.stationarity} exceeds grad_norm_sq {self.grad_norm_sq}"
            )

    def to_dict(self) -> dict:
        return {
            "iter": int(self.iter),
            "weights": [float(x) for x in np.asarray(self.weights)],
            "stationarity": float(self.stationarity),
            "grad_norm_sq": float(self.grad_norm_sq),
            "per_objective_value": [
                None if v is None else float(v) for v in self.per_objective_value
            ],
        }
