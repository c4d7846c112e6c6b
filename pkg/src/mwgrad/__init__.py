"""Multiple Wasserstein gradient descent for multi-objective distributional optimization."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ParticleSet,
    RunConfig,
    SimplexWeights,
    TraceRecord,
    VelocityBundle,
    init_particles,
    init_weights,
)
from .optimizer import OptimizerState, run  # noqa: E402

__all__ = [
    "OptimizerState",
    "ParticleSet",
    "RunConfig",
    "SimplexWeights",
    "TraceRecord",
    "VelocityBundle",
    "init_particles",
    "init_weights",
    "run",
]
