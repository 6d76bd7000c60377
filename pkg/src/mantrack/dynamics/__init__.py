"""Orbit dynamics: force models, RIC frame, propagation and STMs."""
from mantrack.dynamics.core import (
    ForceModelConfig,
    InertialState,
    PropagationError,
    ThrustProfile,
    Trajectory,
    acceleration,
    propagate,
    propagate_ensemble,
    ric_frame,
    ric_frames,
    stm_finite_difference,
)
from mantrack.dynamics._kernels import moon_position, sun_position

__all__ = [
    "ForceModelConfig",
    "InertialState",
    "PropagationError",
    "ThrustProfile",
    "Trajectory",
    "acceleration",
    "moon_position",
    "propagate",
    "propagate_ensemble",
    "ric_frame",
    "ric_frames",
    "stm_finite_difference",
    "sun_position",
]
