"""Stackelberg-Nash null control of heat equations with dynamic boundary conditions."""

from .errors import (
    ConfigError,
    NoConvergence,
    StackelbergError,
)
from .geometry import Mesh, PairField, build_disk_mesh, build_interval_mesh, inner_product
from .pdecore import ThetaIntegrator, TimeGrid, Trajectory
from .problem import ControlProblem, Follower

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NoConvergence",
    "StackelbergError",
    "Mesh",
    "PairField",
    "build_disk_mesh",
    "build_interval_mesh",
    "inner_product",
    "ThetaIntegrator",
    "TimeGrid",
    "Trajectory",
    "ControlProblem",
    "Follower",
]
