"""Adaptive space-time finite elements for parabolic optimal control and MPC."""
from .grid import SpaceMesh, SpaceTimeGrid, TimeGrid
from .model import InitialState, Linear, ProblemSpec, Qoi, Quasilinear, Reference
from .fem import ControlKind

__all__ = [
    "SpaceMesh",
    "SpaceTimeGrid",
    "TimeGrid",
    "InitialState",
    "Linear",
    "ProblemSpec",
    "Qoi",
    "Quasilinear",
    "Reference",
    "ControlKind",
]
__version__ = "0.1.0"
