"""Inverse mechanism learning: recover payoff rules from the trajectories of learning agents."""

__version__ = "0.1.0"

from .dynamics import LearnerParams, Trajectory, simulate
from .errors import ConfigError, DimlError, DomainError, InfeasibleError, ShapeError
from .mechanisms import GameShape, Mechanism, load_mechanism, save_mechanism

__all__ = [
    "ConfigError",
    "DimlError",
    "DomainError",
    "GameShape",
    "InfeasibleError",
    "LearnerParams",
    "Mechanism",
    "ShapeError",
    "Trajectory",
    "load_mechanism",
    "save_mechanism",
    "simulate",
]
