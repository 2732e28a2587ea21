"""Desk-scale solver for entropically regularized mean-field optimal control
of continuous-depth residual networks: Gibbs-form optimal control paths,
measure-space gradient descent, and the first-order / second-order /
gradient-domination diagnostics that go with them."""

__version__ = "0.1.0"

from .model import (
    ActivationField,
    ConfigError,
    ConfinementPotential,
    Dataset,
    ProblemConfig,
    TerminalLoss,
    TimeGrid,
    load_problem_config,
)
from .measures import (
    ControlPath,
    GridMeasure,
    ParticleMeasure,
    PerturbationPath,
    PriorMeasure,
)

__all__ = [
    "__version__",
    "ActivationField",
    "ConfigError",
    "ConfinementPotential",
    "ControlPath",
    "Dataset",
    "GridMeasure",
    "ParticleMeasure",
    "PerturbationPath",
    "PriorMeasure",
    "ProblemConfig",
    "TerminalLoss",
    "TimeGrid",
    "load_problem_config",
]
