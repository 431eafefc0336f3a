"""Desk-scale stack for rim-structure perception, dynamics, and planning."""

__version__ = "0.1.0"

from .errors import ConvergenceError, InfeasiblePlanError, PipelineError

__all__ = ["ConvergenceError", "InfeasiblePlanError", "PipelineError", "__version__"]
