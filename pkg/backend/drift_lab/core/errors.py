"""
Error types shared by every drift_lab module.
The CLI maps ValidationError (and ConfigError) to exit code 2.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all drift_lab errors"""


class ValidationError(LabError, ValueError):
    """Input or precondition violated"""


class ShapeError(ValidationError):
    """Grid or array shapes do not match"""


class ConfigError(ValidationError):
    """Experiment configuration could not be parsed or validated"""


class SolverError(LabError, RuntimeError):
    """Krylov solve did not reach its tolerance"""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(f"{message} (iterations={iterations}, relative residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class NumericalBlowupError(SolverError):
    """Non-finite values detected during time stepping or path simulation"""

    def __init__(self, message: str, step: int, path: Optional[int] = None):
        where = f"step {step}" if path is None else f"path {path}, step {step}"
        LabError.__init__(self, f"{message} at {where}")
        self.iterations = step
        self.residual = float("nan")
        self.step = step
        self.path = path


class InvariantError(LabError, RuntimeError):
    """A computed object broke one of its own contracts (mass, positivity)"""
