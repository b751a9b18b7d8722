"""
Errors - every failure carries the exit code the CLI reports
"""
from typing import Any, Optional


class BnPruneError(Exception):
    """Base error"""

    exit_code: int = 1


class ConfigError(BnPruneError):
    """Invalid run configuration or usage"""


class ShapeError(BnPruneError, ValueError):
    """Operand shapes do not fit together"""


class GraphError(BnPruneError):
    """Malformed network graph or invalid graph query"""


class PruneError(BnPruneError):
    """Channel mask cannot be applied"""


class NumericalError(BnPruneError):
    """Numerical abort"""

    exit_code = 2


class NonFiniteGradientError(NumericalError):
    """Gradient with NaN/inf entries; the update is rejected"""


class DivergenceError(NumericalError):
    """Training loss became non-finite"""

    def __init__(self, message: str, last_good: Any = None, history: Optional[Any] = None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class DatasetFormatError(BnPruneError):
    """Dataset file is malformed"""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(BnPruneError):
    """Checkpoint cannot be read or written"""

    exit_code = 3
