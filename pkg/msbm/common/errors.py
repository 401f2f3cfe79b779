from __future__ import annotations

from typing import Any, Optional

import numpy as np


class MsbmError(Exception):
    pass


class DomainError(MsbmError, ValueError):
    """A time or query lies outside the range an operation is defined on."""


class UnsupportedConfigurationError(MsbmError):
    """The reference process has no closed form for the requested operation."""


class DatasetError(MsbmError, ValueError):
    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None):
        if path is not None:
            message = f"{path}: {message}"
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.path = path
        self.row = row


class DivergenceError(MsbmError, FloatingPointError):
    def __init__(self, message: str, step: Optional[int] = None, t_range: Optional[tuple] = None):
        if step is not None:
            message = f"{message} at step {step}"
        if t_range is not None:
            message = f"{message} (t in [{t_range[0]:.6g}, {t_range[1]:.6g}])"
        super().__init__(message)
        self.step = step
        self.t_range = t_range


class TrainingAborted(MsbmError):
    """Training stopped early; `report` holds everything recorded so far."""

    def __init__(self, message: str, report: Any):
        super().__init__(message)
        self.report = report


def check_finite(value: Any, name: str = "result", step: Optional[int] = None, t_range: Optional[tuple] = None):
    """
    Raise DivergenceError if `value` holds a NaN or an infinity.

    Args:
        value: scalar or array to be checked
        name: name of the value, quoted in the error message
        step: optional step index reported with the error
        t_range: optional (t_min, t_max) reported with the error
    """
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite {name}", step=step, t_range=t_range)
    return value
