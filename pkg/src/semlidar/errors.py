"""Exception hierarchy shared by every pipeline stage.

The CLI maps each family onto an exit code, so new exceptions should
subclass one of the three roots below.
"""

from __future__ import annotations


class SemlidarError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SemlidarError, ValueError):
    """Invalid configuration, schema violation or inconsistent shapes."""

    exit_code = 1


class ProtocolError(ConfigError):
    """Evaluation protocol cannot be honoured (bad split, class overlap)."""


class LabelError(ConfigError):
    """Label outside the set the model or SKB was built for."""


class FormatError(SemlidarError, OSError):
    """Malformed or truncated binary artifact."""

    exit_code = 2

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericError(SemlidarError, ArithmeticError):
    """Numerical failure: divergence, degenerate input, empty signal."""

    exit_code = 3


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)


class EmptyTargetError(NumericError):
    """Scene has no target pixel, so no echo can be formed."""


class RangeError(NumericError):
    """Target depth falls outside the recording window."""


class EmptySignalError(NumericError):
    """Histogram with zero total counts cannot be normalised."""


class DegenerateFeatureError(NumericError):
    """Zero-norm feature vector where a direction is required."""


class InsufficientSupportError(NumericError):
    """Too few samples to estimate a class mean and variance."""


class StateError(SemlidarError, RuntimeError):
    """Operation invalid in the current state (e.g. empty SKB)."""

    exit_code = 3
