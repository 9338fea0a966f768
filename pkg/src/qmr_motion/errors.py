# src/qmr_motion/errors.py
"""
Exception hierarchy shared by every stage of the pipeline.

Each error carries the process exit code the command-line tool reports for it,
so library callers and the CLI agree on how a failure is classified.
"""

from typing import Optional


class QmrError(Exception):
    """Base class for all errors raised by qmr_motion."""

    exit_code = 1


class ConfigError(QmrError, ValueError):
    """Invalid configuration or parameter combination."""

    exit_code = 2


class DataError(QmrError, ValueError):
    """Input data that cannot be processed."""

    exit_code = 3


class FormatError(DataError):
    """File does not follow the QMRSTACK container layout."""


class CorruptionError(DataError):
    """Header and payload disagree (truncated or padded file)."""


class ValidationError(DataError):
    """Values violate a data invariant (NaN, wrong shape, non-positive times)."""


class DegenerateInputError(DataError):
    """Input is valid but carries no usable information (e.g. a constant image)."""


class ConvergenceError(QmrError, RuntimeError):
    """An iterative solver produced a non-finite objective and had to stop."""

    exit_code = 4


def _code_of(error: BaseException) -> int:
    if isinstance(error, (FileNotFoundError, IsADirectoryError)):
        return DataError.exit_code
    return getattr(error, "exit_code", 1)


class StageError(QmrError):
    """Wraps a failure inside one experiment stage, keeping the stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = _code_of(cause)
        super().__init__(f"[{stage}] {cause}")


def exit_code_for(error: Optional[BaseException]) -> int:
    """Returns the exit code for an exception (0 when there is none)."""
    if error is None:
        return 0
    return _code_of(error)
