"""
Exception hierarchy for the subspace toolkit

Every error carries the process exit code the CLI reports for it.
"""
from typing import Any, Dict, Optional


class SubspaceToolkitError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ConfigError(SubspaceToolkitError):
    """Invalid configuration, unknown preset or failed validation"""
    exit_code = 2


class DimensionMismatchError(SubspaceToolkitError, ValueError):
    """Array shapes do not satisfy an operation's contract"""
    exit_code = 2


class NumericalError(SubspaceToolkitError):
    """A decomposition or optimisation step failed numerically"""
    exit_code = 3


class NonSymmetricError(NumericalError, ValueError):
    pass


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, pivot: int, message: Optional[str] = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (non-positive pivot at index {pivot})")


class SingularMatrixError(NumericalError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"triangular matrix is singular (zero diagonal entry at index {index})")


class RankDeficientError(NumericalError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"rows are linearly dependent (deficient row index {row})")


class UndefinedEnergyError(NumericalError):
    """Relative projection energy has a zero denominator"""


class NonFiniteGradientError(NumericalError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message}: {self.diagnostics}")


class DataIngestError(SubspaceToolkitError):
    """A stream CSV could not be ingested"""
    exit_code = 4

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ReportIOError(SubspaceToolkitError):
    exit_code = 4

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"cannot write report to {path}: {reason}")


class PipelineStageError(SubspaceToolkitError):
    """Wraps a failure inside one stage of one continual-learning session"""

    def __init__(self, task: int, stage: str, cause: BaseException):
        self.task = task
        self.stage = stage
        self.cause = cause
        super().__init__(f"task {task}, stage '{stage}' failed: {cause}")

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        if isinstance(self.cause, SubspaceToolkitError):
            return self.cause.exit_code
        if isinstance(self.cause, OSError):
            return 4
        return 3
