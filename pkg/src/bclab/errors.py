"""Exception and warning types shared across the lab."""

from __future__ import annotations

from pathlib import Path
from typing import Any


class BclabError(RuntimeError):
    """Base error; ``exit_code`` is what the CLI returns when it surfaces."""

    exit_code = 1


class ValidationError(BclabError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class CFLViolationError(ValidationError):
    pass


class ProbeSupportError(ValidationError):
    def __init__(self, message: str, *, overflow: float = 0.0) -> None:
        super().__init__(message)
        self.overflow = overflow


class CoverageError(ValidationError):
    pass


class AssemblyError(ValidationError):
    def __init__(self, message: str, *, deficit: int = 0) -> None:
        super().__init__(message)
        self.deficit = deficit


class BudgetExceededError(ValidationError):
    pass


class NumericalError(BclabError):
    exit_code = 3


class InstabilityError(NumericalError):
    def __init__(self, message: str, *, step: int) -> None:
        super().__init__(message)
        self.step = step


class DegeneracyError(NumericalError):
    def __init__(self, message: str, *, node: tuple[int, ...] | None = None) -> None:
        super().__init__(message)
        self.node = node


class CausticError(NumericalError):
    def __init__(self, message: str, *, achieved_depth: float) -> None:
        super().__init__(message)
        self.achieved_depth = achieved_depth


class CoercivityError(NumericalError):
    def __init__(self, message: str, *, eigen_floor: float) -> None:
        super().__init__(message)
        self.eigen_floor = eigen_floor


class RankDeficiencyError(NumericalError):
    def __init__(self, message: str, *, null_direction: Any) -> None:
        super().__init__(message)
        self.null_direction = null_direction


class ExtractionError(NumericalError):
    def __init__(self, message: str, *, sequence: Any = None) -> None:
        super().__init__(message)
        self.sequence = sequence


class MissingArtifactError(BclabError):
    exit_code = 4

    def __init__(self, message: str, *, missing: list[str] | None = None) -> None:
        super().__init__(message)
        self.missing = list(missing or [])


class StageError(BclabError):
    """Wraps a failure inside a pipeline stage, keeping the cause's exit code."""

    def __init__(self, stage: str, artifact: Path, cause: BaseException) -> None:
        super().__init__(f"stage '{stage}' failed ({artifact}): {cause}")
        self.stage = stage
        self.artifact = artifact
        self.exit_code = getattr(cause, "exit_code", 1)


class ConvergenceWarning(UserWarning):
    def __init__(self, message: str, *, sequence: Any = None) -> None:
        super().__init__(message)
        self.sequence = sequence


class IllPosednessWarning(UserWarning):
    def __init__(self, message: str, *, residual: float = 0.0) -> None:
        super().__init__(message)
        self.residual = residual


class TruncationWarning(UserWarning):
    pass
