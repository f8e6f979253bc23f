"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class FPMeasureError(Exception):
    """Base class for every error raised by the package."""


class ExpressionSyntaxError(FPMeasureError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EvaluationDomainError(FPMeasureError):
    def __init__(self, message: str, point=None):
        where = "" if point is None else f" at point {tuple(float(p) for p in point)}"
        super().__init__(f"{message}{where}")
        self.point = point


class PreconditionError(FPMeasureError):
    pass


class SolverError(FPMeasureError):
    pass


class NonUniquenessError(SolverError):
    pass


class PositivityError(SolverError):
    def __init__(self, max_violation: float):
        super().__init__(f"negative density entries after solve (max violation {max_violation:.3e})")
        self.max_violation = max_violation


class IrregularLevelError(FPMeasureError):
    pass


class ClassificationMismatch(FPMeasureError):
    pass


class ConfigError(FPMeasureError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer
