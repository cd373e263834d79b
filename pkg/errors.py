"""
Exception hierarchy shared by every solver module.
"""
from typing import Optional


class SolverError(Exception):
    """Base class for all errors raised by the toolkit."""


class NotPositiveDefinite(SolverError):
    pass


class NonConvergence(SolverError):
    pass


class DimensionMismatch(SolverError):
    pass


class ParseError(SolverError):
    """
    Raised when an instance file cannot be parsed.
    Carries the offending field name and, when known, the line number.
    """
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class InstanceIoError(SolverError):
    pass


class UnknownSymbol(SolverError):
    pass


class DegenerateInput(SolverError):
    pass


class ConvexityViolation(SolverError):
    pass


class TooLarge(SolverError):
    pass


class IndivisibleSections(SolverError):
    pass


class InfeasibleProblem(SolverError):
    pass
