"""Exception types raised across the factor SV toolkit."""

from typing import Optional


class FsvError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(FsvError, ValueError):
    """A caller broke a precondition (shapes, counts, date alignment)."""


class DomainError(FsvError, ValueError):
    """A parameter lies outside the support of a distribution or formula."""


class NumericalError(FsvError, ArithmeticError):
    """A factorization or solve failed."""

    def __init__(self, message: str, condition: Optional[float] = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class ParseError(FsvError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)
        self.line = line
        self.column = column


class ConfigError(FsvError, ValueError):
    """Invalid or inconsistent configuration value."""


class SweepError(FsvError, RuntimeError):
    """A Gibbs sub-step failed; carries where it happened."""

    def __init__(self, message: str, step: str, block: Optional[int] = None, iteration: Optional[int] = None):
        context = f"step {step}"
        if block is not None:
            context += f", block {block}"
        if iteration is not None:
            context += f", iteration {iteration}"
        super().__init__(f"{message} [{context}]")
        self.step = step
        self.block = block
        self.iteration = iteration
