"""Exception hierarchy shared across the package."""


class NonprobError(Exception):
    """Base class for all package errors."""


class ParseError(NonprobError, ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ValidationError(NonprobError, ValueError):
    """A sample violates the observed-data invariants."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConvergenceError(NonprobError, RuntimeError):
    """An iterative fit did not converge.

    ``last`` carries the final iterate so callers can inspect it.
    """

    def __init__(self, message: str, last=None):
        super().__init__(message)
        self.last = last


class SeparationError(ConvergenceError):
    """Coefficients diverge because the two samples are (quasi-)separable."""


class SingularMatrixError(NonprobError, ArithmeticError):
    pass


class InsufficientDataError(NonprobError, ValueError):
    pass


class DegenerateModelError(NonprobError, ValueError):
    pass
