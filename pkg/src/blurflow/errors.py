"""Exception types raised across the package."""


class BlurFlowError(Exception):
    """Base class for all package errors."""


class DomainError(BlurFlowError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class DegenerateInputError(DomainError):
    """Input carries no usable signal (e.g. all-zero feature images)."""


class SingularityError(BlurFlowError, ArithmeticError):
    """A linear system has no unique solution."""


class NumericalBreakdownError(BlurFlowError, ArithmeticError):
    """An iterative solver produced non-finite values."""


class FormatError(BlurFlowError, ValueError):
    """A file does not follow its declared binary or text layout."""

    def __init__(self, message, offset=None, path=None):
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
