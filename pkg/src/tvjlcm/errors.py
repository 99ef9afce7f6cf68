"""Exception hierarchy shared by every module."""


class JlcmError(Exception):
    """Base class for all package errors."""


class DesignError(JlcmError, ValueError):
    """Covariate design and coefficient dimensions disagree."""


class DomainError(JlcmError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StateError(JlcmError, RuntimeError):
    """Parameter state is incomplete or numerically unusable."""


class NumericError(JlcmError, ArithmeticError):
    """A linear-algebra step failed (singular or non-PD matrix)."""


class DataError(JlcmError, ValueError):
    """Dataset invariant violated."""


class SchemaError(DataError):
    """A column bound in the schema map is missing from the input."""


class ParseError(DataError):
    """A value could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedWeightError(JlcmError, ZeroDivisionError):
    """IPCW weight requested where the censoring survivor is zero."""


class UndefinedAUCError(JlcmError, ZeroDivisionError):
    """No weighted case/control pair exists at the requested window."""


class ChainFormatError(JlcmError, ValueError):
    """Chain file is truncated, malformed or from another format version."""
