"""Exception classes.

Each top-level class maps to one CLI exit code (see ``femodels.cli``).
"""


class FEError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(FEError, ValueError):
    exit_code = 2


class SchemaError(FEError, ValueError):
    exit_code = 3


class DataError(FEError, ValueError):
    exit_code = 4


class ParseError(DataError):
    """A CSV cell could not be parsed as a number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericError(FEError, ArithmeticError):
    """Non-finite values where finite ones are required, or divergence."""

    exit_code = 5


class ShapeError(FEError, ValueError):
    exit_code = 4


class StateError(FEError, RuntimeError):
    exit_code = 4
