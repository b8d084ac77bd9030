class GeoscoreError(Exception):
    """Base class for all package errors."""


class DomainError(GeoscoreError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(GeoscoreError, ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(GeoscoreError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class CapabilityError(GeoscoreError, TypeError):
    """The requested operation is not available for this object."""


class NumericalError(GeoscoreError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""
