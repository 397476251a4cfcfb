"""Exception hierarchy shared by every module of the package."""


class BilevelError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(BilevelError, ValueError):
    """An argument has the wrong shape, range or type."""


class ContractViolationError(BilevelError):
    """A caller broke a documented pre-condition (wrong stream, bad momentum start, ...)."""


class UnsupportedCapabilityError(BilevelError, NotImplementedError):
    """The problem does not provide an optional capability (second order, ground truth)."""


class NumericalError(BilevelError, FloatingPointError):
    """A computation produced NaN or Inf."""


class DivergenceError(NumericalError):
    """An optimizer iterate became non-finite.

    The records produced before the failure are kept on the exception so
    callers can still write partial traces.
    """

    def __init__(self, message, iteration, records=None):
        super().__init__(message)
        self.iteration = iteration
        self.records = list(records) if records is not None else []


class ConfigError(BilevelError, ValueError):
    """A run configuration could not be parsed or validated."""

    def __init__(self, message, field=None, line=None, column=None):
        location = ""
        if line is not None:
            location = f" (line {line}, column {column})"
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message + location)
        self.field = field
        self.line = line
        self.column = column
