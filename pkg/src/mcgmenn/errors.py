"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2, DataError and
ShapeError -> 3, NumericalError -> 4.
"""


class McgmennError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(McgmennError, ValueError):
    """Array dimensions do not match the documented contract."""


class ConfigurationError(McgmennError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(McgmennError, ValueError):
    """Malformed input data: parse failures, bad targets, ragged rows."""


class NumericalError(McgmennError, RuntimeError):
    """Non-finite values or a numerical procedure that cannot continue."""


class ContractError(McgmennError, RuntimeError):
    """A documented precondition was violated by the caller."""
