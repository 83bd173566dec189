"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2, OSError -> 3,
NumericError -> 4, CompatibilityError -> 5.
"""


class VtlaError(Exception):
    """Base class for all package errors."""


class ShapeError(VtlaError):
    """Tensor or array dimensions do not satisfy an operation's contract."""


class NumericError(VtlaError):
    """A non-finite value was produced, or training diverged."""


class ValidationError(VtlaError):
    """Input data failed schema or enum validation."""


class ConfigError(VtlaError):
    """A config file or CLI flag combination is invalid."""


class CompatibilityError(VtlaError):
    """Checkpoint contents do not match the requested configuration."""
