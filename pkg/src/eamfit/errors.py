"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and NumericFailure to exit code 3;
everything else is a plain crash (exit 1).
"""


class EamfitError(Exception):
    """Base class for all package errors."""


class DomainError(EamfitError, ValueError):
    """An input violates a documented mathematical precondition."""


class ConfigError(EamfitError, ValueError):
    """A configuration file, design declaration, or data file is invalid."""


class NumericFailure(EamfitError, RuntimeError):
    """A computation produced a non-finite or otherwise unusable result."""
