"""Exception types shared across the package.

The CLI maps ConfigError / FormatError to exit code 1 and everything else
raised from a running command to exit code 2.
"""


class VrdiffError(Exception):
    """Base class for all package errors."""


class ShapeError(VrdiffError):
    """Array dimensions do not chain or do not match a contract."""


class FormatError(VrdiffError):
    """A file (dataset, checkpoint, embedding table) is malformed."""


class ConfigError(VrdiffError):
    """A run configuration is invalid before any compute starts."""


class NumericsError(VrdiffError):
    """Non-finite values or a numerical guard tripped at runtime."""
