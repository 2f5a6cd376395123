"""Exception types shared across the package.

The CLI maps ConfigError and DataFormatError to exit code 1 (validation)
and everything else to exit code 2 (runtime failure).
"""


class UatforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(UatforgeError):
    """Invalid configuration: bad tokens, impossible shapes, unknown keys."""


class ShapeError(UatforgeError):
    """Operands with incompatible shapes."""


class DataFormatError(UatforgeError):
    """Malformed dataset file (bad magic, truncation, count mismatch)."""


class CheckpointError(UatforgeError):
    """Malformed or incompatible checkpoint / perturbation file."""


class NumericsError(UatforgeError):
    """Non-finite values where finite ones are required (diverged training)."""
