"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numerical failures exit 3, and I/O or file-format problems exit 4.
"""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or physically meaningless."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class CheckpointError(IOError):
    """A checkpoint file is corrupted or has an unsupported version."""
