"""Exception hierarchy shared by all modules.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class AlanError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(AlanError):
    """Invalid configuration value or malformed config/CLI input."""


class DataError(AlanError):
    """Bad or inconsistent data: file format violations, geometry
    mismatches, missing referenced files."""


class NumericError(AlanError):
    """Non-finite values where finite ones are required (loss, gradients)."""
