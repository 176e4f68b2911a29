"""Exception taxonomy shared by the whole kit.

The CLI maps these onto exit codes: ConfigError (and subclasses) exit 1,
DataError (and subclasses) exit 2, NumericError exit 3.
"""


class TokmoeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TokmoeError):
    """Invalid configuration, parameters, or API usage."""


class ShapeError(ConfigError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(TokmoeError):
    """Problem with a dataset, file, or record."""


class SchemaError(DataError):
    """Record or file does not conform to its measure schema."""


class NumericError(TokmoeError):
    """A computation produced NaN or Inf, or was fed non-finite input."""
