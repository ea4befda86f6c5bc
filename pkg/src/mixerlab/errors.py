"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
ShapeError -> 3, NumericsError -> 4.
"""


class MixerlabError(Exception):
    """Base class for all package errors."""


class ConfigError(MixerlabError):
    """Invalid configuration: bad kernel size, group count, unknown key, ..."""


class ShapeError(MixerlabError):
    """Operand shapes do not satisfy an operation's contract."""


class DataError(MixerlabError):
    """Input data is missing, malformed, or inconsistent."""


class NumericsError(MixerlabError):
    """A forward pass produced NaN/Inf, or gradients became non-finite."""


class CapacityError(MixerlabError):
    """A materialized attention score matrix would exceed the memory budget."""
