"""Desk-scale MetaFormer token-mixer lab.

Subpackages: tensor (autodiff engine), mixers (the six token mixers),
metaformer (blocks, stages, heads), complexity (cost formulas and MAC
counting), trainer (optimization recipe), evalrank (metrics and
significance ranking), cli (command-line surface).
"""

from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    MixerlabError,
    NumericsError,
    ShapeError,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "MixerlabError",
    "ConfigError",
    "ShapeError",
    "DataError",
    "NumericsError",
    "CapacityError",
    "__version__",
]
