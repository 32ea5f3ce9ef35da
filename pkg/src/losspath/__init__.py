"""Loss path kernels and trajectory-based generalization bounds."""

from .errors import (
    LpkError,
    ConfigError,
    ShapeError,
    NumericError,
    DivergenceError,
    FormatError,
    RankError,
    ResourceError,
)

__version__ = "0.1.0"
