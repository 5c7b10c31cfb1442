"""Mixture of vision encoders at desk scale.

A linear router picks one specialised encoder per image; that encoder's
tokens are reduced, adapted and fed to a small decoder language model.
Everything is plain numpy with hand-written backward passes.
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DimensionError,
    InvalidGateError,
    LabelIndexError,
    MoveError,
    RoutingError,
    TrainingDivergence,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "InvalidGateError",
    "LabelIndexError",
    "MoveError",
    "RoutingError",
    "TrainingDivergence",
    "__version__",
]
