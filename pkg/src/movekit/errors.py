"""Exception hierarchy shared by every movekit module."""


class MoveError(Exception):
    """Base class for all movekit failures."""


class DimensionError(MoveError, ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(MoveError, ValueError):
    """A spec, config value or precondition on geometry is violated."""


class InvalidGateError(MoveError, ValueError):
    """Every logit handed to softmax was masked."""


class RoutingError(MoveError, ValueError):
    """Router received logits it cannot select from."""


class TrainingDivergence(MoveError, FloatingPointError):
    """A loss or gradient went non-finite during training."""

    def __init__(self, message: str, *, param: str | None = None, step: int | None = None):
        super().__init__(message)
        self.param = param
        self.step = step


class DataError(MoveError, OSError):
    """Dataset or sample-record I/O and format failures."""


class CheckpointError(MoveError, OSError):
    """Checkpoint file is missing, truncated or corrupt."""

    def __init__(self, message: str, *, section: str | None = None):
        super().__init__(message)
        self.section = section


class LabelIndexError(MoveError, IndexError):
    """A class label or token id falls outside its valid range."""
