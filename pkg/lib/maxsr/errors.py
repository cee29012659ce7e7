"""Exceptions raised by maxsr. Only the CLI turns them into exit codes."""


class MaxSRError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MaxSRError, ValueError):
    """Tensor extents do not conform to what an operation requires."""


class NonFiniteError(MaxSRError, ArithmeticError):
    """A forward operation produced NaN or Inf."""


class GraphError(MaxSRError):
    """Backward was asked for something the recorded graph cannot give."""


class ConfigError(MaxSRError, ValueError):
    """A model, training or CLI configuration violates its invariants."""


class CheckpointError(MaxSRError):
    """A checkpoint file is malformed or does not match the model."""


class TrainingDivergedError(MaxSRError):
    """The training loss stopped being finite."""


class ImageFormatError(MaxSRError):
    """An image file is not an 8-bit RGB PNG."""
