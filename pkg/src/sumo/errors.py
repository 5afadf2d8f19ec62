"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class ConfigError(ValueError):
    """A configuration (architecture, training, split, synthesis) is invalid."""


class FormatError(ValueError):
    """A checkpoint or dataset file is corrupt or does not match expectations."""


class SignalLengthError(ValueError):
    """Input signal is too short for the requested filtering."""


class DegenerateInputError(ValueError):
    """Statistics requested on data without variance."""


class DegenerateSegmentWarning(UserWarning):
    """A segment had (near) zero variance and was mapped to zeros."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    The partial per-epoch history is kept on the exception.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
