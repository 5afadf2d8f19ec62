"""SUMO: a slim 1D U-Net for sleep spindle detection, in plain numpy."""
from .errors import (ConfigError, DegenerateInputError, DegenerateSegmentWarning, FormatError,
                     ShapeError, SignalLengthError, TrainingDivergedError)
from .model import ArchConfig, ModelParams
from .postproc import SpindleEvent

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ModelParams", "SpindleEvent", "ConfigError", "DegenerateInputError",
    "DegenerateSegmentWarning", "FormatError", "ShapeError", "SignalLengthError",
    "TrainingDivergedError",
]
