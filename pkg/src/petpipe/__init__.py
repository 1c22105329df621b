"""PET/CT lesion segmentation toolkit: tracer classification from MIPs,
weighted Dice/CE loss, challenge metrics, postprocessing and phantoms."""

from .errors import (
    CorruptionError,
    FormatError,
    GenerationError,
    ParameterError,
    PetPipeError,
    RangeError,
    TrainingError,
)
from .volume import BinaryMask, LabelVolume, NormalizationStats, VoxelGrid, voxel_volume_ml

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "CorruptionError",
    "FormatError",
    "GenerationError",
    "LabelVolume",
    "NormalizationStats",
    "ParameterError",
    "PetPipeError",
    "RangeError",
    "TrainingError",
    "VoxelGrid",
    "voxel_volume_ml",
]
