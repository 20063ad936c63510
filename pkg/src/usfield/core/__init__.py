from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import load_dataset, write_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    LoadError,
    TrainingDivergedError,
    UsfieldError,
    ValidationError,
)
from .rays import frame_rays, ray_for_pixel
from .types import (
    PARAM_NAMES,
    PATCH_SIZE,
    ParameterSample,
    Pose,
    ProbeConfig,
    ProbeFrame,
    ScanRay,
    SweepDataset,
    VoxelPatch,
    every_eighth_split,
    rotation_xyz,
)

__all__ = [
    "CheckpointError", "ConfigError", "LoadError", "PARAM_NAMES", "PATCH_SIZE",
    "ParameterSample", "Pose", "ProbeConfig", "ProbeFrame", "RunConfig", "ScanRay",
    "SweepDataset", "TrainingDivergedError", "UsfieldError", "ValidationError",
    "VoxelPatch", "every_eighth_split", "frame_rays", "load_checkpoint", "load_dataset",
    "ray_for_pixel", "rotation_xyz", "save_checkpoint", "write_dataset",
]
