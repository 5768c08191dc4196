"""Conditional distribution estimation with collaborating CDF / inverse-CDF networks."""

from .data import LabeledDataset, read_dataset_csv, split_indices, write_dataset_csv
from .errors import (
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    NumericError,
    ShapeError,
    VersionMismatchError,
)
from .model import (
    CN_FULL,
    G_ONLY,
    T_G,
    FixedF,
    Interval,
    TrainedCnModel,
    TrainingConfig,
    checkpoint_load,
    checkpoint_save,
    train,
)

__version__ = "0.1.0"
