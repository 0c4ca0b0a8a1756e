"""Attention-based explainability for crop-type classification from satellite time series."""

__version__ = "0.1.0"

from .dataset import (  # noqa: E402
    CropPhenology,
    Dataset,
    Observation,
    PaddedBatch,
    ParcelSeries,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    make_batch,
    ndvi,
    positional_encoding,
    random_sample,
    right_pad,
    weekly_average,
)
from .model import Checkpoint, ModelConfig, forward, init_params, load_checkpoint, loss_gradients, save_checkpoint  # noqa: E402
from .training import Metrics, TrainConfig, evaluate, focal_loss, learning_rate, train  # noqa: E402

__all__ = [
    "Checkpoint", "CropPhenology", "Dataset", "Metrics", "ModelConfig", "Observation", "PaddedBatch",
    "ParcelSeries", "SyntheticConfig", "TrainConfig", "evaluate", "focal_loss", "forward",
    "generate_synthetic", "init_params", "learning_rate", "load_checkpoint", "load_dataset",
    "loss_gradients", "make_batch", "ndvi", "positional_encoding", "random_sample", "right_pad",
    "save_checkpoint", "train", "weekly_average",
]
