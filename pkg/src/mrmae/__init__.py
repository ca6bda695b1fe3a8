"""Multiple random masking autoencoder ensembles over layered observations."""

__version__ = "0.1.0"

from mrmae.errors import (
    ConfigError,
    DataError,
    FitError,
    MRMAEError,
    PolicyError,
    TrainingError,
)
from mrmae.dataset import (
    FeatureMeans,
    LayerManifest,
    LayeredDataset,
    compute_feature_means,
    load_grids,
    normalize_layers,
    patch_average,
)
from mrmae.masking import Mask, MaskPolicy, apply_mask, sample_mask, sample_superset_mask
from mrmae.nnet import MlpModel, OptimState, backward, forward, step
from mrmae.training import LossConfig, TrainConfig, masked_loss, train
from mrmae.ensemble import EnsembleConfig, ensemble_predict
from mrmae.importance import LossMatrix, accumulate_loss_matrix, summarize
from mrmae.evaluate import accuracy

__all__ = [
    "ConfigError",
    "DataError",
    "EnsembleConfig",
    "FeatureMeans",
    "FitError",
    "LayerManifest",
    "LayeredDataset",
    "LossConfig",
    "LossMatrix",
    "MRMAEError",
    "Mask",
    "MaskPolicy",
    "MlpModel",
    "OptimState",
    "PolicyError",
    "TrainConfig",
    "TrainingError",
    "accumulate_loss_matrix",
    "accuracy",
    "apply_mask",
    "backward",
    "compute_feature_means",
    "ensemble_predict",
    "forward",
    "load_grids",
    "masked_loss",
    "normalize_layers",
    "patch_average",
    "sample_mask",
    "sample_superset_mask",
    "step",
    "summarize",
    "train",
]
