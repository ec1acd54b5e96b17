"""RGB-D facial expression recognition with a from-scratch ViT, alternative fusion and sample filtering."""
from .config import AugmentationConfig, ExperimentConfig, ModelConfig, TrainConfig, load_config
from .errors import (BookkeepingError, ConfigError, ContractError, DimensionError, LabelError,
                     ManifestError, MFEViTError, NumericError)
from .model import forward, predict_proba

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "ExperimentConfig", "ModelConfig", "TrainConfig", "load_config",
    "BookkeepingError", "ConfigError", "ContractError", "DimensionError", "LabelError",
    "ManifestError", "MFEViTError", "NumericError", "forward", "predict_proba",
]
