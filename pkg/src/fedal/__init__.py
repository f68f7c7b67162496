"""Federated dataset learning for time series foundation models, at desk scale."""
from fedal.config import Ablations, DataConfig, ModelConfig, RunConfig, load_config, parse_config
from fedal.errors import ConfigError, ContractError, DimensionError, FedalError
from fedal.kernels import BACKEND
from fedal.params import ParamSet, load_checkpoint, save_checkpoint
from fedal.tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Ablations", "BACKEND", "ConfigError", "ContractError", "DataConfig", "DimensionError",
    "FedalError", "ModelConfig", "ParamSet", "RunConfig", "Tensor", "backward", "load_checkpoint",
    "load_config", "parse_config", "save_checkpoint",
]
