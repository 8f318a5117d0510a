"""Differentiable volume rendering with dynamic coefficient decomposition."""
from .appearance import AppearanceConfig, AppearanceModel, posenc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .dataset import SceneDataset, load_dataset
from .estimator import DynamicCoefficientField
from .field import AlphaMask, VMGrid
from .gradtensor import Tape, Tensor
from .model import FieldConfig, RadianceField
from .render import Camera, RenderConfig
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AlphaMask",
    "AppearanceConfig",
    "AppearanceModel",
    "Camera",
    "DynamicCoefficientField",
    "FieldConfig",
    "RadianceField",
    "RenderConfig",
    "RunConfig",
    "SceneDataset",
    "Tape",
    "Tensor",
    "TrainConfig",
    "VMGrid",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "posenc",
    "save_checkpoint",
    "train",
]
