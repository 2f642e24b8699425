"""Dual-branch disentangling auto-encoder toolkit.

Two latent subspaces specialize for class and attribute information via
regular plus adversarial classifiers; the linearized attribute space
supports semantic image editing, identity/attribute mixing, and guided
data augmentation.
"""

from .data import ATTRIBUTE_NAMES, Manifest, SyntheticSpec, generate_synthetic, split
from .evaluate import MetricsReport, evaluate_model
from .model import DualDisModel, ModelConfig, PRESETS, build_model, desk_config, get_preset
from .objectives import LossWeights, WEIGHT_PRESETS
from .persist import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, run

__version__ = "0.1.0"

__all__ = [
    "ATTRIBUTE_NAMES",
    "DualDisModel",
    "LossWeights",
    "Manifest",
    "MetricsReport",
    "ModelConfig",
    "PRESETS",
    "SyntheticSpec",
    "TrainConfig",
    "WEIGHT_PRESETS",
    "build_model",
    "desk_config",
    "evaluate_model",
    "generate_synthetic",
    "get_preset",
    "load_checkpoint",
    "run",
    "save_checkpoint",
    "split",
    "__version__",
]
