"""Consistent assistant-domain transformer for source-free domain adaptation, at desk scale."""
from .adm import AdmConfig
from .backbone import BackboneConfig, ConfigError
from .losses import KernelSpec, LossWeights
from .model import build_model, forward
from .params import ModelState
from .pipeline import AdaptConfig, adapt_target, evaluate, train_source
from .synthdata import Dataset, DomainSpec, generate
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "AdmConfig",
    "BackboneConfig",
    "ConfigError",
    "Dataset",
    "DomainSpec",
    "KernelSpec",
    "LossWeights",
    "ModelState",
    "Tensor",
    "adapt_target",
    "build_model",
    "evaluate",
    "forward",
    "generate",
    "no_grad",
    "train_source",
]
