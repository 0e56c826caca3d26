"""Flow-based volumetric reconstruction from uni- or biplanar projections."""

from .glow import FlowModel, ModelConfig, load_checkpoint, save_checkpoint
from .solver import ReconConfig, ReconResult, reconstruct, reconstruct_family
from .train import TrainConfig

__all__ = [
    "FlowModel",
    "ModelConfig",
    "ReconConfig",
    "ReconResult",
    "TrainConfig",
    "load_checkpoint",
    "reconstruct",
    "reconstruct_family",
    "save_checkpoint",
]
__version__ = "0.1.0"
