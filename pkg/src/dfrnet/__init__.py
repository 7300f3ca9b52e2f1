"""Density feature refinement network for single-image dehazing."""
from .model import VARIANTS, DFRNet, ModelConfig, count_parameters

__all__ = ["DFRNet", "ModelConfig", "VARIANTS", "count_parameters"]
__version__ = "0.1.0"
