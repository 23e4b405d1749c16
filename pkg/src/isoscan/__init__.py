"""Degradation-aware Mamba-style reconstruction of anisotropic 3D volumes, in numpy."""
from .degradation import DegradationProfile, degrade
from .network import ModelConfig, ReconNet
from .volume import Volume, generate_phantom, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["DegradationProfile", "degrade", "ModelConfig", "ReconNet", "Volume",
           "generate_phantom", "load_volume", "save_volume"]
