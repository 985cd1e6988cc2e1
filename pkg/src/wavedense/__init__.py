"""Wavelet U-shaped denoising network with residual dense blocks, in numpy."""
from .network import ModelConfig, ParamStore, build, denoise, forward
from .training import TrainConfig, train

__all__ = ["ModelConfig", "ParamStore", "TrainConfig", "build", "denoise", "forward", "train"]
__version__ = "0.1.0"
