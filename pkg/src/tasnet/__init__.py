"""Time-domain two-speaker separation with deep encoders/decoders, on a small numpy autograd."""

from .autograd import Tensor
from .dsp import AudioBuffer, StftConfig
from .losses import LossConfig
from .model import ModelConfig, SeparationModel, param_count, preset_config

__version__ = "0.1.0"

__all__ = ["Tensor", "AudioBuffer", "StftConfig", "LossConfig", "ModelConfig", "SeparationModel",
           "param_count", "preset_config"]
