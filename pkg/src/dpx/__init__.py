"""Differential pixel-aware RGB-D fusion blocks, analytic gradients, and
cost models, with a verification CLI (``dpx``)."""

from .tensor import Tensor, RngState, FlopMeter, use_meter
from .attention import AttentionConfig, TokenGrid
from .dsim import DsimConfig, DsimParams
from .encoder import EncoderConfig, Encoder, preset_config

__all__ = [
    "Tensor", "RngState", "FlopMeter", "use_meter",
    "AttentionConfig", "TokenGrid",
    "DsimConfig", "DsimParams",
    "EncoderConfig", "Encoder", "preset_config",
]

__version__ = "0.1.0"
