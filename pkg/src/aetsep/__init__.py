"""Learnable auto-encoder front-ends for end-to-end source separation."""

from .aet import AetConfig, AetParams, decode, encode, init_params, inspect_bases
from .corpus import Waveform, mix_at_0db, read_wav, write_wav
from .losses import bss_eval, mse_loss, sdr_db, sdr_loss
from .separator import build_model, separate_forward
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AetConfig",
    "AetParams",
    "TrainConfig",
    "Waveform",
    "build_model",
    "bss_eval",
    "decode",
    "encode",
    "init_params",
    "inspect_bases",
    "load_checkpoint",
    "mix_at_0db",
    "mse_loss",
    "read_wav",
    "save_checkpoint",
    "sdr_db",
    "sdr_loss",
    "separate_forward",
    "train",
    "write_wav",
]
