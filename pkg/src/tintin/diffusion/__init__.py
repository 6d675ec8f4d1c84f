from .checkpoint import CheckpointVersionError, fingerprint, load_checkpoint, save_checkpoint
from .data import ToyDataset, render_shapes
from .model import Denoiser, TinyUNet, TorchDenoiser, UNetConfig
from .sampling import BatchNoise, NoiseStreams, decode, decode_vjp, sample, to_display
from .schedule import (
    NoiseSchedule,
    clip_eps,
    ddim_step,
    ddpm_step,
    display_x0,
    forward_noise,
    make_schedule,
    predict_x0,
    respace,
    reverse_step,
)
from .training import TrainConfig, TrainingDivergedError, TrainResult, train_toy_denoiser

__all__ = [
    "BatchNoise",
    "CheckpointVersionError",
    "Denoiser",
    "NoiseSchedule",
    "NoiseStreams",
    "TinyUNet",
    "ToyDataset",
    "TorchDenoiser",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "UNetConfig",
    "clip_eps",
    "ddim_step",
    "ddpm_step",
    "decode",
    "decode_vjp",
    "display_x0",
    "fingerprint",
    "forward_noise",
    "load_checkpoint",
    "make_schedule",
    "predict_x0",
    "render_shapes",
    "respace",
    "reverse_step",
    "sample",
    "save_checkpoint",
    "to_display",
    "train_toy_denoiser",
]
