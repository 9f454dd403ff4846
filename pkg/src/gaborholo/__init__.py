"""Synthetic Gabor holography: angular-spectrum datasets and a numpy UNet."""

from .wavefield import PropagationParams, propagate, reconstruct_hologram
from .synthgen import DatasetConfig, build_dataset, load_manifest, synth_triplet
from .unet import UNetConfig, init_parameters, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, predict, train, validate

__version__ = "0.1.0"
