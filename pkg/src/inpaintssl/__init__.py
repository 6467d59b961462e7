"""Inpainting-based self-supervised pretraining for U-Net segmentation, in numpy."""
from . import corruption, datapipe, evalstats, harness, tensorcore, trainer, unet

__version__ = "0.1.0"
