"""Cascaded 3D U-Net glioma segmentation: coarse whole tumour, refinement,
conditioned enhancing tumour / tumour core, and CNN post-processing."""

from .volume_core import Subject, Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["Subject", "Volume", "load_volume", "save_volume", "__version__"]
