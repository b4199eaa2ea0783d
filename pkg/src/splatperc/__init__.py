"""splatperc: perceptual optimization toolkit for 2D Gaussian splat fitting."""

__version__ = "0.1.0"

from .image_io import CropSpec, ImageBuffer, load_image, psnr, sample_crop, save_image
from .losses import LossConfig, SigmaMap
from .splat_render import RenderOutput, SplatGradients, SplatSet, render, render_backward

__all__ = [
    "CropSpec",
    "ImageBuffer",
    "LossConfig",
    "RenderOutput",
    "SigmaMap",
    "SplatGradients",
    "SplatSet",
    "load_image",
    "psnr",
    "render",
    "render_backward",
    "sample_crop",
    "save_image",
    "__version__",
]
