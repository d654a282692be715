from .assembly import (
    DenoiserAssembly,
    ModelConfig,
    checkpoint_extra,
    linear_schedule,
    load_checkpoint,
    save_checkpoint,
)
from .autoencoder import FrameAutoencoder
from .idextractor import IdExtractor
from .unet import ControlBranch, UNet3D
from .warper import PixelWarper

__all__ = [
    "ControlBranch",
    "DenoiserAssembly",
    "FrameAutoencoder",
    "IdExtractor",
    "ModelConfig",
    "PixelWarper",
    "UNet3D",
    "checkpoint_extra",
    "linear_schedule",
    "load_checkpoint",
    "save_checkpoint",
]
