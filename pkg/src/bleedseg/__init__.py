"""Self-contained volumetric segmentation engine for intracranial-bleed
detection: tensor containers, hand-written differentiable layers, a
U-shaped 3D network, optimizers, preprocessing/augmentation, synthetic
phantom data, and evaluation metrics."""

from .volume import LabelVolume, Shape, Volume, concat_channels, create, crop_center

__version__ = "0.1.0"

__all__ = [
    "LabelVolume",
    "Shape",
    "Volume",
    "concat_channels",
    "create",
    "crop_center",
    "__version__",
]
