import torch

from .base import FrozenBackbone, ImageInput, VisualPrompts, fingerprint_module, stack_images
from .clip import CLIP_MEAN, CLIP_STD, ClipBackbone
from .synthetic import VOCAB, SyntheticBackbone

from ..errors import ConfigurationError

BACKBONES = ("pretrained-vitb16", "synthetic")


def load_backbone(kind: str, checkpoint=None, device: str = "cpu", **synthetic_kwargs) -> FrozenBackbone:
    """Build the backbone named by the ``backbone`` config key and place it on ``device``."""
    if device.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigurationError(f"device {device!r} requested but CUDA is not available")
    if kind == "synthetic":
        backbone = SyntheticBackbone(**synthetic_kwargs)
    elif kind == "pretrained-vitb16":
        if checkpoint is None:
            raise ConfigurationError("backbone 'pretrained-vitb16' needs a local checkpoint path")
        backbone = ClipBackbone.from_checkpoint(checkpoint)
    else:
        raise ConfigurationError(f"unknown backbone {kind!r}; expected one of {BACKBONES}")
    return backbone.to(device)


__all__ = [
    "BACKBONES", "CLIP_MEAN", "CLIP_STD", "ClipBackbone", "FrozenBackbone", "ImageInput",
    "SyntheticBackbone", "VOCAB", "VisualPrompts", "fingerprint_module", "load_backbone",
    "stack_images",
]
