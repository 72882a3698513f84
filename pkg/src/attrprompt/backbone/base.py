"""Shared pieces of the frozen encoder pair: inputs, visual prompts, fingerprinting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..errors import ConfigurationError, InputError


@dataclass
class ImageInput:
    """One image as an ``H x W x 3`` array of normalized floats."""

    pixels: np.ndarray
    id: str
    path: str | None = None  # original file, for clients that want raw images

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise InputError(f"image {self.id!r}: expected H x W x 3 pixels, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise InputError(f"image {self.id!r}: pixel values must be finite")
        self.pixels = pixels


def stack_images(images, dtype=torch.float64) -> torch.Tensor:
    """Collate ``ImageInput`` objects (or raw arrays) into a ``B x H x W x 3`` tensor."""
    arrays = [img.pixels if isinstance(img, ImageInput) else np.asarray(img) for img in images]
    return torch.as_tensor(np.stack(arrays), dtype=dtype)


class VisualPrompts(nn.Module):
    """Learnable tokens for deep visual prompting, shaped ``depth x count x width``.

    Layer ``i < depth`` of the vision transformer receives ``tokens[i]`` in its
    prompt slots; whatever that layer writes back into those slots is thrown
    away. Past ``depth`` the slots simply flow through the remaining layers.
    """

    def __init__(self, depth: int, count: int, width: int, init_std: float = 0.02,
                 generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        if depth < 1:
            raise ConfigurationError(f"visual prompt depth must be >= 1, got {depth}")
        if count < 0:
            raise ConfigurationError(f"visual prompt count must be >= 0, got {count}")
        self.depth = depth
        self.count = count
        tokens = torch.randn(depth, count, width, generator=generator, dtype=dtype) * init_std
        self.tokens = nn.Parameter(tokens)

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def extra_repr(self):
        return f"depth={self.depth}, count={self.count}, width={self.width}"


def check_visual_prompts(vp: VisualPrompts | None, num_layers: int, width: int):
    if vp is None or vp.count == 0:
        return
    if vp.depth > num_layers:
        raise ConfigurationError(f"visual prompt depth {vp.depth} exceeds encoder layer count {num_layers}")
    if vp.width != width:
        raise ConfigurationError(
            f"visual prompt width {vp.width} does not match patch-embedding width {width}")


def run_prompted_layers(layers, hidden: torch.Tensor, vp: VisualPrompts | None, layer_fn) -> torch.Tensor:
    """Push ``[cls, patches]`` through ``layers`` with deep prompt injection.

    ``layer_fn(layer, hidden)`` runs a single block. With no prompts (or
    ``count == 0``) the token sequence is left untouched so the result is
    bit-identical to the plain encoder.
    """
    if vp is None or vp.count == 0:
        for layer in layers:
            hidden = layer_fn(layer, hidden)
        return hidden

    batch = hidden.shape[0]
    n = vp.count
    base_len = hidden.shape[1]
    tokens = vp.tokens.to(hidden.dtype)
    for i, layer in enumerate(layers):
        if i < vp.depth:
            z = tokens[i].unsqueeze(0).expand(batch, -1, -1)
            hidden = torch.cat([hidden[:, :base_len], z], dim=1)
        hidden = layer_fn(layer, hidden)
    return hidden[:, :base_len]


def fingerprint_module(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer of ``module`` (names, dtypes, shapes, bytes)."""
    digest = hashlib.sha256()
    state = module.state_dict(keep_vars=False)
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes() if tensor.dtype != torch.bfloat16
                      else tensor.view(torch.int16).numpy().tobytes())
    return digest.hexdigest()


class FrozenBackbone(nn.Module):
    """Interface every encoder pair implements.

    Subclasses set ``embed_dim`` (joint space), ``token_dim`` (text token
    embedding width), ``vision_width``, ``num_layers``, ``max_text_length``
    and ``tau``, and freeze all of their own parameters.
    """

    embed_dim: int
    token_dim: int
    vision_width: int
    num_layers: int
    max_text_length: int
    tau: float

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # dropout-free encoders, but keep them out of training mode regardless
        return super().train(False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def make_visual_prompts(self, count: int, depth: int, init_std: float = 0.02,
                            generator: torch.Generator | None = None) -> VisualPrompts:
        vp = VisualPrompts(depth, count, self.vision_width, init_std=init_std,
                           generator=generator, dtype=self.dtype)
        check_visual_prompts(vp, self.num_layers, self.vision_width)
        return vp

    def encode_image(self, pixels, vp: VisualPrompts | None = None) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, seq: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed_tokens(self, text: str) -> torch.Tensor:
        raise NotImplementedError

    def fingerprint_frozen_weights(self) -> str:
        return fingerprint_module(self)

    def _as_pixel_batch(self, pixels) -> torch.Tensor:
        if isinstance(pixels, ImageInput):
            pixels = stack_images([pixels], dtype=self.dtype)
        elif isinstance(pixels, (list, tuple)):
            pixels = stack_images(pixels, dtype=self.dtype)
        pixels = torch.as_tensor(pixels, dtype=self.dtype, device=self.device)
        if pixels.ndim == 3:
            pixels = pixels.unsqueeze(0)
        if pixels.ndim != 4 or pixels.shape[-1] != 3:
            raise InputError(f"expected B x H x W x 3 pixels, got shape {tuple(pixels.shape)}")
        return pixels

    def _check_text_length(self, length: int):
        if length > self.max_text_length:
            raise InputError(
                f"token sequence of length {length} (with start/end tokens) exceeds "
                f"the text encoder limit of {self.max_text_length}")
