"""A tiny randomly-initialized encoder pair for desk-scale verification.

Architecturally it mirrors a CLIP-style model: pre-LayerNorm transformer
blocks with QuickGELU MLPs, a class token on the vision side, a causal text
transformer pooled at the final (end-of-sequence) position, and linear
projections into a joint space. Everything is seeded, so two instances built
with the same arguments have identical weights.
"""

from __future__ import annotations

import math
import string

import torch
import torch.nn as nn

from ..errors import InputError
from .base import FrozenBackbone, VisualPrompts, check_visual_prompts, run_prompted_layers

SOS, EOS, UNK = "<sos>", "<eos>", "<unk>"
# 26 letters, space, two punctuation marks and three specials: 32 symbols
VOCAB = list(string.ascii_lowercase) + [" ", ".", "-", UNK, SOS, EOS]


def quick_gelu(x):
    return x * torch.sigmoid(1.702 * x)


class Block(nn.Module):
    """Pre-LN transformer block: ``x + attn(ln1(x))`` then ``x + mlp(ln2(x))``."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def attention(self, x, mask=None):
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if mask is not None:
            scores = scores + mask
        weights = scores.softmax(dim=-1)
        return self.out((weights @ v).transpose(1, 2).reshape(b, t, d))

    def forward(self, x, mask=None):
        x = x + self.attention(self.ln1(x), mask)
        return x + self.fc2(quick_gelu(self.fc1(self.ln2(x))))


def causal_mask(length: int, dtype, device=None) -> torch.Tensor:
    return torch.full((length, length), float("-inf"), dtype=dtype, device=device).triu(1)


class SyntheticBackbone(FrozenBackbone):
    """Seeded two-tower toy model with the same interface as the pretrained adapter."""

    def __init__(self, width: int = 8, embed_dim: int = 8, layers: int = 2, heads: int = 2,
                 image_size: int = 8, patch_size: int = 4, max_text_length: int = 64,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        if image_size % patch_size:
            raise InputError("image_size must be a multiple of patch_size")
        self.vision_width = width
        self.token_dim = width
        self.embed_dim = embed_dim
        self.num_layers = layers
        self.image_size = image_size
        self.patch_size = patch_size
        self.max_text_length = max_text_length
        self.tau = 1.0
        self.vocab = {sym: i for i, sym in enumerate(VOCAB)}
        num_patches = (image_size // patch_size) ** 2

        self.patch_embed = nn.Linear(3 * patch_size * patch_size, width, bias=False)
        self.class_embedding = nn.Parameter(torch.empty(width))
        self.vision_pos = nn.Parameter(torch.empty(num_patches + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.vision_blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.ln_post = nn.LayerNorm(width)
        self.vision_proj = nn.Parameter(torch.empty(width, embed_dim))

        self.token_embedding = nn.Embedding(len(VOCAB), width)
        self.text_pos = nn.Parameter(torch.empty(max_text_length, width))
        self.text_blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.ln_final = nn.LayerNorm(width)
        self.text_proj = nn.Parameter(torch.empty(width, embed_dim))

        self._init_weights(seed)
        self.to(dtype)
        self.freeze()

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            with torch.no_grad():
                if name.endswith("bias"):
                    p.copy_(0.05 * torch.randn(p.shape, generator=gen))
                elif ".ln" in name or name.startswith("ln_"):
                    p.copy_(1.0 + 0.1 * torch.randn(p.shape, generator=gen))
                else:
                    fan_in = p.shape[-1] if p.ndim > 1 else p.shape[0]
                    if name in ("vision_proj", "text_proj"):
                        fan_in = p.shape[0]
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))

    # vision ----------------------------------------------------------------

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        b, h, w, c = pixels.shape
        if h != self.image_size or w != self.image_size:
            raise InputError(f"synthetic backbone expects {self.image_size}x{self.image_size} images, got {h}x{w}")
        p = self.patch_size
        x = pixels.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def encode_image(self, pixels, vp: VisualPrompts | None = None) -> torch.Tensor:
        check_visual_prompts(vp, self.num_layers, self.vision_width)
        pixels = self._as_pixel_batch(pixels)
        patches = self.patch_embed(self.patchify(pixels))
        cls = self.class_embedding.expand(patches.shape[0], 1, -1)
        x = torch.cat([cls, patches], dim=1) + self.vision_pos
        x = self.ln_pre(x)
        x = run_prompted_layers(self.vision_blocks, x, vp, lambda blk, h: blk(h))
        return self.ln_post(x[:, 0]) @ self.vision_proj

    # text ------------------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        cleaned = " ".join(text.lower().split())
        if not cleaned:
            raise InputError("cannot embed an empty string")
        unk = self.vocab[UNK]
        return [self.vocab.get(ch, unk) for ch in cleaned]

    def embed_tokens(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.tokenize(text), device=self.token_embedding.weight.device)
        return self.token_embedding.weight[ids]

    def encode_text(self, seq: torch.Tensor) -> torch.Tensor:
        squeeze = seq.ndim == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        b, t, _ = seq.shape
        self._check_text_length(t + 2)
        sos = self.token_embedding.weight[self.vocab[SOS]].expand(b, 1, -1)
        eos = self.token_embedding.weight[self.vocab[EOS]].expand(b, 1, -1)
        x = torch.cat([sos, seq.to(self.dtype), eos], dim=1) + self.text_pos[: t + 2]
        mask = causal_mask(t + 2, x.dtype, x.device)
        for blk in self.text_blocks:
            x = blk(x, mask)
        out = self.ln_final(x[:, -1]) @ self.text_proj
        return out[0] if squeeze else out

    def extra_repr(self):
        return (f"width={self.vision_width}, embed_dim={self.embed_dim}, layers={self.num_layers}, "
                f"image_size={self.image_size}, patch_size={self.patch_size}")

