"""Learnable context, image conditioning and per-class prompt assembly."""

from __future__ import annotations

import math
from collections import defaultdict

import torch
import torch.nn as nn

from .errors import ConfigurationError, InputError


class ContextVector(nn.Module):
    """``M`` learnable token embeddings shared by every class."""

    def __init__(self, length: int, width: int, init_std: float = 0.02,
                 generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        if length < 1:
            raise ConfigurationError(f"context length must be >= 1, got {length}")
        self.tokens = nn.Parameter(torch.randn(length, width, generator=generator, dtype=dtype) * init_std)

    @property
    def length(self):
        return self.tokens.shape[0]

    @property
    def width(self):
        return self.tokens.shape[1]

    def forward(self):
        return self.tokens


def _image_projection(img_dim, width, dtype, generator):
    if img_dim == width:
        return nn.Identity()
    proj = nn.Linear(img_dim, width, dtype=dtype)
    with torch.no_grad():
        proj.weight.copy_(torch.randn(proj.weight.shape, generator=generator, dtype=dtype) * img_dim ** -0.5)
        proj.bias.zero_()
    return proj


class MultiHeadConditioner(nn.Module):
    """Cross-attention from the context tokens (queries) to the image embedding (keys/values).

    The image embedding enters as a key/value sequence; a single ``D_vl``
    vector is treated as a sequence of length one. With ``residual=True`` the
    output is ``ctx + attn(ctx, emb)``, so a zero output projection reproduces
    the unconditioned context exactly.
    """

    def __init__(self, width: int, heads: int = 4, img_dim: int | None = None, residual: bool = True,
                 zero_init_out: bool = True, generator: torch.Generator | None = None,
                 dtype=torch.float64):
        super().__init__()
        if heads < 1 or width % heads:
            raise ConfigurationError(f"head count {heads} must divide the attention width {width}")
        img_dim = width if img_dim is None else img_dim
        self.width = width
        self.heads = heads
        self.img_dim = img_dim
        self.residual = residual
        self.img_proj = _image_projection(img_dim, width, dtype, generator)
        self.q_proj = nn.Linear(width, width, dtype=dtype)
        self.k_proj = nn.Linear(width, width, dtype=dtype)
        self.v_proj = nn.Linear(width, width, dtype=dtype)
        self.out_proj = nn.Linear(width, width, dtype=dtype)
        with torch.no_grad():
            for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=generator, dtype=dtype) * width ** -0.5)
                lin.bias.zero_()
            if zero_init_out:
                self.out_proj.weight.zero_()

    def attend(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """Multi-head attention of ``query`` (B, M, D) over ``memory`` (B, S, D)."""
        b, m, d = query.shape
        s = memory.shape[1]
        hd = d // self.heads
        q = self.q_proj(query).view(b, m, self.heads, hd).transpose(1, 2)
        k = self.k_proj(memory).view(b, s, self.heads, hd).transpose(1, 2)
        v = self.v_proj(memory).view(b, s, self.heads, hd).transpose(1, 2)
        weights = (q @ k.transpose(-1, -2) / math.sqrt(hd)).softmax(dim=-1)
        return self.out_proj((weights @ v).transpose(1, 2).reshape(b, m, d))

    def forward(self, ctx: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if ctx.shape[-1] != self.width:
            raise ConfigurationError(f"context width {ctx.shape[-1]} does not match attention width {self.width}")
        if emb.shape[-1] != self.img_dim:
            raise ConfigurationError(f"image embedding width {emb.shape[-1]} does not match {self.img_dim}")
        squeeze = emb.ndim == 1
        if squeeze:
            emb = emb.unsqueeze(0)
        if emb.ndim == 2:
            emb = emb.unsqueeze(1)
        memory = self.img_proj(emb)
        query = ctx.unsqueeze(0).expand(memory.shape[0], -1, -1)
        out = self.attend(query, memory)
        if self.residual:
            out = query + out
        return out[0] if squeeze else out


class AdditiveConditioner(nn.Module):
    """Ablation baseline: ``h_i = u_i + W emb`` for every context position."""

    def __init__(self, width: int, img_dim: int | None = None, zero_init: bool = False,
                 generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        img_dim = width if img_dim is None else img_dim
        self.width = width
        self.img_dim = img_dim
        self.proj = nn.Linear(img_dim, width, dtype=dtype)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=generator, dtype=dtype)
                                   * img_dim ** -0.5)
            self.proj.bias.zero_()
            if zero_init:
                self.proj.weight.zero_()

    def forward(self, ctx: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[-1] != self.img_dim or ctx.shape[-1] != self.width:
            raise ConfigurationError("width mismatch in additive conditioning")
        shift = self.proj(emb)
        return ctx + shift.unsqueeze(-2)


def condition(ctx, emb, conditioner):
    """Instance-conditioned context ``h(I)`` with the same trailing shape as ``ctx``."""
    tokens = ctx.tokens if isinstance(ctx, ContextVector) else ctx
    return conditioner(tokens, emb)


class ClassVocabulary:
    """Class names together with their token-embedding segments for one backbone."""

    def __init__(self, names, backbone):
        names = list(names)
        if len(names) < 2:
            raise InputError("a class vocabulary needs at least two classes")
        if len(set(names)) != len(names):
            raise InputError("class names must be unique")
        self.names = names
        self.max_text_length = backbone.max_text_length
        self.segments = [backbone.embed_tokens(name) for name in names]

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, names, backbone):
        return ClassVocabulary(names, backbone)


def _check_lengths(prefix_len, vocab):
    for name, seg in zip(vocab.names, vocab.segments):
        total = prefix_len + seg.shape[0] + 2
        if total > vocab.max_text_length:
            raise InputError(
                f"prompt for class {name!r} has {total} tokens, over the text limit of {vocab.max_text_length}")


def assemble(h: torch.Tensor, attr: torch.Tensor, vocab: ClassVocabulary) -> list[torch.Tensor]:
    """Per-class prompts ``[h_1..h_M, attr, class tokens]``.

    ``h`` is ``(M, D)`` or ``(B, M, D)``; ``attr`` is ``(D,)`` or ``(B, D)``.
    Returns one tensor per class, shaped ``(M + 1 + t_c, D)`` or batched.
    """
    if h.shape[-1] != attr.shape[-1]:
        raise ConfigurationError(f"context width {h.shape[-1]} != attribute width {attr.shape[-1]}")
    prefix = torch.cat([h, attr.unsqueeze(-2)], dim=-2)
    _check_lengths(prefix.shape[-2], vocab)
    prompts = []
    for seg in vocab.segments:
        if seg.shape[-1] != prefix.shape[-1]:
            raise ConfigurationError("class token width differs from context width")
        seg = seg.to(prefix.dtype)
        if prefix.ndim == 3:
            seg = seg.unsqueeze(0).expand(prefix.shape[0], -1, -1)
        prompts.append(torch.cat([prefix, seg], dim=-2))
    return prompts


def assemble_additive_ablation(ctx, emb, attr, vocab, conditioner: AdditiveConditioner):
    """Same layout as :func:`assemble` with ``h_i = u_i + project(emb)``."""
    return assemble(condition(ctx, emb, conditioner), attr, vocab)


def encode_prompts(backbone, prompts: list[torch.Tensor]) -> torch.Tensor:
    """Text-encode per-class prompts; returns ``(B, C, D_vl)`` (or ``(C, D_vl)`` unbatched).

    Classes whose prompts share a length are encoded in one call.
    """
    batched = prompts[0].ndim == 3
    groups = defaultdict(list)
    for c, p in enumerate(prompts):
        groups[p.shape[-2]].append(c)
    out = [None] * len(prompts)
    for idxs in groups.values():
        stacked = torch.stack([prompts[c] for c in idxs], dim=0)  # (k, [B,] T, D)
        flat = stacked.reshape(-1, *stacked.shape[-2:])
        enc = backbone.encode_text(flat).reshape(*stacked.shape[:-2], -1)
        for j, c in enumerate(idxs):
            out[c] = enc[j]
    return torch.stack(out, dim=1 if batched else 0)
