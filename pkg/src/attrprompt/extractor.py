"""Hypernetwork that predicts an attribute token embedding from an image embedding."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigurationError, InputError


class AttributeExtractor(nn.Module):
    """Two-layer ReLU MLP: ``layer2(relu(layer1(emb)))``.

    Maps a ``D_vl`` image embedding to a ``D_t`` vector living in the text
    encoder's token-embedding space, so it can be dropped straight into a
    prompt as one extra token.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None,
                 init_std: float | None = None, generator: torch.Generator | None = None,
                 dtype=torch.float64):
        super().__init__()
        hidden = in_dim if hidden is None else hidden
        self.layer1 = nn.Linear(in_dim, hidden, dtype=dtype)
        self.layer2 = nn.Linear(hidden, out_dim, dtype=dtype)
        with torch.no_grad():
            for layer in (self.layer1, self.layer2):
                std = init_std if init_std is not None else layer.in_features ** -0.5
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator, dtype=dtype) * std)
                layer.bias.zero_()

    @property
    def in_dim(self):
        return self.layer1.in_features

    @property
    def out_dim(self):
        return self.layer2.out_features

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"attribute extractor expects {self.in_dim}-dim image embeddings, got {emb.shape[-1]}")
        return self.layer2(torch.relu(self.layer1(emb)))


def extract(emb: torch.Tensor, extractor: AttributeExtractor) -> torch.Tensor:
    return extractor(emb)


def attribute_target(backbone, attribute: str) -> torch.Tensor:
    """Token-embedding target for an attribute string.

    Single-token attributes map to their embedding row; multi-token ones to
    the mean of their rows.
    """
    if not attribute or not attribute.strip():
        raise InputError("attribute must be a non-empty string")
    rows = backbone.embed_tokens(attribute)
    return rows[0] if rows.shape[0] == 1 else rows.mean(dim=0)


def attr_loss(pred: torch.Tensor, target: torch.Tensor, f: int = 2) -> torch.Tensor:
    """``sum(|pred - target| ** f)`` over the last axis (an l_f norm raised to the f-th power)."""
    if f not in (1, 2):
        raise ConfigurationError(f"attribute loss exponent f must be 1 or 2, got {f}")
    if pred.shape[-1] != target.shape[-1]:
        raise ConfigurationError(f"width mismatch: prediction {pred.shape[-1]} vs target {target.shape[-1]}")
    diff = pred - target
    return (diff.abs() if f == 1 else diff.pow(2)).sum(dim=-1)
