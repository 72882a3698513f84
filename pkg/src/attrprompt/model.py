"""The trainable prompt learner wrapped around a frozen backbone."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigurationError
from .extractor import AttributeExtractor
from .prompts import (AdditiveConditioner, ClassVocabulary, ContextVector, MultiHeadConditioner,
                      assemble, encode_prompts)

CONDITIONING_MODES = ("multihead", "additive")
TRAINABLE_GROUPS = ("context", "visual_prompts", "extractor", "conditioner")


class PromptModel(nn.Module):
    """Context vector, deep visual prompts, attribute extractor and conditioner.

    The backbone is held by reference and is not part of ``state_dict()``, so
    checkpoints contain only the four trainable groups.
    """

    def __init__(self, backbone, context_length: int = 4, heads: int = 4,
                 conditioning: str = "multihead", residual: bool = True,
                 visual_tokens: int = 4, visual_depth: int = 9,
                 extractor_hidden: int | None = None, zero_init_attention: bool = True,
                 visual_init_std: float = 0.02, context_init_std: float = 0.02, seed: int = 0):
        super().__init__()
        if conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(f"conditioning must be one of {CONDITIONING_MODES}, got {conditioning!r}")
        self.__dict__["backbone"] = backbone
        self.conditioning = conditioning
        dtype = backbone.dtype
        gen = torch.Generator().manual_seed(seed)
        d_t, d_vl = backbone.token_dim, backbone.embed_dim

        self.visual_prompts = backbone.make_visual_prompts(visual_tokens, visual_depth, init_std=visual_init_std,
                                                           generator=gen)
        self.context = ContextVector(context_length, d_t, init_std=context_init_std, generator=gen, dtype=dtype)
        if conditioning == "multihead":
            self.conditioner = MultiHeadConditioner(d_t, heads, img_dim=d_vl, residual=residual,
                                                    zero_init_out=zero_init_attention,
                                                    generator=gen, dtype=dtype)
        else:
            self.conditioner = AdditiveConditioner(d_t, img_dim=d_vl, zero_init=zero_init_attention,
                                                   generator=gen, dtype=dtype)
        self.extractor = AttributeExtractor(d_vl, d_t, hidden=extractor_hidden, generator=gen, dtype=dtype)
        # initialized on the CPU generator so a seed means the same weights on every device
        self.to(backbone.device)

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(getattr(self, name).parameters()) for name in TRAINABLE_GROUPS}

    def image_features(self, pixels) -> torch.Tensor:
        return self.backbone.encode_image(pixels, self.visual_prompts)

    def forward(self, pixels, vocab: ClassVocabulary, attr_override: torch.Tensor | None = None):
        """Run the full prompt pipeline.

        ``attr_override`` replaces the extractor output inside the prompts (the
        oracle training setting); the extractor prediction is still returned.
        """
        img = self.image_features(pixels)
        attr_pred = self.extractor(img)
        attr_row = attr_pred if attr_override is None else attr_override.to(attr_pred.dtype)
        h = self.conditioner(self.context.tokens, img)
        prompts = assemble(h, attr_row, vocab)
        text = encode_prompts(self.backbone, prompts)
        return {"image": img, "attr": attr_pred, "context": h, "prompts": prompts, "text": text}
