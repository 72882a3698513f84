"""Adapter around a locally stored Hugging Face CLIP checkpoint."""

from __future__ import annotations

from pathlib import Path

import torch

from ..errors import ConfigurationError, InputError
from .base import FrozenBackbone, VisualPrompts, check_visual_prompts, run_prompted_layers

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ClipBackbone(FrozenBackbone):
    """Frozen CLIP (e.g. ViT-B/16) exposing prompt-aware encoders.

    Pixels are expected already resized to the model resolution and
    normalized with ``CLIP_MEAN``/``CLIP_STD``. Text sequences are the content
    token embeddings only; the start and end tokens are added here and the
    output is pooled at the end token.
    """

    def __init__(self, model, tokenizer, dtype=torch.float32):
        super().__init__()
        self.model = model.to(dtype)
        self.tokenizer = tokenizer
        vcfg = model.config.vision_config
        tcfg = model.config.text_config
        self.vision_width = vcfg.hidden_size
        self.token_dim = tcfg.hidden_size
        self.embed_dim = model.config.projection_dim
        self.num_layers = vcfg.num_hidden_layers
        self.image_size = vcfg.image_size
        self.max_text_length = tcfg.max_position_embeddings
        self.tau = float(1.0 / model.logit_scale.detach().exp())
        self.bos_id = tokenizer.bos_token_id
        self.eos_id = tokenizer.eos_token_id
        self.freeze()

    @classmethod
    def from_checkpoint(cls, path, dtype=torch.float32):
        from transformers import CLIPModel, CLIPTokenizer

        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"CLIP checkpoint directory not found: {path}")
        model = CLIPModel.from_pretrained(path, attn_implementation="eager")
        tokenizer = CLIPTokenizer.from_pretrained(path)
        return cls(model, tokenizer, dtype=dtype)

    def encode_image(self, pixels, vp: VisualPrompts | None = None) -> torch.Tensor:
        check_visual_prompts(vp, self.num_layers, self.vision_width)
        pixels = self._as_pixel_batch(pixels).permute(0, 3, 1, 2)
        vision = self.model.vision_model
        hidden = vision.pre_layrnorm(vision.embeddings(pixels))
        hidden = run_prompted_layers(vision.encoder.layers, hidden, vp, lambda layer, h: layer(h, None))
        pooled = vision.post_layernorm(hidden[:, 0])
        return self.model.visual_projection(pooled)

    def tokenize(self, text: str) -> list[int]:
        if not text.strip():
            raise InputError("cannot embed an empty string")
        return self.tokenizer(text, add_special_tokens=False)["input_ids"]

    def embed_tokens(self, text: str) -> torch.Tensor:
        table = self.model.text_model.embeddings.token_embedding.weight
        return table[torch.tensor(self.tokenize(text), dtype=torch.long, device=table.device)]

    def encode_text(self, seq: torch.Tensor) -> torch.Tensor:
        squeeze = seq.ndim == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        b, t, _ = seq.shape
        self._check_text_length(t + 2)
        text = self.model.text_model
        table = text.embeddings.token_embedding.weight
        bos = table[self.bos_id].expand(b, 1, -1)
        eos = table[self.eos_id].expand(b, 1, -1)
        x = torch.cat([bos, seq.to(table.dtype), eos], dim=1)
        x = x + text.embeddings.position_embedding.weight[: t + 2]
        mask = torch.full((t + 2, t + 2), torch.finfo(x.dtype).min, dtype=x.dtype, device=x.device).triu(1)
        mask = mask[None, None]
        for layer in text.encoder.layers:
            x = layer(x, mask)
        pooled = text.final_layer_norm(x[:, -1])
        out = self.model.text_projection(pooled)
        return out[0] if squeeze else out
