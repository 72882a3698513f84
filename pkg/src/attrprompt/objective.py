"""Classification, attribute and template-regularization losses."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .extractor import attr_loss, attribute_target
from .prompts import encode_prompts

ATTR, CLS = "[a]", "[cls]"


def fill_template(template: str, attribute: str, class_name: str) -> str:
    text = template.replace(ATTR, attribute).replace(CLS, class_name.replace("_", " "))
    return " ".join(text.split())


class TemplatePool:
    """Prompt templates carrying both an ``[a]`` and a ``[cls]`` slot."""

    def __init__(self, templates):
        templates = [t.strip() for t in templates if t.strip()]
        if not templates:
            raise ConfigurationError("template pool is empty")
        for t in templates:
            if t.count(ATTR) != 1 or t.count(CLS) != 1:
                raise ConfigurationError(f"template must contain [a] and [cls] exactly once: {t!r}")
        self.templates = templates

    def __len__(self):
        return len(self.templates)

    @classmethod
    def from_file(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def default(cls):
        text = resources.files("attrprompt.resources").joinpath("templates80.txt").read_text(encoding="utf-8")
        return cls(text.splitlines())

    def render(self, attribute: str, class_name: str) -> list[str]:
        return [fill_template(t, attribute, class_name) for t in self.templates]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 4.0
    lambda2: float = 4.0
    f: int = 2
    g: int = 1
    tau: float | None = None  # None: use the backbone's temperature

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.f not in (1, 2) or self.g not in (1, 2):
            raise ConfigurationError("f and g must each be 1 or 2")
        if self.tau is not None and self.tau <= 0:
            raise ConfigurationError("tau must be positive")


def class_logits(img_emb: torch.Tensor, text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """``cos(img, text_c) / tau`` for every class; ``text_embs`` is (C, D) or (B, C, D)."""
    if tau <= 0:
        raise InputError("temperature must be positive")
    if img_emb.shape[-1] != text_embs.shape[-1]:
        raise InputError("image and text embeddings have different widths")
    img_norm = img_emb.norm(dim=-1, keepdim=True)
    txt_norm = text_embs.norm(dim=-1, keepdim=True)
    if (img_norm == 0).any() or (txt_norm == 0).any():
        raise InputError("cosine similarity is undefined for a zero-norm embedding")
    img = img_emb / img_norm
    txt = text_embs / txt_norm
    cos = (txt * img.unsqueeze(-2)).sum(-1)
    return cos / tau


def class_probabilities(img_emb, text_embs, tau: float) -> torch.Tensor:
    return class_logits(img_emb, text_embs, tau).softmax(dim=-1)


def ce_loss(probs: torch.Tensor, true_class: int) -> torch.Tensor:
    """Negative log-probability of the true class."""
    if not 0 <= true_class < probs.shape[-1]:
        raise InputError(f"class index {true_class} outside [0, {probs.shape[-1]})")
    return -torch.log(probs[..., true_class])


def reg_loss_from_embeddings(learned: torch.Tensor, targets: torch.Tensor, g: int = 1) -> torch.Tensor:
    """Mean over the N targets of ``sum |learned - target|^g``; targets are not differentiated."""
    if g not in (1, 2):
        raise ConfigurationError(f"regularizer exponent g must be 1 or 2, got {g}")
    diff = learned.unsqueeze(-2) - targets.detach()
    per_template = (diff.abs() if g == 1 else diff.pow(2)).sum(-1)
    return per_template.mean(-1)


class TemplateBank:
    """Caches frozen text embeddings of the filled template pool per (attribute, class).

    With ``cache_dir`` the embeddings also persist on disk, in one file per
    (backbone fingerprint, template pool) pair; call :meth:`save` to write
    newly computed entries.
    """

    def __init__(self, backbone, pool: TemplatePool, cache_dir=None):
        self.backbone = backbone
        self.pool = pool
        self._cache = {}
        self._dirty = False
        self.path = None
        if cache_dir is not None:
            pool_hash = hashlib.sha256("\n".join(pool.templates).encode()).hexdigest()
            name = f"{backbone.fingerprint_frozen_weights()[:16]}-{pool_hash[:16]}.pt"
            self.path = Path(cache_dir) / name
            if self.path.exists():
                stored = torch.load(self.path, map_location=backbone.device, weights_only=True)
                self._cache = {tuple(k.split("\x00")): v for k, v in stored.items()}

    def embeddings(self, attribute: str, class_name: str) -> torch.Tensor:
        key = (attribute, class_name)
        if key not in self._cache:
            with torch.no_grad():
                seqs = [self.backbone.embed_tokens(t) for t in self.pool.render(attribute, class_name)]
                self._cache[key] = encode_prompts(self.backbone, seqs)
            self._dirty = True
        return self._cache[key]

    def save(self):
        if self.path is None or not self._dirty:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        torch.save({"\x00".join(k): v.cpu() for k, v in self._cache.items()}, tmp)
        tmp.replace(self.path)
        self._dirty = False


def reg_loss(learned_emb, attribute, class_name, bank: TemplateBank, g: int = 1):
    """Template regularizer for one image whose annotated attribute is ``attribute``."""
    if not attribute:
        raise InputError(f"missing attribute annotation for class {class_name!r}")
    return reg_loss_from_embeddings(learned_emb, bank.embeddings(attribute, class_name), g)


def combine(terms: dict, weights: LossWeights):
    """``L_CE + lambda1 * L_attr + lambda2 * L_reg``."""
    return terms["ce"] + weights.lambda1 * terms["attr"] + weights.lambda2 * terms["reg"]


@contextmanager
def _term(name):
    try:
        yield
    except (InputError, ConfigurationError) as exc:
        raise type(exc)(f"{name}: {exc}") from exc


@dataclass
class Batch:
    pixels: torch.Tensor          # B x H x W x 3
    labels: torch.Tensor          # B, indices into ``vocab``
    attributes: list[str]         # annotated attribute per image
    vocab: object                 # ClassVocabulary


def total_loss(batch: Batch, model, weights: LossWeights, bank: TemplateBank, oracle: bool = False):
    """``L_CE + lambda1 * L_attr + lambda2 * L_reg``, each averaged over the batch.

    Returns the scalar and a dict with the three unweighted terms. With
    ``oracle=True`` the annotated attribute embedding replaces the extractor
    output inside the prompts.
    """
    backbone = model.backbone
    tau = weights.tau if weights.tau is not None else backbone.tau
    labels = torch.as_tensor(batch.labels, dtype=torch.long, device=backbone.device)
    names = batch.vocab.names
    if len(batch.attributes) != labels.shape[0]:
        raise InputError("every image in the batch needs an attribute annotation")
    for i, a in enumerate(batch.attributes):
        if not a:
            raise InputError(f"image {i} of the batch has no attribute annotation")
    targets = torch.stack([attribute_target(backbone, a) for a in batch.attributes]).to(backbone.dtype)

    out = model(batch.pixels, batch.vocab, attr_override=targets if oracle else None)
    terms = {}
    with _term("L_CE"):
        logits = class_logits(out["image"], out["text"], tau)
        terms["ce"] = F.cross_entropy(logits, labels)
    with _term("L_attr"):
        terms["attr"] = attr_loss(out["attr"], targets, weights.f).mean()
    with _term("L_reg"):
        learned = out["text"][torch.arange(labels.shape[0], device=labels.device), labels]
        regs = [reg_loss(learned[i], a, names[int(y)], bank, weights.g)
                for i, (a, y) in enumerate(zip(batch.attributes, labels))]
        terms["reg"] = torch.stack(regs).mean()
    return combine(terms, weights), terms
