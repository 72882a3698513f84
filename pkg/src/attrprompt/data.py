"""Labelled image records, few-shot sampling, augmentation and the synthetic rig."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .backbone.base import ImageInput
from .errors import InputError


@dataclass
class Record:
    image: ImageInput
    class_name: str
    attribute: str | None = None


@dataclass
class FewShotDataset:
    """Training records drawn from base classes only, plus the class partition."""

    records: list[Record]
    base_classes: list[str]
    novel_classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise InputError(f"base and novel classes overlap: {sorted(overlap)}")
        base = set(self.base_classes)
        for r in self.records:
            if r.class_name not in base:
                raise InputError(f"training record {r.image.id!r} has non-base class {r.class_name!r}")

    def __len__(self):
        return len(self.records)


def group_by_class(records):
    groups = defaultdict(list)
    for r in records:
        groups[r.class_name].append(r)
    return groups


def sample_few_shot(records, base_classes, shots: int, seed: int = 0, novel_classes=()) -> FewShotDataset:
    """Draw exactly ``shots`` records per base class, deterministically in ``seed``."""
    if shots < 1:
        raise InputError("shots must be >= 1")
    groups = group_by_class(records)
    rng = np.random.default_rng(seed)
    chosen = []
    for name in base_classes:
        pool = groups.get(name, [])
        if len(pool) < shots:
            raise InputError(f"class {name!r} has {len(pool)} images, fewer than {shots} shots")
        idx = rng.choice(len(pool), size=shots, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    return FewShotDataset(chosen, list(base_classes), list(novel_classes))


def sample_per_class(records, per_class: int, seed: int = 0):
    """Up to ``per_class`` random records from each class (e.g. 50 for the confidence study)."""
    rng = np.random.default_rng(seed)
    out = []
    for name, pool in group_by_class(records).items():
        k = min(per_class, len(pool))
        out.extend(pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False)))
    return out


def random_resized_crop_flip(pixels: torch.Tensor, generator: torch.Generator,
                             scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)) -> torch.Tensor:
    """Random-resized-crop plus horizontal flip for a ``B x H x W x 3`` batch."""
    b, h, w, _ = pixels.shape
    out = []
    for img in pixels:
        area = h * w
        crop = None
        for _ in range(10):
            target = area * (scale[0] + (scale[1] - scale[0]) * torch.rand(1, generator=generator).item())
            log_r = math.log(ratio[0]) + (math.log(ratio[1]) - math.log(ratio[0])) * torch.rand(
                1, generator=generator).item()
            aspect = math.exp(log_r)
            cw = int(round(math.sqrt(target * aspect)))
            ch = int(round(math.sqrt(target / aspect)))
            if 0 < cw <= w and 0 < ch <= h:
                top = int(torch.randint(0, h - ch + 1, (1,), generator=generator))
                left = int(torch.randint(0, w - cw + 1, (1,), generator=generator))
                crop = img[top:top + ch, left:left + cw]
                break
        if crop is None:
            crop = img
        chw = crop.permute(2, 0, 1).unsqueeze(0)
        resized = F.interpolate(chw, size=(h, w), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
        if torch.rand(1, generator=generator).item() < 0.5:
            resized = resized.flip(1)
        out.append(resized)
    return torch.stack(out)


# synthetic rig ------------------------------------------------------------------

_PROTOTYPES: dict = {}


def aligned_prototype(backbone, text: str, steps: int = 150, lr: float = 0.1, seed: int = 0) -> np.ndarray:
    """Pixels whose plain image embedding points along ``T(text)``.

    Gives the random toy backbone a CLIP-like image/text alignment so that
    zero-shot transfer and attribute-confidence effects exist on the rig.
    Results are memoized per (backbone weights, text, steps, lr, seed).
    """
    key = (backbone.fingerprint_frozen_weights(), text, steps, lr, seed)
    if key not in _PROTOTYPES:
        _PROTOTYPES[key] = _optimize_prototype(backbone, text, steps, lr, seed)
    return _PROTOTYPES[key].copy()


def _optimize_prototype(backbone, text, steps, lr, seed):
    gen = torch.Generator().manual_seed(seed)
    size = backbone.image_size
    target = backbone.encode_text(backbone.embed_tokens(text)).detach()
    target = target / target.norm()
    x = (0.5 * torch.randn(1, size, size, 3, generator=gen, dtype=backbone.dtype)).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        emb = backbone.encode_image(x)[0]
        loss = -(emb / emb.norm()) @ target + 1e-3 * x.pow(2).mean()
        loss.backward()
        opt.step()
    return x.detach()[0].numpy()


@dataclass
class SyntheticRig:
    backbone: object
    records: list[Record]
    base_classes: list[str]
    novel_classes: list[str]
    attributes: dict[str, list[str]]


def make_rig(backbone, classes, attributes, per_class: int = 4, noise: float = 0.1, n_base: int | None = None,
             prompt: str = "a photo of a [a] [cls]", seed: int = 0, steps: int = 150) -> SyntheticRig:
    """Build an aligned toy dataset.

    Every class gets one prototype per attribute in ``attributes[class]``;
    images are prototypes plus Gaussian noise and carry that attribute as
    their annotation. The first ``n_base`` classes are base, the rest novel.
    """
    from .objective import fill_template

    rng = np.random.default_rng(seed)
    records = []
    for ci, name in enumerate(classes):
        attrs = attributes[name]
        protos = [aligned_prototype(backbone, fill_template(prompt, a, name), steps=steps, seed=seed + 97 * ci + j)
                  for j, a in enumerate(attrs)]
        for k in range(per_class):
            j = k % len(attrs)
            pixels = protos[j] + noise * rng.standard_normal(protos[j].shape)
            records.append(Record(ImageInput(pixels, f"{name}-{k}"), name, attrs[j]))
    n_base = len(classes) if n_base is None else n_base
    return SyntheticRig(backbone, records, list(classes[:n_base]), list(classes[n_base:]), dict(attributes))


# The learned prompt is [h_1, h_2, attr, class tokens]; this template has the
# same layout on a character-level encoder ("a", " ", attribute, class), so the
# template regularizer can actually reach zero on the toy backbone. Images in
# the synthetic datasets are aligned to it for the same reason.
SYNTHETIC_TEMPLATE = "a [a][cls]"
OVERFIT_TEMPLATE = SYNTHETIC_TEMPLATE


def overfit_rig(backbone=None, per_class: int = 4, seed: int = 0) -> SyntheticRig:
    """Two well-separated classes with single-character attributes, for capacity checks.

    Pair with ``TemplatePool([OVERFIT_TEMPLATE])`` and ``ModelConfig(context_length=2,
    visual_tokens=1, visual_depth=1)``.
    """
    if backbone is None:
        from .backbone import SyntheticBackbone
        backbone = SyntheticBackbone(seed=0)
    return make_rig(backbone, ["kiwi", "zz"], {"kiwi": ["r"], "zz": ["g"]}, per_class=per_class,
                    prompt=OVERFIT_TEMPLATE, seed=seed)


SYNTHETIC_CLASSES = ["kiwi", "zz", "ox", "jam"]
SYNTHETIC_ATTRIBUTES = {"kiwi": ["r", "b"], "zz": ["g", "y"], "ox": ["r", "g"], "jam": ["b", "y"]}


def synthetic_splits(backbone, train_per_class: int = 8, test_per_class: int = 8, n_base: int = 2,
                     seed: int = 0):
    """Train/test records over :data:`SYNTHETIC_CLASSES`; the first ``n_base`` classes are base.

    Returns ``(train, test, base_classes, novel_classes)``. Both splits share
    prototypes but draw independent noise. Train with
    ``TemplatePool([SYNTHETIC_TEMPLATE])`` and a two-token context.
    """
    rig = make_rig(backbone, SYNTHETIC_CLASSES, SYNTHETIC_ATTRIBUTES, per_class=train_per_class + test_per_class,
                   n_base=n_base, prompt=SYNTHETIC_TEMPLATE, seed=seed)
    train, test = [], []
    for name, group in group_by_class(rig.records).items():
        train.extend(group[:train_per_class])
        test.extend(group[train_per_class:])
    return train, test, rig.base_classes, rig.novel_classes
