"""Evaluation protocols, harmonic-mean reporting and interpretability analyses."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .backbone.base import ImageInput, stack_images
from .data import sample_per_class
from .errors import InputError
from .extractor import attribute_target
from .objective import class_logits, fill_template
from .prompts import ClassVocabulary


def harmonic_mean(base: float, novel: float) -> float:
    """``2ab / (a + b)``, defined as 0 when either accuracy is 0."""
    if base < 0 or novel < 0:
        raise InputError("accuracies must be non-negative")
    if base == 0 or novel == 0:
        return 0.0
    return 2 * base * novel / (base + novel)


@dataclass
class EvalReport:
    base_acc: float
    novel_acc: float
    hm: float
    per_class: dict = field(default_factory=dict)
    dataset: str = ""
    config_hash: str = ""

    def __post_init__(self):
        for name in ("base_acc", "novel_acc", "hm"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise InputError(f"{name} must lie in [0, 100], got {v}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AccuracyReport:
    accuracy: float
    per_class: dict = field(default_factory=dict)
    dataset: str = ""


@dataclass
class Prediction:
    indices: torch.Tensor       # (B,) argmax class index, lowest index on ties
    names: list
    probs: torch.Tensor         # (B, C)


def _pixels(images, dtype):
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    if isinstance(images, ImageInput):
        images = [images]
    return stack_images(images, dtype=dtype)


@torch.no_grad()
def classify(images, model, vocab: ClassVocabulary, tau: float | None = None, batch_size: int = 64) -> Prediction:
    """Classify images against ``vocab`` using only the trained prompt learner.

    Takes images, never annotation records: the attribute row comes from the
    extractor. ``vocab`` may hold class names never seen during training.
    """
    backbone = model.backbone
    tau = backbone.tau if tau is None else tau
    pixels = _pixels(images, backbone.dtype)
    probs = []
    for i in range(0, pixels.shape[0], batch_size):
        out = model(pixels[i:i + batch_size], vocab)
        probs.append(class_logits(out["image"], out["text"], tau).softmax(dim=-1))
    probs = torch.cat(probs)
    indices = probs.argmax(dim=-1)  # first maximal entry
    return Prediction(indices, [vocab.names[int(i)] for i in indices], probs)


def accuracy(model, records, class_names, tau=None, dataset="") -> AccuracyReport:
    if not records:
        raise InputError(f"no test images for {dataset or 'this split'}")
    vocab = ClassVocabulary(class_names, model.backbone)
    unknown = {r.class_name for r in records} - set(class_names)
    if unknown:
        raise InputError(f"test images carry classes outside the vocabulary: {sorted(unknown)}")
    pred = classify([r.image for r in records], model, vocab, tau)
    hits = [p == r.class_name for p, r in zip(pred.names, records)]
    correct = {}
    for r, hit in zip(records, hits):
        correct.setdefault(r.class_name, []).append(hit)
    per_class = {name: 100.0 * sum(v) / len(v) for name, v in correct.items()}
    return AccuracyReport(100.0 * sum(hits) / len(hits), per_class, dataset)


def eval_base_to_novel(model, test_records, base_classes, novel_classes, dataset: str = "",
                       config_hash: str = "", tau=None) -> EvalReport:
    """Accuracy on base-class and novel-class test images, each against its own vocabulary."""
    if set(base_classes) & set(novel_classes):
        raise InputError("base and novel classes must be disjoint")
    base = [r for r in test_records if r.class_name in set(base_classes)]
    novel = [r for r in test_records if r.class_name in set(novel_classes)]
    if not base:
        raise InputError("base split has no test images")
    if not novel:
        raise InputError("novel split has no test images")
    b = accuracy(model, base, base_classes, tau)
    n = accuracy(model, novel, novel_classes, tau)
    return EvalReport(b.accuracy, n.accuracy, harmonic_mean(b.accuracy, n.accuracy),
                      {**b.per_class, **n.per_class}, dataset, config_hash)


@dataclass
class DomainShiftReport:
    per_target: dict
    average: float | None


def eval_domain_shift(model, source_classes, targets: dict, tau=None) -> DomainShiftReport:
    """Top-1 accuracy on each shifted target (all share the source vocabulary) and their mean."""
    per_target = {name: accuracy(model, recs, source_classes, tau, dataset=name).accuracy
                  for name, recs in targets.items()}
    avg = statistics.fmean(per_target.values()) if per_target else None
    return DomainShiftReport(per_target, avg)


def eval_few_shot(model, test_records, classes, dataset: str = "", tau=None) -> AccuracyReport:
    return accuracy(model, test_records, classes, tau, dataset)


def average_hm(reports) -> dict:
    """Both readings of an "Average" row, labelled.

    ``mean_of_hms`` averages per-dataset HMs; ``hm_of_means`` takes the HM of
    the averaged base and novel accuracies.
    """
    reports = list(reports)
    if not reports:
        return {"mean_of_hms": None, "hm_of_means": None, "base": None, "novel": None}
    base = statistics.fmean(r.base_acc for r in reports)
    novel = statistics.fmean(r.novel_acc for r in reports)
    return {"mean_of_hms": statistics.fmean(r.hm for r in reports), "hm_of_means": harmonic_mean(base, novel),
            "base": base, "novel": novel}


# interpretability analyses ------------------------------------------------------

@dataclass
class FidelityReport:
    mean_cosine: float
    per_image: dict


@torch.no_grad()
def analyze_attribute_fidelity(model, records, dataset: str = "") -> FidelityReport:
    """Mean cosine between the extractor's output and each image's held-out attribute target."""
    if not records:
        raise InputError("no annotated images to analyze")
    backbone = model.backbone
    missing = [r.image.id for r in records if not r.attribute]
    if missing:
        raise InputError(f"images without attribute annotations: {missing[:5]}")
    pixels = stack_images([r.image for r in records], dtype=backbone.dtype)
    pred = model.extractor(model.image_features(pixels))
    targets = torch.stack([attribute_target(backbone, r.attribute) for r in records]).to(pred.dtype)
    cos = F.cosine_similarity(pred, targets, dim=-1)
    per_image = {r.image.id: float(c) for r, c in zip(records, cos)}
    return FidelityReport(float(cos.mean()), per_image)


@dataclass
class ConfidenceRecord:
    image_id: str
    score_plain: float
    score_attr: float

    def __post_init__(self):
        for v in (self.score_plain, self.score_attr):
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise InputError(f"score {v} outside [-1, 1]")


def _summary(values):
    return {"mean": statistics.fmean(values), "std": statistics.pstdev(values),
            "median": statistics.median(values), "min": min(values), "max": max(values)}


@torch.no_grad()
def analyze_confidence(backbone, records, template_plain: str = "A photo of a [cls]",
                       template_attr: str = "A photo of a [a] [cls]", per_class: int | None = None,
                       seed: int = 0):
    """Plain-encoder cosine for a prompt without and with each image's attribute.

    Returns the per-image records and a summary with the fraction of images
    whose attribute-augmented score is higher. ``per_class`` subsamples (50 in
    the reference protocol).
    """
    if per_class is not None:
        records = sample_per_class(records, per_class, seed)
    if not records:
        raise InputError("no images to analyze")
    cache = {}

    def text_emb(text):
        if text not in cache:
            cache[text] = backbone.encode_text(backbone.embed_tokens(text))
        return cache[text]

    out = []
    for r in records:
        if r.attribute is None:
            raise InputError(f"image {r.image.id!r} has no attribute annotation")
        emb = backbone.encode_image(r.image)[0]
        plain = fill_template(template_plain.replace("[a]", ""), "", r.class_name)
        attr = fill_template(template_attr, r.attribute, r.class_name)
        sp = float(F.cosine_similarity(emb, text_emb(plain), dim=0))
        sa = float(F.cosine_similarity(emb, text_emb(attr), dim=0))
        out.append(ConfidenceRecord(r.image.id, sp, sa))
    summary = {"count": len(out),
               "fraction_attr_higher": sum(c.score_attr > c.score_plain for c in out) / len(out),
               "plain": _summary([c.score_plain for c in out]),
               "attr": _summary([c.score_attr for c in out])}
    return out, summary


def write_confidence_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "score_plain", "score_attr"])
        for c in records:
            w.writerow([c.image_id, repr(c.score_plain), repr(c.score_attr)])


def chance_level(num_classes: int) -> float:
    return 100.0 / num_classes if num_classes else math.nan
