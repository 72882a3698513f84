"""Offline attribute annotation: VQA candidates, image-text scoring, JSONL persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import string
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .errors import ConfigurationError, InputError, TransportError

log = logging.getLogger(__name__)

CLS = "[cls]"
SCORE_TEMPLATE = "A photo of a {attribute} {class_name}"
CLIENT_KINDS = ("external-vqa", "deterministic-stub")


@dataclass(frozen=True)
class AnnotationTemplate:
    """A per-dataset VQA question with a ``[cls]`` slot.

    One shipped template (fgvc_aircraft) has no class slot at all, so the
    check is "at most once".
    """

    dataset: str
    template: str

    def __post_init__(self):
        if self.template.count(CLS) > 1:
            raise ConfigurationError(f"template for {self.dataset!r} contains [cls] more than once")

    def render(self, class_name: str) -> str:
        return self.template.replace(CLS, class_name.replace("_", " "))


def load_templates(path=None) -> dict[str, AnnotationTemplate]:
    if path is None:
        text = resources.files("attrprompt.resources").joinpath("vqa_templates.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {name: AnnotationTemplate(name, t) for name, t in json.loads(text).items()}


@dataclass(frozen=True)
class VqaClientConfig:
    client_kind: str = "deterministic-stub"
    seeds: tuple = (0, 1, 2)
    repetition_penalty: float = 100.0

    def __post_init__(self):
        if self.client_kind not in CLIENT_KINDS:
            raise ConfigurationError(f"client_kind must be one of {CLIENT_KINDS}, got {self.client_kind!r}")
        if len(self.seeds) < 1:
            raise ConfigurationError("at least one seed is needed (one candidate per seed)")
        if self.repetition_penalty <= 0:
            raise ConfigurationError("repetition_penalty must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


class VqaClient(Protocol):
    def generate(self, image, question: str, *, seed: int, class_name: str,
                 repetition_penalty: float) -> str: ...

    def health_check(self) -> bool: ...


STUB_WORDS = ("red", "green", "blue", "yellow", "white", "black", "brown", "orange",
              "pink", "purple", "striped", "spotted", "small", "large", "round", "shiny")


class StubVqaClient:
    """Offline stand-in whose answer is a pure function of (image id, class name, seed).

    ``fail_ids`` raise :class:`TransportError` for those images, ``blank_ids``
    answer with an empty string; both exist to exercise error paths.
    """

    def __init__(self, words=STUB_WORDS, fail_ids=(), blank_ids=()):
        self.words = tuple(words)
        self.fail_ids = set(fail_ids)
        self.blank_ids = set(blank_ids)
        self.calls = 0

    def generate(self, image, question, *, seed, class_name, repetition_penalty=100.0):
        self.calls += 1
        if image.id in self.fail_ids:
            raise TransportError(f"stub transport failure for {image.id}")
        if image.id in self.blank_ids:
            return ""
        digest = hashlib.sha256(f"{image.id}\x00{class_name}\x00{seed}".encode()).digest()
        word = self.words[int.from_bytes(digest[:8], "big") % len(self.words)]
        return f"{word.capitalize()}."

    def health_check(self) -> bool:
        return True


class Blip2VqaClient:
    """BLIP-2 VQA via ``transformers``, loaded lazily from a local checkpoint."""

    def __init__(self, checkpoint, device: str = "cpu", max_new_tokens: int = 10):
        self.checkpoint = checkpoint
        self.device = device
        self.max_new_tokens = max_new_tokens
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            from transformers import Blip2ForConditionalGeneration, Blip2Processor

            self._processor = Blip2Processor.from_pretrained(self.checkpoint)
            self._model = Blip2ForConditionalGeneration.from_pretrained(self.checkpoint).to(self.device).eval()

    def health_check(self) -> bool:
        try:
            self._load()
        except Exception as exc:
            log.error("VQA model failed to load from %s: %s", self.checkpoint, exc)
            return False
        return True

    def generate(self, image, question, *, seed, class_name, repetition_penalty=100.0):
        from PIL import Image

        try:
            self._load()
            if image.path:
                pil = Image.open(image.path).convert("RGB")
            else:
                arr = np.clip(np.asarray(image.pixels), 0.0, 1.0)
                pil = Image.fromarray((arr * 255).astype(np.uint8))
            inputs = self._processor(images=pil, text=f"Question: {question} Answer:", return_tensors="pt")
            inputs = inputs.to(self.device)
            torch.manual_seed(seed)
            with torch.no_grad():
                ids = self._model.generate(**inputs, do_sample=True, max_new_tokens=self.max_new_tokens,
                                           repetition_penalty=repetition_penalty)
            return self._processor.batch_decode(ids, skip_special_tokens=True)[0]
        except (OSError, RuntimeError) as exc:
            raise TransportError(f"VQA generation failed for {image.id}: {exc}") from exc


def make_client(cfg: VqaClientConfig, checkpoint=None, device="cpu"):
    if cfg.client_kind == "deterministic-stub":
        return StubVqaClient()
    if checkpoint is None:
        raise ConfigurationError("the external VQA client needs a local checkpoint path")
    return Blip2VqaClient(checkpoint, device=device)


_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_candidate(text: str) -> str:
    """Lowercase, drop punctuation, keep the first word."""
    words = text.lower().translate(_PUNCT).split()
    return words[0] if words else ""


def _with_retries(fn, retries, backoff):
    for attempt in range(retries + 1):
        try:
            return fn()
        except TransportError:
            if attempt == retries:
                raise
            time.sleep(backoff * 2 ** attempt)


def generate_candidates(img, class_name: str, tmpl: AnnotationTemplate, cfg: VqaClientConfig, client,
                        retries: int = 2, backoff: float = 0.0) -> list[str]:
    """One normalized candidate per seed; empty answers are dropped with a warning."""
    if not class_name or not class_name.strip():
        raise InputError("class_name must be non-empty")
    question = tmpl.render(class_name)
    out = []
    for seed in cfg.seeds:
        raw = _with_retries(lambda: client.generate(img, question, seed=seed, class_name=class_name,
                                                    repetition_penalty=cfg.repetition_penalty),
                            retries, backoff)
        cand = normalize_candidate(raw or "")
        if cand:
            out.append(cand)
        else:
            log.warning("empty VQA answer for %s (seed %d) dropped", img.id, seed)
    if not out:
        raise InputError(f"VQA produced no usable candidate for image {img.id!r}")
    return out


def score_candidate(img, attribute: str, class_name: str, backbone) -> float:
    """Raw cosine between the plain image embedding and "A photo of a {attribute} {class}"."""
    text = " ".join(SCORE_TEMPLATE.format(attribute=attribute, class_name=class_name.replace("_", " ")).split())
    with torch.no_grad():
        emb = backbone.encode_image(img)[0]
        txt = backbone.encode_text(backbone.embed_tokens(text))
        return float(torch.nn.functional.cosine_similarity(emb, txt, dim=0))


def select_attribute(cands, scores) -> str:
    """Highest-scoring candidate; the lowest index wins ties."""
    if len(cands) == 0 or len(cands) != len(scores):
        raise InputError("need equal, non-zero numbers of candidates and scores")
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return cands[best]


@dataclass
class AttributeAnnotation:
    image_id: str
    class_name: str
    candidates: list = field(default_factory=list)  # (attribute, score) pairs
    selected: str = ""
    swapped: bool = False

    def __post_init__(self):
        self.candidates = [(str(a), float(s)) for a, s in self.candidates]
        if not self.candidates:
            raise InputError(f"annotation for {self.image_id!r} has no candidates")
        if not all(np.isfinite(s) for _, s in self.candidates):
            raise InputError(f"annotation for {self.image_id!r} has a non-finite score")
        attrs = [a for a, _ in self.candidates]
        if self.selected not in attrs:
            raise InputError(f"selected attribute {self.selected!r} is not among the candidates")
        top = max(s for _, s in self.candidates)
        if max(s for a, s in self.candidates if a == self.selected) != top:
            raise InputError(f"selected attribute {self.selected!r} does not have the maximal score")

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "class_name": self.class_name,
                           "candidates": [{"attr": a, "score": s} for a, s in self.candidates],
                           "selected": self.selected, "swapped": self.swapped})

    @classmethod
    def from_json(cls, line: str) -> "AttributeAnnotation":
        d = json.loads(line)
        return cls(d["image_id"], d["class_name"], [(c["attr"], c["score"]) for c in d["candidates"]],
                   d["selected"], bool(d.get("swapped", False)))


def load_annotations(path) -> dict[str, AttributeAnnotation]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ann = AttributeAnnotation.from_json(line)
                out[ann.image_id] = ann
    return out


def annotate_image(record, tmpl, cfg, client, backbone, **retry) -> AttributeAnnotation:
    cands = generate_candidates(record.image, record.class_name, tmpl, cfg, client, **retry)
    scores = [score_candidate(record.image, a, record.class_name, backbone) for a in cands]
    return AttributeAnnotation(record.image.id, record.class_name, list(zip(cands, scores)),
                               select_attribute(cands, scores))


def swap_across_classes(annotations: list[AttributeAnnotation]) -> list[AttributeAnnotation]:
    """Give every image the annotation of an image from the next class (cyclic).

    Used for the mislabeled-attribute experiment; donors are drawn round-robin
    so each class's attributes end up spread over another class.
    """
    classes = sorted({a.class_name for a in annotations})
    if len(classes) < 2:
        raise InputError("attribute swapping needs at least two classes")
    by_class = {c: [a for a in annotations if a.class_name == c] for c in classes}
    out, used = [], {c: 0 for c in classes}
    for ann in annotations:
        donor_class = classes[(classes.index(ann.class_name) + 1) % len(classes)]
        pool = by_class[donor_class]
        donor = pool[used[donor_class] % len(pool)]
        used[donor_class] += 1
        out.append(AttributeAnnotation(ann.image_id, ann.class_name, donor.candidates, donor.selected, swapped=True))
    return out


@dataclass
class AnnotationResult:
    written: int
    skipped: int
    failures: list  # (image_id, error message)
    failure_path: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def annotate_dataset(records, template: AnnotationTemplate, cfg: VqaClientConfig, client, backbone, out_path,
                     force: bool = False, swap: bool = False, retries: int = 2, backoff: float = 0.0,
                     workers: int = 1) -> AnnotationResult:
    """Annotate ``records`` (objects with ``.image`` and ``.class_name``) into a JSONL file.

    Already-present image ids are skipped unless ``force``. Failed images are
    listed in ``<out>.failures.jsonl``; completed records are still written.
    """
    if not client.health_check():
        raise TransportError("VQA client failed its health check")
    out_path = Path(out_path)
    done = set() if force or not out_path.exists() else set(load_annotations(out_path))
    todo = [r for r in records if r.image.id not in done]

    def work(r):
        try:
            return annotate_image(r, template, cfg, client, backbone, retries=retries, backoff=backoff), None
        except (TransportError, InputError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(r) for r in todo]

    new = [ann for ann, _ in results if ann is not None]
    failures = [(r.image.id, err) for r, (_, err) in zip(todo, results) if err is not None]
    if swap and new:
        new = swap_across_classes(new)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w" if force else "a", encoding="utf-8") as fh:
        for ann in new:
            fh.write(ann.to_json() + "\n")
    failure_path = out_path.with_name(out_path.name + ".failures.jsonl")
    if failures:
        with open(failure_path, "w", encoding="utf-8") as fh:
            for image_id, err in failures:
                fh.write(json.dumps({"image_id": image_id, "error": err}) + "\n")
    elif failure_path.exists():
        failure_path.unlink()
    return AnnotationResult(len(new), len(records) - len(todo), failures, failure_path if failures else None)
