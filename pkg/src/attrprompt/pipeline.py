"""End-to-end steps shared by the command line and the demo scripts."""

from __future__ import annotations

import logging
from pathlib import Path

from .annotation import (AnnotationTemplate, VqaClientConfig, annotate_dataset, load_annotations,
                         load_templates, make_client)
from .backbone import CLIP_MEAN, CLIP_STD
from .config import ExperimentConfig, build_backbone, cache_dir, template_pool
from .data import Record, sample_few_shot, synthetic_splits
from .errors import ConfigurationError, InputError
from .evaluator import eval_base_to_novel, eval_domain_shift, eval_few_shot
from .objective import TemplateBank
from .manifest import load_manifest
from .trainer import load_checkpoint, train

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
# the synthetic dataset has no VQA template of its own; it borrows the generic one
SYNTHETIC_TEMPLATE_KEY = "imagenet"


def load_split(config: ExperimentConfig, backbone, split: str, manifest=None):
    """``(records, base_classes, novel_classes)`` for the configured dataset."""
    if manifest is None and config.manifest is None:
        if config.dataset != SYNTHETIC:
            raise ConfigurationError(f"dataset {config.dataset!r} needs a manifest path")
        train_recs, test_recs, base, novel = synthetic_splits(backbone, seed=config.synthetic.seed)
        return (train_recs if split == "train" else test_recs), base, novel
    m = load_manifest(manifest or config.manifest)
    pretrained = config.backbone != SYNTHETIC
    mean, std = (CLIP_MEAN, CLIP_STD) if pretrained else ((0.0,) * 3, (1.0,) * 3)
    size = backbone.image_size
    return m.records(split, size, mean, std), m.base_classes, m.novel_classes


def attach_annotations(records, path, require_all: bool = True) -> list[Record]:
    """Records carrying the selected attribute from ``path``.

    With ``require_all=False`` unannotated images are dropped instead of
    raising (analyses run on whatever subset was annotated).
    """
    anns = load_annotations(path)
    out = []
    for r in records:
        ann = anns.get(r.image.id)
        if ann is None:
            if require_all:
                raise InputError(f"no annotation for training image {r.image.id!r} in {path}")
            continue
        out.append(Record(r.image, r.class_name, ann.selected))
    if not out:
        raise InputError(f"none of the images are annotated in {path}")
    return out


def annotation_template(dataset: str) -> AnnotationTemplate:
    templates = load_templates()
    key = SYNTHETIC_TEMPLATE_KEY if dataset == SYNTHETIC else dataset
    if key not in templates:
        raise ConfigurationError(f"no VQA template for dataset {dataset!r}; known: {sorted(templates)}")
    return templates[key]


def run_annotation(config: ExperimentConfig, out, dataset=None, stub=False, swap=False, force=False,
                   backbone=None, client=None):
    backbone = backbone or build_backbone(config)
    dataset = dataset or config.dataset
    records, base, _ = load_split(config, backbone, "train")
    records = [r for r in records if r.class_name in set(base)]
    kind = "deterministic-stub" if stub else config.vqa.client_kind
    cfg = VqaClientConfig(kind, tuple(config.vqa.seeds), config.vqa.repetition_penalty)
    client = client or make_client(cfg, config.vqa.checkpoint)
    return annotate_dataset(records, annotation_template(dataset), cfg, client, backbone, out,
                            force=force, swap=swap)


def run_training(config: ExperimentConfig, annotations=None, out=None, metrics=None, backbone=None):
    """Sample the few-shot set, train, and (optionally) write the checkpoint."""
    backbone = backbone or build_backbone(config)
    records, base, novel = load_split(config, backbone, "train")
    records = [r for r in records if r.class_name in set(base)]
    shots = config.train.shots
    if config.manifest is None:
        # the built-in synthetic set is small; use all of it rather than fail on the 16-shot default
        available = min(sum(r.class_name == c for r in records) for c in base)
        if shots > available:
            log.warning("synthetic dataset has %d images per class; using %d shots", available, available)
            shots = available
    dataset = sample_few_shot(records, base, shots, seed=config.train.seed, novel_classes=novel)
    if annotations is not None:
        dataset.records = attach_annotations(dataset.records, annotations)
    model = config.model.build(backbone, seed=config.train.seed)
    bank = TemplateBank(backbone, template_pool(config), cache_dir=cache_dir() / "templates")
    state = train(config.train, dataset, model, config.loss, bank=bank,
                  checkpoint_path=out, metrics_path=metrics, config_hash=config.hash())
    return state


def run_evaluation(config: ExperimentConfig, checkpoint, protocol="base-novel", targets=(), backbone=None,
                   model=None):
    backbone = backbone or build_backbone(config)
    if model is None:
        model, _ = load_checkpoint(checkpoint, backbone)
    test, base, novel = load_split(config, backbone, "test")
    if protocol == "base-novel":
        return eval_base_to_novel(model, test, base, novel, dataset=config.dataset, config_hash=config.hash(),
                                  tau=config.loss.tau)
    if protocol == "domain-shift":
        shifted = {Path(t).stem: load_split(config, backbone, "test", manifest=t)[0] for t in targets}
        return eval_domain_shift(model, base, shifted, tau=config.loss.tau)
    if protocol == "few-shot":
        return eval_few_shot(model, test, base + novel, dataset=config.dataset, tau=config.loss.tau)
    raise ConfigurationError(f"unknown protocol {protocol!r}")


def train_and_evaluate(config: ExperimentConfig, annotations=None, backbone=None):
    """One ablation cell: train on base classes, report base-to-novel accuracy."""
    state = run_training(config, annotations=annotations, backbone=backbone)
    return run_evaluation(config, None, "base-novel", backbone=state.model.backbone, model=state.model)
