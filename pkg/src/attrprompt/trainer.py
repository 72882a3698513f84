"""Few-shot training loop, checkpoints and ablation grids."""

from __future__ import annotations

import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .backbone.base import stack_images
from .data import FewShotDataset, random_resized_crop_flip, sample_few_shot  # noqa: F401  (re-export)
from .errors import ConfigurationError, TrainingAborted
from .model import PromptModel
from .objective import Batch, LossWeights, TemplateBank, TemplatePool, total_loss
from .prompts import ClassVocabulary

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0
    shots: int = 16
    seed: int = 0
    augment: bool = True
    warmup_steps: int = 0
    grad_clip: float | None = None
    checkpoint_interval: int = 0
    oracle: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "shots"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigurationError(f"train.lr must be positive, got {self.lr}")
        if self.momentum < 0 or self.weight_decay < 0 or self.warmup_steps < 0 or self.checkpoint_interval < 0:
            raise ConfigurationError("train.momentum, weight_decay, warmup_steps and checkpoint_interval must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("train.grad_clip must be positive when set")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("train.max_steps must be >= 1 when set")


@dataclass
class ModelConfig:
    context_length: int = 4
    heads: int = 4
    conditioning: str = "multihead"
    residual: bool = True
    visual_tokens: int = 4
    visual_depth: int = 9
    extractor_hidden: int | None = None
    zero_init_attention: bool = True
    visual_init_std: float = 0.02
    context_init_std: float = 0.02

    def __post_init__(self):
        if self.context_length < 1:
            raise ConfigurationError("model.context_length must be >= 1")
        if self.heads < 1:
            raise ConfigurationError("model.heads must be >= 1")
        if self.conditioning not in ("multihead", "additive"):
            raise ConfigurationError("model.conditioning must be 'multihead' or 'additive'")
        if self.visual_tokens < 0 or self.visual_depth < 1:
            raise ConfigurationError("model.visual_tokens must be >= 0 and model.visual_depth >= 1")

    def build(self, backbone, seed: int = 0) -> PromptModel:
        return PromptModel(backbone, seed=seed, **asdict(self))


@dataclass
class TrainState:
    model: PromptModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    fingerprint: str = ""
    metrics: list = field(default_factory=list)


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator).tolist()
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def make_optimizer(model, config: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def train(config: TrainConfig, dataset: FewShotDataset, model: PromptModel, weights: LossWeights,
          pool: TemplatePool | None = None, bank: TemplateBank | None = None,
          checkpoint_path=None, metrics_path=None, config_hash: str = "") -> TrainState:
    """Optimize the four trainable groups on ``dataset`` with SGD.

    Aborts with :class:`TrainingAborted` on a non-finite loss term or if the
    frozen backbone's fingerprint changes between epochs.
    """
    backbone = model.backbone
    if bank is None:
        bank = TemplateBank(backbone, pool if pool is not None else TemplatePool.default())
    vocab = ClassVocabulary(dataset.base_classes, backbone)
    label_of = {name: i for i, name in enumerate(vocab.names)}
    for r in dataset.records:
        if not r.attribute:
            raise ConfigurationError(f"training image {r.image.id!r} has no attribute annotation")

    pixels = stack_images([r.image for r in dataset.records], dtype=backbone.dtype)
    labels = torch.tensor([label_of[r.class_name] for r in dataset.records])
    attributes = [r.attribute for r in dataset.records]

    optimizer = make_optimizer(model, config)
    state = TrainState(model, optimizer, fingerprint=backbone.fingerprint_frozen_weights())
    gen = torch.Generator().manual_seed(config.seed)
    metrics_file = open(metrics_path, "w") if metrics_path else None
    model.train()
    try:
        for epoch in range(config.epochs):
            for idx in _batches(len(labels), config.batch_size, gen):
                batch_px = pixels[idx]
                if config.augment:
                    batch_px = random_resized_crop_flip(batch_px, gen)
                batch = Batch(batch_px, labels[idx], [attributes[i] for i in idx], vocab)
                _set_lr(optimizer, config, state.step)
                optimizer.zero_grad()
                loss, terms = total_loss(batch, model, weights, bank, oracle=config.oracle)
                for name, value in (("L_CE", terms["ce"]), ("L_attr", terms["attr"]),
                                    ("L_reg", terms["reg"]), ("total", loss)):
                    if not torch.isfinite(value):
                        raise TrainingAborted(f"non-finite {name} at step {state.step}", step=state.step, term=name)
                loss.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                record = {"step": state.step, "epoch": epoch, "L_CE": terms["ce"].item(),
                          "L_attr": terms["attr"].item(), "L_reg": terms["reg"].item(), "total": loss.item()}
                state.metrics.append(record)
                if metrics_file:
                    metrics_file.write(json.dumps(record) + "\n")
                state.step += 1
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
            state.epoch = epoch + 1
            _verify_frozen(state, backbone)
            log.info("epoch %d: total=%.4f", epoch, state.metrics[-1]["total"])
            if checkpoint_path and config.checkpoint_interval and state.epoch % config.checkpoint_interval == 0:
                save_checkpoint(checkpoint_path, model, state, config_hash=config_hash)
            if config.max_steps is not None and state.step >= config.max_steps:
                break
    finally:
        if metrics_file:
            metrics_file.close()
        model.eval()
        bank.save()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, state, config_hash=config_hash)
    return state


def _set_lr(optimizer, config, step):
    lr = config.lr
    if config.warmup_steps and step < config.warmup_steps:
        lr = config.lr * (step + 1) / config.warmup_steps
    for group in optimizer.param_groups:
        group["lr"] = lr


def _verify_frozen(state, backbone):
    current = backbone.fingerprint_frozen_weights()
    if current != state.fingerprint:
        raise TrainingAborted(f"frozen backbone weights changed during epoch {state.epoch}", step=state.step)


# checkpoints --------------------------------------------------------------------

def model_hparams(model: PromptModel) -> dict:
    cond = model.conditioner
    return {
        "context_length": model.context.length,
        "heads": getattr(cond, "heads", 4),
        "conditioning": model.conditioning,
        "residual": getattr(cond, "residual", True),
        "visual_tokens": model.visual_prompts.count,
        "visual_depth": model.visual_prompts.depth,
        "extractor_hidden": model.extractor.layer1.out_features,
    }


def save_checkpoint(path, model: PromptModel, state: TrainState | None = None, config_hash: str = ""):
    payload = {
        "trainable": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "hparams": model_hparams(model),
        "config_hash": config_hash,
        "backbone_fingerprint": model.backbone.fingerprint_frozen_weights(),
        "step": state.step if state else 0,
        "epoch": state.epoch if state else 0,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, backbone) -> tuple[PromptModel, dict]:
    """Rebuild a :class:`PromptModel`; refuses a backbone whose fingerprint differs."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    fp = backbone.fingerprint_frozen_weights()
    if payload["backbone_fingerprint"] != fp:
        raise ConfigurationError(
            f"checkpoint {path} was trained against a different backbone "
            f"({payload['backbone_fingerprint'][:12]} != {fp[:12]})")
    model = PromptModel(backbone, **payload["hparams"])
    model.load_state_dict(payload["trainable"])
    model.eval()
    return model, payload


# ablation grids -----------------------------------------------------------------

GRID_KEYS = {
    "f": ("loss", "f"),
    "g": ("loss", "g"),
    "lambda1": ("loss", "lambda1"),
    "lambda2": ("loss", "lambda2"),
    "conditioning": ("model", "conditioning"),
    "K": ("model", "visual_depth"),
    "n": ("model", "visual_tokens"),
}
ROW_KEYS = ("f", "g", "lambda1", "lambda2", "conditioning", "K")


def expand_grid(grid: dict) -> list[dict]:
    if not grid:
        return []
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown ablation keys {sorted(unknown)}; allowed: {sorted(GRID_KEYS)}")
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def run_ablation_grid(base_config, grid: dict, run_cell) -> list[dict]:
    """Run ``run_cell(config)`` for every cell of ``grid`` over ``base_config``.

    ``run_cell`` returns an object with ``base_acc``, ``novel_acc`` and ``hm``.
    A failing cell is recorded with its error and the grid carries on.
    """
    rows = []
    for cell in expand_grid(grid):
        overrides = {}
        for key, value in cell.items():
            section, name = GRID_KEYS[key]
            overrides.setdefault(section, {})[name] = value
        row = {}
        try:
            config = base_config.with_overrides(overrides)
            row.update(_row_key(config))
            row["config_hash"] = config.hash()
            report = run_cell(config)
            row.update(base=report.base_acc, novel=report.novel_acc, hm=report.hm, error=None)
        except Exception as exc:  # one broken cell must not sink the grid
            log.warning("ablation cell %s failed: %s", cell, exc)
            row.setdefault("config_hash", None)
            row.update({k: v for k, v in cell.items() if k in ROW_KEYS})
            row.update(base=None, novel=None, hm=None, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def _row_key(config):
    return {"f": config.loss.f, "g": config.loss.g, "lambda1": config.loss.lambda1,
            "lambda2": config.loss.lambda2, "conditioning": config.model.conditioning,
            "K": config.model.visual_depth}

