"""Experiment configuration: strict YAML loading, overrides and stable hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .annotation import CLIENT_KINDS
from .backbone import BACKBONES
from .errors import ConfigurationError
from .objective import LossWeights
from .trainer import ModelConfig, TrainConfig

CACHE_ENV = "ATTRPROMPT_CACHE_DIR"


def cache_dir() -> Path:
    """Directory for cached encodings and downloads (``$ATTRPROMPT_CACHE_DIR`` or ~/.cache/attrprompt)."""
    root = os.environ.get(CACHE_ENV)
    path = Path(root) if root else Path.home() / ".cache" / "attrprompt"
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class SyntheticConfig:
    width: int = 8
    embed_dim: int = 8
    layers: int = 2
    heads: int = 2
    image_size: int = 8
    patch_size: int = 4
    max_text_length: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 8 <= self.width <= 16 or not 8 <= self.embed_dim <= 16:
            raise ConfigurationError("synthetic.width and synthetic.embed_dim must lie in [8, 16]")
        if self.width % self.heads:
            raise ConfigurationError("synthetic.heads must divide synthetic.width")
        if self.image_size % self.patch_size:
            raise ConfigurationError("synthetic.patch_size must divide synthetic.image_size")


@dataclass
class VqaConfig:
    client_kind: str = "deterministic-stub"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    repetition_penalty: float = 100.0
    checkpoint: str | None = None

    def __post_init__(self):
        if self.client_kind not in CLIENT_KINDS:
            raise ConfigurationError(f"vqa.client_kind must be one of {CLIENT_KINDS}")
        if not self.seeds:
            raise ConfigurationError("vqa.seeds must be non-empty")
        if self.repetition_penalty <= 0:
            raise ConfigurationError("vqa.repetition_penalty must be positive")


SECTIONS = {"model": ModelConfig, "loss": LossWeights, "train": TrainConfig,
            "synthetic": SyntheticConfig, "vqa": VqaConfig}
PATH_KEYS = ("checkpoint", "manifest", "annotations", "template_pool", "output_dir")
MUST_EXIST = ("checkpoint", "manifest", "template_pool")


@dataclass
class ExperimentConfig:
    backbone: str = "synthetic"
    checkpoint: str | None = None       # local pretrained weights (pretrained-vitb16)
    device: str = "cpu"                 # torch device for backbone and prompt learner, e.g. "cuda"
    dataset: str = "synthetic"
    manifest: str | None = None
    annotations: str | None = None
    template_pool: str | None = None    # None: the bundled 80-template pool (synthetic: its one template)
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    vqa: VqaConfig = field(default_factory=VqaConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.backbone == "pretrained-vitb16" and not self.checkpoint:
            raise ConfigurationError("checkpoint: required when backbone is pretrained-vitb16")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        merged = _merge(self.to_dict(), overrides, prefix="")
        return from_dict(merged)


def _merge(base: dict, overrides: dict, prefix: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if key not in out:
            raise ConfigurationError(f"unknown config key {prefix + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, prefix + key + ".")
        else:
            out[key] = value
    return out


def _coerce(value, hint, key):
    """Check ``value`` against a dataclass field annotation; returns the (possibly widened) value."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def _build(cls, data, prefix):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{prefix.rstrip('.') or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {[prefix + k for k in unknown]}; "
                                 f"allowed under {prefix.rstrip('.') or 'top level'}: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, prefix + name + ".")
        else:
            kwargs[name] = _coerce(value, hint, prefix + name)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if prefix == "" or msg.startswith(prefix.split(".")[0])
                                 else f"{prefix.rstrip('.')}: {msg}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    """Parse a YAML config; relative paths resolve against the config file's directory.

    An empty file yields the defaults. Unknown keys and ill-typed values are
    rejected with the offending key in the message.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} does not parse: {exc}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping at the top level")
    for key in PATH_KEYS:
        if isinstance(data.get(key), str):
            data[key] = str((path.parent / data[key]).resolve())
    config = from_dict(data)
    if check_paths:
        for key in MUST_EXIST:
            value = getattr(config, key)
            if value is not None and not Path(value).exists():
                raise ConfigurationError(f"{key}: path does not exist: {value}")
    return config


def build_backbone(config: ExperimentConfig):
    from .backbone import load_backbone

    if config.backbone == "synthetic":
        return load_backbone("synthetic", device=config.device, **asdict(config.synthetic))
    return load_backbone(config.backbone, checkpoint=config.checkpoint, device=config.device)


def template_pool(config: ExperimentConfig):
    from .objective import TemplatePool

    from .data import SYNTHETIC_TEMPLATE

    if config.template_pool:
        return TemplatePool.from_file(config.template_pool)
    if config.dataset == "synthetic" and config.manifest is None:
        # the toy text encoder only matches its own prompt layout
        return TemplatePool([SYNTHETIC_TEMPLATE])
    return TemplatePool.default()
