"""Plain-text dataset manifests and image loading.

A manifest is tab-separated, one directive per line::

    dataset   eurosat
    class     AnnualCrop   base
    class     Forest       novel
    image     train        AnnualCrop/0001.jpg   AnnualCrop

Blank lines and ``#`` comments are ignored; image paths are relative to the
manifest's directory. No data is downloaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone.base import ImageInput
from .data import Record
from .errors import InputError

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".npy")


@dataclass
class ImageEntry:
    split: str
    path: str
    class_name: str


@dataclass
class DatasetManifest:
    name: str
    classes: dict = field(default_factory=dict)    # class name -> "base" | "novel"
    images: list = field(default_factory=list)     # ImageEntry
    root: Path = Path(".")

    def __post_init__(self):
        bad = {k: v for k, v in self.classes.items() if v not in ("base", "novel")}
        if bad:
            raise InputError(f"class flags must be 'base' or 'novel': {bad}")
        for e in self.images:
            if e.class_name not in self.classes:
                raise InputError(f"image {e.path!r} has class {e.class_name!r} missing from the class list")
            if e.split not in SPLITS:
                raise InputError(f"image {e.path!r} has unknown split {e.split!r}")

    @property
    def base_classes(self):
        return [c for c, flag in self.classes.items() if flag == "base"]

    @property
    def novel_classes(self):
        return [c for c, flag in self.classes.items() if flag == "novel"]

    def entries(self, split: str):
        return [e for e in self.images if e.split == split]

    def resolve(self, entry: ImageEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def records(self, split: str, image_size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0),
                annotations: dict | None = None) -> list[Record]:
        out = []
        for e in self.entries(split):
            path = self.resolve(e)
            pixels = load_image(path, image_size, mean, std)
            ann = annotations.get(str(e.path)) if annotations else None
            attr = ann.selected if ann is not None else None
            out.append(Record(ImageInput(pixels, str(e.path), str(path)), e.class_name, attr))
        return out

    def dumps(self) -> str:
        lines = [f"dataset\t{self.name}"]
        lines += [f"class\t{c}\t{flag}" for c, flag in self.classes.items()]
        lines += [f"image\t{e.split}\t{e.path}\t{e.class_name}" for e in self.images]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    name, classes, images = None, {}, []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.rstrip("\n").split("\t")
        kind = parts[0]
        if kind == "dataset" and len(parts) == 2:
            name = parts[1]
        elif kind == "class" and len(parts) == 3:
            classes[parts[1]] = parts[2]
        elif kind == "image" and len(parts) == 4:
            images.append(ImageEntry(parts[1], parts[2], parts[3]))
        else:
            raise InputError(f"{path}:{lineno}: malformed manifest line {raw!r}")
    if name is None:
        raise InputError(f"{path}: missing 'dataset' line")
    return DatasetManifest(name, classes, images, path.parent)


def load_image(path, size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> np.ndarray:
    """``H x W x 3`` float array: ``.npy`` files as stored, other files resized and normalized."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    img = Image.open(path).convert("RGB")
    w, h = img.size
    scale = size / min(w, h)
    img = img.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC)
    w, h = img.size
    left, top = (w - size) // 2, (h - size) // 2
    img = img.crop((left, top, left + size, top + size))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return (arr - np.asarray(mean)) / np.asarray(std)


def manifest_from_folder(root, name: str, novel_fraction: float = 0.5, test_fraction: float = 0.2,
                         seed: int = 0) -> DatasetManifest:
    """Manifest for a ``root/<class>/<image>`` layout.

    Classes are sorted and the first half (by default) marked base, mirroring
    the usual base-to-novel split; images are split train/test by ``seed``.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise InputError(f"{root} needs at least two class subdirectories")
    n_base = max(1, round(len(class_dirs) * (1 - novel_fraction)))
    rng = np.random.default_rng(seed)
    classes, images = {}, []
    for i, d in enumerate(class_dirs):
        classes[d.name] = "base" if i < n_base else "novel"
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        n_test = int(round(len(files) * test_fraction))
        test_idx = set(rng.choice(len(files), size=n_test, replace=False).tolist()) if n_test else set()
        for j, f in enumerate(files):
            images.append(ImageEntry("test" if j in test_idx else "train", str(f.relative_to(root)), d.name))
    return DatasetManifest(name, classes, images, root)
