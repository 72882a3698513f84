"""Label training images with one attribute word each.

The deterministic stub plays the VQA model, so this runs offline. Every
image gets three candidates (one per seed); each candidate is scored by
the plain image-text cosine and the best one is kept.
"""

import tempfile
from pathlib import Path

from attrprompt import SyntheticBackbone
from attrprompt.annotation import StubVqaClient, VqaClientConfig, annotate_dataset, load_annotations
from attrprompt.data import synthetic_splits
from attrprompt.pipeline import annotation_template

backbone = SyntheticBackbone(seed=0)
train, _, base, _ = synthetic_splits(backbone)
records = [r for r in train if r.class_name in base]
template = annotation_template("oxford_flowers")
print("question for class 'rose':", template.render("rose"))

cfg = VqaClientConfig("deterministic-stub", seeds=(0, 1, 2), repetition_penalty=100)
with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "attributes.jsonl"
    result = annotate_dataset(records, template, cfg, StubVqaClient(), backbone, out)
    print(f"wrote {result.written} annotations")
    for ann in list(load_annotations(out).values())[:3]:
        cands = ", ".join(f"{a} ({s:+.3f})" for a, s in ann.candidates)
        print(f"  {ann.image_id:<8} {ann.class_name:<5} candidates: {cands} -> {ann.selected}")

    again = annotate_dataset(records, template, cfg, StubVqaClient(), backbone, out)
    print(f"re-run: {again.written} new, {again.skipped} already present")

    swapped = Path(tmp) / "swapped.jsonl"
    annotate_dataset(records, template, cfg, StubVqaClient(), backbone, swapped, swap=True)
    first = next(iter(load_annotations(swapped).values()))
    print(f"swap mode: {first.image_id} ({first.class_name}) now carries {first.selected!r}, swapped={first.swapped}")
