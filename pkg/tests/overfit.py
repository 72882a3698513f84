"""The overfit-capacity run: 2 classes x 4 images, 200 SGD steps on the synthetic rig."""

import time

import torch

from attrprompt.backbone import stack_images
from attrprompt.data import OVERFIT_TEMPLATE, overfit_rig, sample_few_shot
from attrprompt.evaluator import classify
from attrprompt.objective import Batch, LossWeights, TemplateBank, TemplatePool, total_loss
from attrprompt.prompts import ClassVocabulary
from attrprompt.trainer import ModelConfig, TrainConfig, train


def full_loss(model, ds, vocab, bank):
    labels = torch.tensor([vocab.index(r.class_name) for r in ds.records])
    batch = Batch(stack_images([r.image for r in ds.records]), labels, [r.attribute for r in ds.records], vocab)
    with torch.no_grad():
        return total_loss(batch, model, LossWeights(), bank)[0].item()


def _setup(seed, backbone):
    rig = overfit_rig(backbone)
    ds = sample_few_shot(rig.records, rig.base_classes, 4, seed=seed)
    vocab = ClassVocabulary(ds.base_classes, rig.backbone)
    bank = TemplateBank(rig.backbone, TemplatePool([OVERFIT_TEMPLATE]))
    model = ModelConfig(context_length=2, visual_tokens=1, visual_depth=1).build(rig.backbone, seed=seed)
    return rig, ds, vocab, bank, model


def _train(model, ds, bank, seed, steps):
    cfg = TrainConfig(epochs=steps, batch_size=4, lr=0.0025, augment=False, max_steps=steps, seed=seed)
    state = train(cfg, ds, model, LossWeights(), bank=bank)
    assert state.step == steps


def train_model(seed=0, steps=200, backbone=None):
    """The trained model and its rig."""
    rig, ds, _, bank, model = _setup(seed, backbone)
    _train(model, ds, bank, seed, steps)
    return model, rig


def run(seed=0, steps=200, backbone=None):
    """Returns ``(accuracy, initial_total, final_total, seconds)``."""
    start = time.time()
    rig, ds, vocab, bank, model = _setup(seed, backbone)
    initial = full_loss(model, ds, vocab, bank)
    _train(model, ds, bank, seed, steps)
    final = full_loss(model, ds, vocab, bank)
    pred = classify([r.image for r in ds.records], model, vocab)
    acc = sum(p == r.class_name for p, r in zip(pred.names, ds.records)) / len(ds.records)
    return acc, initial, final, time.time() - start
