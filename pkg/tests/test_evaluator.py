import builtins
import csv
import math
import statistics

import pytest
import torch
from hypothesis import given, strategies as st

from attrprompt.backbone import ImageInput
from attrprompt.data import SYNTHETIC_TEMPLATE, Record, sample_few_shot
from attrprompt.errors import InputError
from attrprompt.evaluator import (ConfidenceRecord, EvalReport, accuracy, analyze_attribute_fidelity,
                                  analyze_confidence, average_hm, chance_level, classify, eval_base_to_novel,
                                  eval_domain_shift, eval_few_shot, harmonic_mean, write_confidence_csv)
from attrprompt.extractor import AttributeExtractor, attribute_target
from attrprompt.objective import LossWeights, TemplatePool
from attrprompt.prompts import ClassVocabulary
from attrprompt.trainer import ModelConfig, TrainConfig, train

POOL = TemplatePool([SYNTHETIC_TEMPLATE])

# (base, novel, HM) per dataset for the attribute-prompt column of the reference
# base-to-novel table, in its row order
REFERENCE_ROWS = [(75.99, 72.67, 74.29), (97.80, 94.76, 96.25), (95.92, 98.20, 97.04), (77.04, 76.32, 76.67),
             (97.82, 75.54, 85.24), (91.45, 91.99, 91.72), (38.55, 35.90, 37.17), (81.63, 79.33, 80.46),
             (95.26, 78.01, 85.77), (86.76, 79.42, 82.92)]


def untrained(backbone, seed=0):
    return ModelConfig(context_length=2, heads=2, visual_tokens=1, visual_depth=1).build(backbone, seed=seed)


def trained(backbone, splits, seed):
    train_recs, _, base, novel = splits
    model = untrained(backbone, seed)
    ds = sample_few_shot(train_recs, base, 8, seed=seed, novel_classes=novel)
    train(TrainConfig(epochs=50, seed=seed), ds, model, LossWeights(), pool=POOL)
    return model


@pytest.fixture(scope="module")
def trained_models(backbone, splits):
    return [trained(backbone, splits, s) for s in range(4)]


# harmonic mean -------------------------------------------------------------------

def test_hm_reference_row():
    assert abs(harmonic_mean(95.92, 98.20) - 97.04) <= 0.01


@pytest.mark.parametrize("b, n, h", REFERENCE_ROWS)
def test_hm_matches_every_reference_row(b, n, h):
    assert abs(harmonic_mean(b, n) - h) <= 0.0100001


@given(st.one_of(st.just(0.0), st.floats(1e-6, 100)))  # accuracies are percentages, not subnormals
def test_hm_of_equal_inputs(x):
    assert harmonic_mean(x, x) == pytest.approx(x, rel=1e-15, abs=0)


def test_hm_zero_annihilates():
    assert harmonic_mean(100, 0) == 0 and harmonic_mean(0, 100) == 0 and harmonic_mean(0, 0) == 0


@given(st.floats(0, 100), st.floats(0, 100))
def test_hm_bounded_by_arithmetic_mean_and_max(a, b):
    h = harmonic_mean(a, b)
    assert min(a, b) - 1e-9 <= h <= (a + b) / 2 + 1e-9 <= max(a, b) + 1e-9


def test_hm_negative_rejected():
    with pytest.raises(InputError):
        harmonic_mean(-1, 50)


def test_average_row_readings():
    reports = [EvalReport(b, n, harmonic_mean(b, n)) for b, n, _ in REFERENCE_ROWS]
    avg = average_hm(reports)
    # the reference "Average" HM (80.75) is the mean of per-dataset HMs; the HM of
    # the mean accuracies (83.82, 78.21) would be 80.92
    assert abs(avg["mean_of_hms"] - 80.75) < 0.01
    assert abs(avg["base"] - 83.82) < 0.01 and abs(avg["novel"] - 78.21) < 0.01
    assert abs(avg["hm_of_means"] - 80.92) < 0.01
    assert average_hm([])["mean_of_hms"] is None


def test_report_validation():
    with pytest.raises(InputError):
        EvalReport(101, 50, 50)
    r = EvalReport(90, 80, harmonic_mean(90, 80), {"a": 90.0}, "toy", "abc")
    assert EvalReport.from_dict(r.to_dict()) == r


def test_chance_level():
    assert chance_level(4) == 25.0 and math.isnan(chance_level(0))


# classification ---------------------------------------------------------------------

def test_symmetric_tie(backbone, rig):
    model = untrained(backbone)
    vocab = ClassVocabulary(["kiwi", "zz"], backbone)
    vocab.segments[1] = vocab.segments[0].clone()
    pred = classify([rig.records[0].image], model, vocab)
    assert pred.probs[0].tolist() == [0.5, 0.5]
    assert pred.indices.tolist() == [0] and pred.names == ["kiwi"]


def test_classify_needs_no_annotations_or_files(backbone, rig, monkeypatch):
    model = untrained(backbone)
    images = [ImageInput(r.image.pixels, r.image.id, "/nonexistent/path.png") for r in rig.records]

    def no_open(*a, **k):
        raise AssertionError("classification touched the filesystem")

    monkeypatch.setattr(builtins, "open", no_open)
    pred = classify(images, model, ClassVocabulary(rig.base_classes, backbone))
    assert pred.probs.shape == (len(images), 2)
    torch.testing.assert_close(pred.probs.sum(-1), torch.ones(len(images), dtype=pred.probs.dtype))
    records = [Record(img, r.class_name, None) for img, r in zip(images, rig.records)]
    assert 0 <= accuracy(model, records, rig.base_classes).accuracy <= 100


def test_batching_does_not_change_predictions(backbone, rig):
    model = untrained(backbone)
    vocab = ClassVocabulary(rig.base_classes, backbone)
    imgs = [r.image for r in rig.records]
    a, b = classify(imgs, model, vocab, batch_size=3), classify(imgs, model, vocab)
    torch.testing.assert_close(a.probs, b.probs, rtol=1e-12, atol=1e-12)


def test_overfit_rig_classified_correctly(rig):
    import overfit

    model, _ = overfit.train_model(backbone=rig.backbone)
    report = accuracy(model, rig.records, rig.base_classes)
    assert report.accuracy == 100.0 and report.per_class == {"kiwi": 100.0, "zz": 100.0}


def test_all_correct_is_ceiling(rig):
    import overfit

    model, _ = overfit.train_model(backbone=rig.backbone)
    # the overfit rig has no novel classes, so it plays both splits
    acc = accuracy(model, rig.records, rig.base_classes).accuracy
    report = EvalReport(acc, acc, harmonic_mean(acc, acc))
    assert (report.base_acc, report.novel_acc, report.hm) == (100.0, 100.0, 100.0)


def test_empty_split_rejected(backbone, splits):
    _, test, base, novel = splits
    model = untrained(backbone)
    with pytest.raises(InputError, match="novel"):
        eval_base_to_novel(model, [r for r in test if r.class_name in base], base, novel)
    with pytest.raises(InputError, match="base"):
        eval_base_to_novel(model, [r for r in test if r.class_name in novel], base, novel)


def test_overlapping_splits_rejected(backbone, splits):
    _, test, base, novel = splits
    with pytest.raises(InputError):
        eval_base_to_novel(untrained(backbone), test, base, base[:1] + novel)


def test_novel_vocabulary_is_separate(backbone, splits):
    _, test, base, novel = splits
    model = untrained(backbone)
    report = eval_base_to_novel(model, test, base, novel)
    direct = accuracy(model, [r for r in test if r.class_name in novel], novel).accuracy
    assert report.novel_acc == direct
    assert set(report.per_class) == set(base + novel)


def test_novel_above_chance_after_training(trained_models, splits):
    _, test, base, novel = splits
    novel_accs = [eval_base_to_novel(m, test, base, novel).novel_acc for m in trained_models]
    assert statistics.fmean(novel_accs) > chance_level(len(novel))


def test_repeated_evaluation_is_bitwise_stable(trained_models, splits):
    _, test, base, novel = splits
    a = eval_base_to_novel(trained_models[0], test, base, novel, dataset="synthetic")
    b = eval_base_to_novel(trained_models[0], test, base, novel, dataset="synthetic")
    assert a.to_dict() == b.to_dict()


def test_few_shot_protocol_uses_all_classes(backbone, splits):
    _, test, base, novel = splits
    report = eval_few_shot(untrained(backbone), test, base + novel)
    assert set(report.per_class) == set(base + novel)


def test_domain_shift_identity_and_empty(trained_models, splits):
    _, test, base, _ = splits
    model = trained_models[0]
    in_domain = accuracy(model, [r for r in test if r.class_name in base], base).accuracy
    shifted = eval_domain_shift(model, base, {"same": [r for r in test if r.class_name in base]})
    assert shifted.per_target == {"same": in_domain} and shifted.average == in_domain
    empty = eval_domain_shift(model, base, {})
    assert empty.per_target == {} and empty.average is None


# attribute fidelity ------------------------------------------------------------------

class ExactExtractor(torch.nn.Module):
    def __init__(self, targets):
        super().__init__()
        self.targets = targets

    def forward(self, emb):
        return self.targets


def test_exact_extractor_has_unit_fidelity(backbone, splits):
    _, test, _, _ = splits
    model = untrained(backbone)
    model.extractor = ExactExtractor(torch.stack([attribute_target(backbone, r.attribute) for r in test]))
    report = analyze_attribute_fidelity(model, test)
    assert report.mean_cosine == pytest.approx(1.0, abs=1e-12)
    assert all(c == pytest.approx(1.0, abs=1e-12) for c in report.per_image.values())


def test_random_extractor_fidelity_near_zero(backbone, splits):
    _, test, _, _ = splits
    model = untrained(backbone)
    dims = model.extractor.in_dim, model.extractor.out_dim
    cosines = []
    for seed in range(32):  # 32 extractors x 32 images = 1024 samples
        model.extractor = AttributeExtractor(*dims, generator=torch.Generator().manual_seed(seed))
        cosines.extend(analyze_attribute_fidelity(model, test).per_image.values())
    assert len(cosines) >= 1000
    # sign-symmetric weights give a zero expectation; the sample std of the mean is ~0.015 here
    assert abs(statistics.fmean(cosines)) < 0.06


def test_training_improves_fidelity(backbone, splits, trained_models):
    _, test, _, _ = splits
    for seed, model in enumerate(trained_models):
        before = analyze_attribute_fidelity(untrained(backbone, seed), test).mean_cosine
        assert analyze_attribute_fidelity(model, test).mean_cosine > before


def test_fidelity_requires_attributes(backbone, splits):
    _, test, _, _ = splits
    with pytest.raises(InputError):
        analyze_attribute_fidelity(untrained(backbone), [Record(test[0].image, test[0].class_name, None)])


# confidence analysis --------------------------------------------------------------------

def test_empty_attribute_gives_equal_scores(backbone, splits):
    _, test, _, _ = splits
    recs = [Record(r.image, r.class_name, "") for r in test[:4]]
    rows, _ = analyze_confidence(backbone, recs)
    assert all(r.score_plain == r.score_attr for r in rows)


def test_attribute_aligned_images_prefer_attribute_prompt(backbone, splits):
    _, test, _, _ = splits
    rows, summary = analyze_confidence(backbone, test, template_plain="a [cls]", template_attr=SYNTHETIC_TEMPLATE)
    assert summary["count"] == len(test)
    assert summary["fraction_attr_higher"] > 0.5
    assert summary["attr"]["mean"] > summary["plain"]["mean"]


def test_per_class_sampling(backbone, splits):
    _, test, _, _ = splits
    rows, summary = analyze_confidence(backbone, test, per_class=3)
    assert summary["count"] == 12


def test_confidence_csv(tmp_path):
    rows = [ConfidenceRecord("a", 0.25, 0.5), ConfidenceRecord("b", -1.0, 1.0)]
    write_confidence_csv(rows, tmp_path / "c.csv")
    with open(tmp_path / "c.csv", newline="") as fh:
        got = list(csv.reader(fh))
    assert got == [["image_id", "score_plain", "score_attr"], ["a", "0.25", "0.5"], ["b", "-1.0", "1.0"]]
    with pytest.raises(InputError):
        ConfidenceRecord("c", 1.5, 0.0)


def test_domain_shift_average_excludes_source(monkeypatch):
    # reference accuracies: source 71.85, four shifted targets averaging to 60.71
    import attrprompt.evaluator as ev

    targets = {"v2": 65.21, "sketch": 49.20, "adversarial": 51.55, "rendition": 76.88}
    monkeypatch.setattr(ev, "accuracy", lambda model, recs, classes, tau, dataset: ev.AccuracyReport(targets[dataset]))
    report = eval_domain_shift(None, ["a", "b"], {name: [] for name in targets})
    assert report.per_target == targets
    assert round(report.average, 2) == 60.71
