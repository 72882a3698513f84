import json

import numpy as np
import pytest

from attrprompt.config import CACHE_ENV, ExperimentConfig, cache_dir, from_dict, load_config
from attrprompt.errors import ConfigurationError, InputError
from attrprompt.evaluator import EvalReport
from attrprompt.manifest import DatasetManifest, ImageEntry, load_image, load_manifest, manifest_from_folder
from attrprompt.reporting import emit_results_table, format_table, load_results


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_file_gives_defaults(tmp_path):
    cfg = load_config(write(tmp_path, ""))
    assert cfg == ExperimentConfig()
    assert cfg.loss.lambda1 == cfg.loss.lambda2 == 4 and (cfg.loss.f, cfg.loss.g) == (2, 1)
    assert cfg.model.conditioning == "multihead"
    m, t = cfg.model, cfg.train
    assert (m.context_length, m.visual_tokens, m.visual_depth) == (4, 4, 9)
    assert (t.epochs, t.batch_size, t.lr) == (50, 4, 0.0025)


def test_conditioning_override(tmp_path):
    cfg = load_config(write(tmp_path, "model:\n  conditioning: additive\n"))
    assert cfg.model.conditioning == "additive"
    assert cfg.hash() != ExperimentConfig().hash()


def test_malformed_number_names_key(tmp_path):
    with pytest.raises(ConfigurationError, match=r"train\.lr"):
        load_config(write(tmp_path, "train:\n  lr: abc\n"))


def test_booleans_are_not_numbers():
    with pytest.raises(ConfigurationError, match=r"train\.epochs"):
        from_dict({"train": {"epochs": True}})


def test_integers_widen_to_float():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0


@pytest.mark.parametrize("data, key", [({"lr": 0.1}, "lr"), ({"train": {"learning_rate": 0.1}}, "train.learning_rate"),
                                       ({"loss": {"f": 3}}, "loss")])
def test_unknown_or_invalid_keys_rejected(data, key):
    with pytest.raises(ConfigurationError, match=key.replace(".", r"\.")):
        from_dict(data)


def test_unparsable_yaml(tmp_path):
    with pytest.raises(ConfigurationError, match="does not parse"):
        load_config(write(tmp_path, "train: [unclosed\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_hash_independent_of_key_order(tmp_path):
    a = load_config(write(tmp_path, "train:\n  lr: 0.01\n  epochs: 3\nloss:\n  f: 1\n", "a.yaml"))
    b = load_config(write(tmp_path, "loss:\n  f: 1\ntrain:\n  epochs: 3\n  lr: 0.01\n", "b.yaml"))
    c = load_config(write(tmp_path, "loss: {f: 1}\n\n\ntrain:   {lr: 0.01,   epochs: 3}   # flow style\n", "c.yaml"))
    assert a.hash() == b.hash() == c.hash()
    assert len(a.hash()) == 64


def test_overrides_are_strict():
    cfg = ExperimentConfig().with_overrides({"loss": {"lambda1": 0}})
    assert cfg.loss.lambda1 == 0.0 and cfg.loss.lambda2 == 4
    with pytest.raises(ConfigurationError, match="loss.alpha"):
        ExperimentConfig().with_overrides({"loss": {"alpha": 1}})


def test_paths_resolve_relative_to_config_and_must_exist(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "m.tsv").write_text("dataset\tx\n")
    cfg = load_config(write(tmp_path, "manifest: m.tsv\n", "sub/c.yaml"))
    assert cfg.manifest == str((tmp_path / "sub" / "m.tsv").resolve())
    with pytest.raises(ConfigurationError, match="manifest"):
        load_config(write(tmp_path, "manifest: missing.tsv\n"))
    assert load_config(write(tmp_path, "manifest: missing.tsv\n"), check_paths=False).manifest.endswith("missing.tsv")


def test_pretrained_needs_checkpoint():
    with pytest.raises(ConfigurationError, match="checkpoint"):
        ExperimentConfig(backbone="pretrained-vitb16")


def test_synthetic_width_bounds():
    with pytest.raises(ConfigurationError, match="synthetic"):
        from_dict({"synthetic": {"width": 32}})


def test_cache_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    assert cache_dir() == tmp_path / "cache" and cache_dir().is_dir()


# manifests -------------------------------------------------------------------

MANIFEST = """# toy
dataset\ttoy
class\tkiwi\tbase
class\tox\tnovel

image\ttrain\tkiwi/0.npy\tkiwi
image\ttest\tox/0.npy\tox
"""


def test_manifest_parse_and_round_trip(tmp_path):
    p = write(tmp_path, MANIFEST, "m.tsv")
    m = load_manifest(p)
    assert m.name == "toy" and m.base_classes == ["kiwi"] and m.novel_classes == ["ox"]
    assert [e.path for e in m.entries("test")] == ["ox/0.npy"]
    again = load_manifest(write(tmp_path, m.dumps(), "m2.tsv"))
    assert (again.name, again.classes, again.images) == (m.name, m.classes, m.images)


@pytest.mark.parametrize("text", ["class\tkiwi\tbase\n", "dataset\tx\nclass\tkiwi\tmaybe\n",
                                  "dataset\tx\nimage\ttrain\ta.npy\tkiwi\n", "dataset\tx\nwhatever\n",
                                  "dataset\tx\nclass\tk\tbase\nimage\tdev\ta.npy\tk\n"])
def test_malformed_manifests(tmp_path, text):
    with pytest.raises(InputError):
        load_manifest(write(tmp_path, text, "bad.tsv"))


def test_manifest_records_load_npy(tmp_path):
    for c in ("kiwi", "ox"):
        (tmp_path / c).mkdir()
        np.save(tmp_path / c / "0.npy", np.full((8, 8, 3), 0.5))
    m = load_manifest(write(tmp_path, MANIFEST, "m.tsv"))
    recs = m.records("train", 8)
    assert len(recs) == 1 and recs[0].class_name == "kiwi" and recs[0].image.id == "kiwi/0.npy"
    assert recs[0].image.path == str(tmp_path / "kiwi" / "0.npy")
    assert np.all(recs[0].image.pixels == 0.5)


def test_manifest_from_folder(tmp_path):
    for c in ("b", "a", "d", "c"):
        (tmp_path / c).mkdir()
        for i in range(5):
            np.save(tmp_path / c / f"{i}.npy", np.zeros((2, 2, 3)))
    m = manifest_from_folder(tmp_path, "toy", seed=1)
    assert m.base_classes == ["a", "b"] and m.novel_classes == ["c", "d"]
    assert len(m.entries("test")) == 4 and len(m.entries("train")) == 16
    assert m.dumps() == manifest_from_folder(tmp_path, "toy", seed=1).dumps()


def test_load_image_resizes_and_normalizes(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((20, 10, 3), 255, dtype=np.uint8)).save(tmp_path / "w.png")
    arr = load_image(tmp_path / "w.png", 8, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    assert arr.shape == (8, 8, 3)
    np.testing.assert_allclose(arr, 2.0)
    with pytest.raises(InputError):
        load_image(tmp_path / "none.png", 8)


def test_manifest_rejects_unlisted_class():
    with pytest.raises(InputError):
        DatasetManifest("x", {"a": "base"}, [ImageEntry("train", "p", "b")])


# result tables ----------------------------------------------------------------

def test_table_one_row(tmp_path):
    r = EvalReport(95.92, 98.2, 97.04, dataset="oxford_pets")
    lines = format_table([r]).splitlines()
    assert lines[0].split() == ["Dataset", "Base", "Novel", "HM"]
    assert lines[1].split() == ["oxford_pets", "95.92", "98.20", "97.04"]
    txt, js = emit_results_table([r], tmp_path / "out" / "res")
    assert txt.read_text() == format_table([r])
    assert load_results(js) == [r]
    assert json.loads(js.read_text())["average"]["mean_of_hms"] == 97.04


def test_table_header_only(tmp_path):
    assert format_table([]).split() == ["Dataset", "Base", "Novel", "HM"]
    _, js = emit_results_table([], tmp_path / "empty")
    assert load_results(js) == []


# device placement --------------------------------------------------------------

@pytest.mark.skipif(__import__("torch").cuda.is_available(), reason="checks the no-CUDA error path")
def test_cuda_without_gpu_is_configuration_error():
    from attrprompt.config import build_backbone

    with pytest.raises(ConfigurationError, match="CUDA"):
        build_backbone(from_dict({"device": "cuda"}))


@pytest.mark.skipif(not __import__("torch").cuda.is_available(), reason="needs a CUDA device")
def test_training_on_cuda_matches_cpu_initialization():
    import torch

    from attrprompt.config import build_backbone
    from attrprompt.data import overfit_rig, sample_few_shot
    from attrprompt.objective import LossWeights, TemplatePool
    from attrprompt.trainer import ModelConfig, TrainConfig, train

    cpu, gpu = build_backbone(from_dict({})), build_backbone(from_dict({"device": "cuda"}))
    assert cpu.fingerprint_frozen_weights() == gpu.fingerprint_frozen_weights()
    mc = ModelConfig(context_length=2, visual_tokens=1, visual_depth=1)
    a, b = mc.build(cpu), mc.build(gpu)
    for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
        assert w.is_cuda and torch.equal(v, w.cpu()), k
    rig = overfit_rig(gpu)
    state = train(TrainConfig(epochs=2), sample_few_shot(rig.records, rig.base_classes, 4), b, LossWeights(),
                  pool=TemplatePool(["a [a][cls]"]))
    assert state.step == 4
