import json

import jsonschema
import pytest
import yaml

from protobagnet.cli import main
from protobagnet.config import ExperimentConfig, apply_overrides
from protobagnet.explain import REPORT_SCHEMA

TINY = {
    "seed": 3,
    "model": {"m": 2, "k": 2},
    "train": {"warm_epochs": 1, "joint_epochs": 1, "push_period": 1, "last_epochs": 1, "batch_size": 16},
    "data": {
        "n_train": 24,
        "n_val": 8,
        "n_test": 12,
        "synth": {"side": 32, "band_amplitude": 4.0, "band_thickness": 6.0, "lesion_radius": [2, 3]},
    },
}


@pytest.fixture
def cfg_file(tmp_path, monkeypatch):
    monkeypatch.setenv("PROTOBAGNET_OUTPUT", str(tmp_path / "out"))
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def trained(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--output", "run"]) == 0
    return tmp_path / "out" / "run"


# config ---------------------------------------------------------------------


def test_presets_expand_and_explicit_values_win():
    cfg = ExperimentConfig.from_dict({"preset": "protopnet-baseline"})
    assert (cfg.model.k, cfg.model.head) == (1, "dense")
    assert cfg.loss_weights().l1s == 0.0 and cfg.loss_weights().diss == 0.0
    cfg = ExperimentConfig.from_dict({"preset": "protopnet-baseline", "model": {"k": 3}})
    assert cfg.model.k == 3 and cfg.model.head == "dense"


def test_overrides_parse_yaml_scalars():
    raw = apply_overrides({}, ["train.joint_epochs=7", "loss.diss=0", "model.backbone=bagnet33", "deterministic=false"])
    assert raw == {"train": {"joint_epochs": 7}, "loss": {"diss": 0}, "model": {"backbone": "bagnet33"}, "deterministic": False}


def test_snapshot_is_fully_explicit_and_reloads(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    cfg.dump(tmp_path / "snap.yaml")
    snap = yaml.safe_load((tmp_path / "snap.yaml").read_text())
    assert snap["loss"]["clst"] == 0.8 and snap["train"]["lr_prototypes"] == 3e-3
    assert snap["data"]["synth"]["lesion_contrast"] == 0.4
    again = ExperimentConfig.from_dict(snap)
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"preset": "resnet"},
        {"model": {"head": "mlp"}},
        {"loss": {"clst": -1}},
        {"train": {"nope": 1}},
        {"train": {"diss_pairs": "some"}},
    ],
)
def test_bad_configs(raw):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(raw)


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PROTOBAGNET_OUTPUT", str(tmp_path))
    assert ExperimentConfig().resolve_output("x") == tmp_path / "x"
    assert ExperimentConfig().resolve_output(str(tmp_path / "abs")) == tmp_path / "abs"


# commands --------------------------------------------------------------------


def test_generate_is_balanced_and_reproducible(cfg_file, tmp_path):
    assert main(["generate", "--config", str(cfg_file), "--output", "a"]) == 0
    assert main(["generate", "--config", str(cfg_file), "--output", "b"]) == 0
    a, b = tmp_path / "out" / "a", tmp_path / "out" / "b"
    lines = (a / "manifest.csv").read_text().splitlines()
    assert lines[0] == "path,label,group,mask,split"
    train = [line.split(",") for line in lines[1:] if line.endswith(",train")]
    assert len(train) == 24 and sum(int(r[1]) for r in train) == 12
    for row in lines[1:4]:
        p = row.split(",")[0]
        assert (a / p).read_bytes() == (b / p).read_bytes()
    assert (a / "config.generate.yaml").exists()


def test_generate_bad_geometry_exits_1(cfg_file, capsys):
    assert main(["generate", "--config", str(cfg_file), "--set", "data.synth.band_center=0.01"]) == 1
    assert "does not fit" in capsys.readouterr().err


def test_usage_errors_exit_1(cfg_file, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--config", str(cfg_file), "--set", "nokey"]) == 1
    assert main(["train", "--config", str(cfg_file), "--set", "train.warm_epochs=-1"]) == 1


def test_train_writes_outputs(trained):
    assert (trained / "model.ckpt").exists()
    header = (trained / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,stage,ce,clst,sep,l1c,l1s,diss")
    metrics = json.loads((trained / "test_metrics.json").read_text())
    assert set(metrics) == {"accuracy", "auc", "recall", "precision"}
    snap = yaml.safe_load((trained / "config.train.yaml").read_text())
    assert snap["seed"] == 3 and snap["model"]["head"] == "sa"
    assert "synth-train-3000" in (trained / "push_log.txt").read_text()


def test_train_resume_reproduces_metrics(cfg_file, trained):
    first = (trained / "test_metrics.json").read_text()
    assert main(["train", "--config", str(cfg_file), "--output", "run", "--resume"]) == 0
    assert (trained / "test_metrics.json").read_text() == first


def test_train_is_idempotent(cfg_file, trained, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--output", "again"]) == 0
    again = tmp_path / "out" / "again"
    assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (again / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_explain_emits_both_methods(cfg_file, trained, tmp_path):
    ck = str(trained / "model.ckpt")
    assert main(["explain", "--config", str(cfg_file), "--checkpoint", ck, "--output", "ex", "--n", "2", "--global"]) == 0
    ex = tmp_path / "out" / "ex"
    reports = sorted(ex.glob("*.json"))
    methods = {p.name.split(".")[1] for p in reports if p.name.startswith("synth-")}
    assert methods == {"rf-box", "percentile-box"}
    for p in reports:
        if p.name.startswith("synth-"):
            jsonschema.validate(json.loads(p.read_text()), REPORT_SCHEMA)
    assert len(list(ex.glob("prototype_*.png"))) == 4
    assert len(list(ex.glob("synth-*.png"))) == 4


def test_explain_without_push_is_a_clear_error(cfg_file, tmp_path, capsys):
    from protobagnet.data import SynthConfig, generate_synthetic_dataset, stack
    from protobagnet.estimator import ProtoBagNetClassifier

    X, y = stack(generate_synthetic_dataset(SynthConfig(side=32, band_amplitude=4.0, band_thickness=6.0), 8))
    est = ProtoBagNetClassifier(m=1, warm_epochs=0, joint_epochs=0, last_epochs=0).fit(X, y)
    est.save(tmp_path / "raw.ckpt")
    code = main(["explain", "--config", str(cfg_file), "--checkpoint", str(tmp_path / "raw.ckpt"), "--global", "--n", "1"])
    assert code == 2
    assert "run push" in capsys.readouterr().err


def test_evaluate_suites(cfg_file, trained, tmp_path):
    ck = str(trained / "model.ckpt")
    assert main(["evaluate", "--config", str(cfg_file), "--checkpoint", ck, "--suite", "classification", "--output", "ev"]) == 0
    ev = tmp_path / "out" / "ev"
    assert (ev / "classification.csv").read_text().splitlines()[0] == "model,accuracy,auc,recall,precision"
    assert main(["evaluate", "--config", str(cfg_file), "--checkpoint", ck, "--suite", "faithfulness", "--output", "ev"]) == 0
    data = json.loads((ev / "faithfulness.json").read_text())
    assert {"auc_original", "auc_occluded", "per_class", "deltas"} <= set(data)
    assert main(["evaluate", "--config", str(cfg_file), "--checkpoint", ck, "--suite", "all", "--output", "ev"]) == 0
    assert (ev / "localization.json").exists() and (ev / "importance.json").exists()


def test_evaluate_unknown_suite_exits_1(cfg_file, trained):
    ck = str(trained / "model.ckpt")
    assert main(["evaluate", "--config", str(cfg_file), "--checkpoint", ck, "--suite", "speed"]) == 1


def test_missing_checkpoint_exits_2(cfg_file, tmp_path):
    assert main(["evaluate", "--config", str(cfg_file), "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
