import json

import numpy as np
import pytest

from gaitmeta.cli import ConfigError, apply_set, default_config, load_config, main
from gaitmeta.network import init_params, load_params, ModelConfig
from gaitmeta.synthgait import DatasetManifest, manifest_checksum


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "--out", str(out), "--seed", "4", "--set", "data.n_subjects=3",
                 "--set", "data.trial_scale=0.1"]) == 0
    return out / "manifest.json"


def test_default_generate_covers_nine_subjects_and_five_modes(tmp_path):
    # the default cohort is small enough at a reduced trial length
    assert main(["generate", "--out", str(tmp_path), "--set", "data.trial_scale=0.05"]) == 0
    m = DatasetManifest.load(tmp_path / "manifest.json")
    assert {e.subject for e in m.sessions} == set(range(1, 10))
    assert {e.mode for e in m.sessions} == {"LW", "RA", "RD", "SA", "SD"}


def test_generate_is_reproducible(dataset, tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--seed", "4", "--set", "data.n_subjects=3",
                 "--set", "data.trial_scale=0.1"]) == 0
    assert manifest_checksum(tmp_path / "manifest.json") == manifest_checksum(dataset)


def test_set_values_are_parsed_as_json():
    cfg = default_config()
    apply_set(cfg, "meta.first_order=true")
    apply_set(cfg, "evaluate.seeds=[0, 2]")
    apply_set(cfg, "data.manifest=/x/y.json")
    apply_set(cfg, "finetune.learning_rates={\"TL\": 0.1}")
    assert cfg["meta"]["first_order"] is True and cfg["evaluate"]["seeds"] == [0, 2]
    assert cfg["data"]["manifest"] == "/x/y.json"
    assert cfg["finetune"]["learning_rates"]["TL"] == 0.1 and cfg["finetune"]["learning_rates"]["RI"] == 1.5e-4
    for bad in ("meta.gamma=1", "nokey", "finetune.learning_rates={\"XX\": 1}", "meta=3"):
        with pytest.raises(ConfigError):
            apply_set(default_config(), bad)


def test_config_file_validation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"meta": {"epochs": 3}, "seed": 7}))
    cfg = load_config(str(p), ["meta.n=5"], seed=None)
    assert (cfg["meta"]["epochs"], cfg["meta"]["n"], cfg["seed"]) == (3, 5, 7)
    assert load_config(str(p), seed=1)["seed"] == 1
    p.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ConfigError, match="schema_version"):
        load_config(str(p))


def test_exit_codes(tmp_path, dataset, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"bogus": 1}}))
    assert main(["train", "--out", str(tmp_path / "t"), "--config", str(p)]) == 2
    assert "unknown config key 'model.bogus'" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "t"), "--manifest", str(tmp_path / "missing.json")]) == 1
    assert main(["evaluate", "--out", str(tmp_path / "e"), "--manifest", str(dataset), "--threads", "0"]) == 2
    assert main(["train", "--out", str(tmp_path / "t"), "--manifest", str(dataset),
                 "--set", "model.conv_kernel=0"]) == 2


SMALL = ["--set", "model.conv_out_channels=3", "--set", "model.encoder_width=6", "--set", "model.head_width=4",
         "--set", "model.pool=20"]


def test_zero_epoch_training_saves_the_initialization(tmp_path, dataset):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--manifest", str(dataset), "--seed", "3",
                 "--set", "meta.epochs=0", *SMALL]) == 0
    saved = load_params(out / "maml.mgait")
    cfg = ModelConfig(conv_out_channels=3, encoder_width=6, head_width=4, pool=20)
    assert saved.identical(init_params(cfg, 3))
    assert json.loads((out / "config.json").read_text())["meta"]["epochs"] == 0


def test_train_both_methods(tmp_path, dataset):
    out = tmp_path / "run"
    common = ["--manifest", str(dataset), *SMALL, "--set", "train.held_out=2"]
    assert main(["train", "--out", str(out), *common, "--set", "meta.epochs=2", "--set", "meta.n=10",
                 "--set", "meta.m=10", "--set", "harness.task_stride=20",
                 "--set", "train.checkpoint_every=1"]) == 0
    assert (out / "checkpoints" / "maml_epoch0002.mgait").exists()
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,support_loss,query_loss,wall_time" and len(log) == 3
    assert main(["train", "--out", str(out), "--method", "supervised", *common,
                 "--set", "pretrain.epochs=1", "--set", "harness.pretrain_stride=50"]) == 0
    assert np.all(np.isfinite(load_params(out / "pretrained.mgait")["conv.weight"]))
