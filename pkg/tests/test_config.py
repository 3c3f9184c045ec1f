import pytest
import yaml

from mcmd.config import DISTILL_BUDGET, PRESETS, PRETRAIN_BUDGET, ConfigError, load_config, resolve


def test_default_budgets_differ_by_step():
    cfg = resolve({})
    assert cfg.train.max_epochs == DISTILL_BUDGET["max_epochs"] and cfg.train.patience == DISTILL_BUDGET["patience"]
    assert cfg.pretrain.max_epochs == PRETRAIN_BUDGET["max_epochs"] and cfg.pretrain.patience is None
    assert cfg.train.learning_rate == 1e-4 and cfg.train.grad_clip_norm == 5.0
    assert cfg.train.distill.alpha == cfg.train.distill.beta == cfg.train.distill.gamma == 1500.0


def test_seed_propagates_and_overrides():
    cfg = resolve({"seed": 3})
    assert cfg.train.seed == cfg.pretrain.seed == 3
    assert resolve({"seed": 3}, seed=9).train.seed == 9


def test_pretrain_inherits_train_then_overrides():
    cfg = resolve({"train": {"learning_rate": 0.01, "max_epochs": 7}, "pretrain": {"max_epochs": 2}})
    assert cfg.pretrain.learning_rate == 0.01 and cfg.pretrain.max_epochs == 2
    assert cfg.train.max_epochs == 7


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"train": {"lr": 1}}, {"data": {"rot": "x"}},
                                 {"stft": {"hop": 1}}, {"train": {"batch_size": 0}}])
def test_bad_documents(doc):
    with pytest.raises(ConfigError):
        resolve(doc)


def test_presets_resolve():
    for name in PRESETS:
        cfg = load_config(name)
        assert cfg.name == name
    assert load_config("tiny").train.dims.M == 4


def test_file_with_preset_and_snapshot_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"preset": "desk", "seed": 2, "train": {"max_epochs": 3}}))
    cfg = load_config(str(p))
    assert cfg.train.max_epochs == 3 and cfg.train.batch_size == 8 and cfg.seed == 2
    snap = tmp_path / "snap.yaml"
    cfg.dump(snap)
    assert yaml.safe_load(snap.read_text())["config_hash"] == cfg.hash()
    again = load_config(str(snap))
    assert again.hash() == cfg.hash()


def test_unknown_config_source():
    with pytest.raises(ConfigError):
        load_config("definitely-not-there")


def test_data_paths(tmp_path):
    cfg = resolve({"data": {"root": str(tmp_path)}})
    assert cfg.data.dir("target") == str(tmp_path / "target")
    assert cfg.data.cache("source") == str(tmp_path / "cache" / "source")
