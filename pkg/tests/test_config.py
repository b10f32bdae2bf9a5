import json

import pytest

from csnn.config import PRESETS, ConfigError, config_from_dict, load_config_dict, make_config, parse_override


def test_defaults_build():
    cfg = config_from_dict({})
    assert cfg.dataset.kind == "moons" and cfg.model.type == "csnn" and cfg.seed == 0


@pytest.mark.parametrize("doc, field", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"epochs": 3}}, "train.epochs"),
    ({"train": {"optimizer": {"lr": 0.1}}}, "train.optimizer.lr"),
    ({"dataset": {"kind": "moons", "size": 3}}, "dataset.size"),
])
def test_unknown_keys_are_named(doc, field):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(doc)
    assert exc.value.field == field


@pytest.mark.parametrize("doc, field", [
    ({"dataset": {"kind": "mnist"}}, "dataset.kind"),
    ({"dataset": {"kind": "csv"}}, "dataset.train"),
    ({"ood": {"kind": "csv"}}, "ood.path"),
    ({"seed": -1}, "seed"),
    ({"seed": 1.5}, "seed"),
    ({"train": {"epochs_anneal": "many"}}, "train.epochs_anneal"),
    ({"train": {"optimizer": {"kind": "rmsprop"}}}, "train.optimizer"),
    ({"model": {"type": "mlp"}}, "model"),
])
def test_invalid_values_are_rejected(doc, field):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(doc)
    assert exc.value.field == field


def test_json_and_toml_agree(tmp_path):
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"seed": 7, "train": {"epochs_anneal": 50, "alpha_schedule": {"kind": "fixed", "value": 1.0}}}))
    t = tmp_path / "c.toml"
    t.write_text("seed = 7\n[train]\nepochs_anneal = 50\n[train.alpha_schedule]\nkind = \"fixed\"\nvalue = 1.0\n")
    a, b = make_config(j), make_config(t)
    assert a == b and a.train.seed == 7 and a.train.alpha_schedule.value == 1.0


def test_unparseable_and_missing_files(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("seed = = 1\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        make_config(p)
    with pytest.raises(ConfigError, match="not found"):
        make_config(tmp_path / "nope.json")
    with pytest.raises(ConfigError, match="unknown preset"):
        load_config_dict(preset="cifar")


def test_overrides():
    assert parse_override("train.optimizer.learning_rate=0.5") == ("train.optimizer.learning_rate", 0.5)
    assert parse_override("dataset.train=foo.csv") == ("dataset.train", "foo.csv")
    cfg = make_config(preset="moons", overrides=["train.epochs_anneal=5", "model.hidden=8"], seed=3, out="x")
    assert cfg.train.epochs_anneal == 5 and cfg.model.hidden == 8
    assert cfg.seed == 3 and cfg.train.seed == 3 and cfg.out == "x"
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_presets_are_not_mutated_by_overrides():
    make_config(preset="moons", overrides=["train.epochs_anneal=5"])
    assert PRESETS["moons"]["train"]["epochs_anneal"] == 2000


def test_hash_is_stable_and_ignores_output_root():
    a = make_config(preset="moons", out="a")
    b = make_config(preset="moons", out="b")
    assert a.hash() == b.hash() and len(a.hash()) == 12
    assert make_config(preset="moons", seed=1).hash() != a.hash()


def test_moons_preset_values():
    cfg = make_config(preset="moons")
    assert (cfg.dataset.n_train, cfg.dataset.n_test) == (200, 200)
    assert cfg.model.hidden == 128 and cfg.model.type == "csnn"
    assert cfg.train.batch_size == 32 and cfg.train.optimizer.kind == "adam"
    assert cfg.train.optimizer.learning_rate == 1e-3 and cfg.train.optimizer.weight_decay == 1e-4
    assert cfg.ood.grid_per_dim == 100 and cfg.ood.min_dist == 0.1


def test_mnist_preset_values():
    cfg = make_config(preset="mnist-small")
    assert cfg.dataset.kind == "idx" and cfg.dataset.limit_train == 5000
    assert cfg.model.backbone_hidden == 128 and cfg.ood.kind == "idx"
