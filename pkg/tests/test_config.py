import json
from pathlib import Path

import pytest

from mirnet.config import ConfigError, RunConfig, ablation_flags, load_run_config, parse_override
from mirnet.losses import ConstraintKind, ConstraintRule

SMALL = Path(__file__).resolve().parents[1] / "configs" / "small.json"


def write_config(tmp_path, payload, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def test_desk_defaults():
    cfg = load_run_config()
    assert cfg.generator.num_labels == 8
    assert cfg.mae.image_size == cfg.generator.height == 32
    assert (cfg.data.n_labeled, cfg.data.n_unlabeled) == (1000, 2000)


def test_bundled_small_config():
    cfg = load_run_config(SMALL)
    assert len(cfg.generator.resolved_label_names()) == 8
    assert cfg.rules == [ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 1),
                         ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 2),
                         ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 1, 2)]
    assert sorted(k for members in cfg.generator.groups.values() for k in members) == list(range(8))
    json.dumps(cfg.to_dict())


def test_full_profile():
    cfg = load_run_config(profile="full")
    assert cfg.generator.num_labels == 22
    assert cfg.mae.image_size == 224 and cfg.mae.depth == 12
    with pytest.raises(ConfigError, match="profile"):
        load_run_config(profile="huge")


def test_precedence_file_then_overrides_then_seed(tmp_path):
    path = write_config(tmp_path, {"seed": 3, "train": {"epochs": 7, "batch_size": 8}})
    cfg = load_run_config(path, overrides=["train.epochs=9"], seed=11)
    assert (cfg.train.epochs, cfg.train.batch_size) == (9, 8)
    assert cfg.seed == 11 and cfg.generator.seed == 11
    assert load_run_config(path).seed == 3


def test_unknown_key_is_path_qualified(tmp_path):
    with pytest.raises(ConfigError, match=r"^train\.epoch: unknown key"):
        load_run_config(write_config(tmp_path, {"train": {"epoch": 5}}))


def test_wrong_type_is_path_qualified(tmp_path):
    with pytest.raises(ConfigError, match=r"train\.epochs: expected int, got str"):
        load_run_config(write_config(tmp_path, {"train": {"epochs": "many"}}))
    with pytest.raises(ConfigError, match=r"generator\.rules\[0\]\.kind"):
        load_run_config(overrides=['generator.rules=[{"kind": "sometimes", "a": 0, "b": 1}]'])


def test_rules_file_resolved_relative_to_config(tmp_path):
    (tmp_path / "rules.json").write_text('[{"kind": "implication", "a": 7, "b": 0}]')
    cfg = load_run_config(write_config(tmp_path, {"generator": {"rules": "rules.json"}}))
    assert cfg.rules == [ConstraintRule(ConstraintKind.IMPLICATION, 7, 0)]
    with pytest.raises(ConfigError, match="does not exist"):
        load_run_config(write_config(tmp_path, {"generator": {"rules": "absent.json"}}, "other.json"))


def test_inconsistent_sections_rejected(tmp_path):
    with pytest.raises(ConfigError, match="mae.image_size"):
        load_run_config(overrides=["mae.image_size=64"])
    with pytest.raises(ConfigError, match="exceed 1"):
        load_run_config(overrides=["generator.prevalence=[0.9, 0.9, 0.2, 0.35, 0.3, 0.25, 0.15, 0.03]",
                                   'generator.rules=[{"kind": "mutual_exclusion", "a": 0, "b": 1}]'])
    with pytest.raises(ConfigError):
        load_run_config(overrides=['generator.rules=[{"kind": "implication", "a": 0, "b": 12}]'])


def test_bad_config_file(tmp_path):
    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(tmp_path / "broken.json")
    with pytest.raises(ConfigError, match="does not exist"):
        load_run_config(tmp_path / "missing.json")


def test_parse_override():
    assert parse_override("train.epochs=5") == {"train": {"epochs": 5}}
    assert parse_override("report.reference_run=MIRNet-C") == {"report": {"reference_run": "MIRNet-C"}}
    with pytest.raises(ConfigError):
        parse_override("train.epochs")


def test_ablation_flags_and_model_config():
    assert ablation_flags(["gc", "P", "C"]) == ["C", "G", "P"]
    with pytest.raises(ConfigError):
        ablation_flags(["X"])
    cfg = RunConfig()
    assert cfg.model_config(["G"]).use_gat is False
    assert cfg.model_config().num_labels == cfg.generator.num_labels
