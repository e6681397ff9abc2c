#!/usr/bin/env python3
"""
Tests for configuration loading, overrides, validation and fingerprints
"""

import json
from pathlib import Path

import pytest

from lib.config import (RESOLVED_CONFIG, RunConfig, StageConfig, apply_overrides, check_fingerprint,
                        config_from_dict, config_to_dict, copy_config, fingerprint, load_config, save_resolved)
from lib.errors import ConfigError
from lib.training import learning_rate

REPO = Path(__file__).parent


def test_defaults_validate():
    cfg = config_from_dict({})
    assert cfg.cfvm.top_n == 5
    assert cfg.cfvm.support_m == 10
    assert cfg.cfvm.epsilon == 0.4
    assert cfg.cfvm.margin == 0.2
    assert (cfg.tnm.lambda_noun, cfg.tnm.lambda_l1, cfg.tnm.lambda_giou) == (1.0, 5.0, 2.0)
    assert cfg.eval.null_grounding == "presence"
    assert cfg.eval.settings == ["top1", "top5", "gt_verb"]


def test_shipped_config_loads():
    cfg = load_config(REPO / "config" / "config.json")
    assert cfg.workers == 2
    assert cfg.train.verb_f.steps == 500
    assert cfg.train.tnm.weight_decay == RunConfig().train.tnm.weight_decay


def test_load_yaml_and_json(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 3\ntrain:\n  tnm:\n    lr: 1e-3\n    steps: 20\ncfvm:\n  support_mean: true\n")
    cfg = load_config(path)
    assert cfg.seed == 3
    assert cfg.train.tnm.lr == 0.001
    assert cfg.train.tnm.steps == 20
    assert cfg.cfvm.support_mean is True

    path = tmp_path / "run.json"
    path.write_text(json.dumps({"data": {"split_ratios": [0.5, 0.25, 0.25]}}))
    assert load_config(path).data.split_ratios == [0.5, 0.25, 0.25]
    assert load_config(None).seed == 0


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError, match="parse"):
        load_config(broken)


@pytest.mark.parametrize("values, message", [
    ({"cfvm": {"bogus": 1}}, "unknown config key 'cfvm.bogus'"),
    ({"cfvm": 3}, "must be a mapping"),
    ({"seed": 1.5}, "integer"),
    ({"seed": True}, "integer"),
    ({"cfvm": {"support_mean": "yes"}}, "true or false"),
    ({"cfvm": {"alpha": "high"}}, "number"),
    ({"eval": {"null_grounding": 3}}, "string"),
    ({"data": {"split_ratios": 0.5}}, "list"),
])
def test_type_errors(values, message):
    with pytest.raises(ConfigError, match=message):
        config_from_dict(values)


@pytest.mark.parametrize("values", [
    {"workers": 0},
    {"data": {"split_ratios": [0.5, 0.5]}},
    {"data": {"split_ratios": [0.5, 0.4, 0.3]}},
    {"model": {"dim": 30, "heads": 4}},
    {"model": {"dim": 6, "heads": 2}},
    {"data": {"image_size": 30}},
    {"cfvm": {"margin": 0.0}},
    {"cfvm": {"support_m": 0}},
    {"cfvm": {"top_n": 9}},
    {"cfvm": {"epsilon": 1.2}},
    {"cfvm": {"alpha": -0.1}},
    {"tnm": {"lambda_l1": -1.0}},
    {"train": {"tnm": {"lr": 0.0}}},
    {"train": {"verb_f": {"lr_drop_at": 1.5}}},
    {"eval": {"null_grounding": "ignore"}},
    {"eval": {"settings": ["top3"]}},
])
def test_validation_rejects(values):
    with pytest.raises(ConfigError):
        config_from_dict(values)


def test_overrides():
    cfg = apply_overrides(config_from_dict({}), ["train.tnm.steps=200", "cfvm.alpha=0.25", "eval.split=dev",
                                                 "tnm.use_verb_query=false", "data.split_ratios=[0.8, 0.1, 0.1]"])
    assert cfg.train.tnm.steps == 200
    assert cfg.cfvm.alpha == 0.25
    assert cfg.eval.split == "dev"
    assert cfg.tnm.use_verb_query is False
    assert cfg.data.split_ratios == [0.8, 0.1, 0.1]
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(cfg, ["train.tnm.steps"])
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(cfg, ["train.tnm.stepz=3"])


def test_fingerprint_sections_and_exclusions():
    base = config_from_dict({})
    sections = ("seed", "data", "tnm")
    fp = fingerprint(base, sections)
    assert len(fp) == 64
    assert fingerprint(copy_config(base), sections) == fp

    other_cfvm = config_from_dict({"cfvm": {"alpha": 0.9}})
    assert fingerprint(other_cfvm, sections) == fp
    assert fingerprint(config_from_dict({"tnm": {"lambda_l1": 4.0}}), sections) != fp
    assert fingerprint(config_from_dict({"seed": 1}), sections) != fp

    moved = config_from_dict({"data": {"data_dir": "elsewhere"}})
    assert fingerprint(moved, sections) != fp
    assert fingerprint(moved, sections, ("data.data_dir",)) == fingerprint(base, sections, ("data.data_dir",))

    dotted = ("cfvm.margin",)
    assert fingerprint(other_cfvm, dotted) == fingerprint(base, dotted)


def test_check_fingerprint():
    cfg = config_from_dict({})
    stored = fingerprint(cfg, ("seed", "tnm"))
    check_fingerprint(stored, cfg, ("seed", "tnm"), "tnm checkpoint")
    with pytest.raises(ConfigError, match="tnm checkpoint"):
        check_fingerprint(stored, config_from_dict({"seed": 4}), ("seed", "tnm"), "tnm checkpoint")
    with pytest.raises(ConfigError):
        check_fingerprint(None, cfg, ("seed",), "gallery")


def test_save_resolved_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 7, "output_dir": str(tmp_path / "run")})
    path = save_resolved(cfg)
    assert path == tmp_path / "run" / RESOLVED_CONFIG
    assert config_from_dict(json.loads(path.read_text())) == cfg
    assert config_to_dict(load_config(path)) == config_to_dict(cfg)


def test_learning_rate_step_schedule():
    stage = StageConfig(steps=10, lr=1e-3, lr_drop_at=0.5, lr_drop_factor=0.1)
    assert [learning_rate(s, stage) for s in (0, 4)] == [1e-3, 1e-3]
    assert learning_rate(5, stage) == pytest.approx(1e-4)
    assert learning_rate(9, stage) == pytest.approx(1e-4)

    no_drop = StageConfig(steps=10, lr=1e-3, lr_drop_at=1.0)
    assert learning_rate(9, no_drop) == 1e-3


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
