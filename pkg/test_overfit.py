#!/usr/bin/env python3
"""
Training smoke tests; the acceptance-scale ones are marked slow (pytest --runslow)
"""

import json
from dataclasses import fields
from pathlib import Path

import pytest

from lib.cli import main, run_ablation, verb_accuracy
from lib.config import config_from_dict
from lib.metrics import evaluate, load_predictions
from lib.ontology import load_annotations
from lib.pipeline import gold_verb_predictions
from lib.synth import SynthSpec, load_split, synth_generate
from lib.training import load_lexicon, train_tnm, train_verb_c


def small_config(tmp_path, steps=50):
    stage = {"steps": steps, "lr": 3e-3, "lr_drop_at": 1.0, "log_every": 25}
    values = {
        "output_dir": str(tmp_path / "run"),
        "data": {"num_verbs": 2, "image_size": 16, "cell_size": 4, "count": 2, "roles_max": 2, "num_nouns": 6},
        "model": {"dim": 16, "heads": 2, "ff_dim": 32, "patch": 4, "verb_c_encoder_layers": 1},
        "tnm": {"encoder_layers": 1, "decoder_layers": 1},
        "train": {"tnm": stage, "verb_c": stage, "verb_f": stage},
        "cfvm": {"top_n": 2},
    }
    return config_from_dict(values)


def dataset(cfg):
    spec = SynthSpec(**{f.name: getattr(cfg.data, f.name) for f in fields(SynthSpec)})
    return synth_generate(spec, cfg.seed)


def test_tnm_loss_drops_on_one_image(tmp_path):
    cfg = small_config(tmp_path)
    data = dataset(cfg)
    _, result = train_tnm(cfg, data.lexicon, data.images[:1], save=False)
    assert len(result.losses) == 50
    blocks = [sum(result.losses[i:i + 10]) / 10 for i in range(0, 50, 10)]
    assert all(later < earlier for earlier, later in zip(blocks, blocks[1:])), blocks


def test_verb_c_loss_drops_on_one_image(tmp_path):
    cfg = small_config(tmp_path)
    data = dataset(cfg)
    _, result = train_verb_c(cfg, data.lexicon, data.images[:1], save=False)
    assert result.losses[-1] < result.losses[0]


def test_training_is_deterministic(tmp_path):
    cfg = small_config(tmp_path, steps=5)
    data = dataset(cfg)
    first, a = train_tnm(cfg, data.lexicon, data.images, save=False)
    second, b = train_tnm(cfg, data.lexicon, data.images, save=False)
    assert a.losses == b.losses
    assert all((first.state_dict()[k] == v).all() for k, v in second.state_dict().items())


# Acceptance scale

def acceptance_config(tmp_path):
    stage = {"steps": 2000, "lr": 1e-3, "lr_drop_at": 0.75, "log_every": 200}
    values = {
        "output_dir": str(tmp_path / "run"),
        "data": {"data_dir": str(tmp_path / "data"), "num_verbs": 8, "count": 400},
        "model": {"dim": 32, "heads": 4, "ff_dim": 64, "verb_c_encoder_layers": 2},
        "train": {"tnm": stage, "verb_c": stage, "verb_f": {"steps": 500, "lr": 5e-4, "log_every": 100}},
    }
    return values


@pytest.mark.slow
def test_overfit_smoke(tmp_path):
    values = acceptance_config(tmp_path)
    values["data"]["split_ratios"] = [1.0, 0.0, 0.0]
    cfg = config_from_dict(values)
    data = dataset(cfg)
    images = data.images

    verb_c, _ = train_verb_c(cfg, data.lexicon, images, save=False)
    assert verb_accuracy(verb_c, images)["top1"] == 1.0

    tnm, _ = train_tnm(cfg, data.lexicon, images, save=False)
    gold = [(im.image_id, im.gold) for im in images]
    report = evaluate(gold_verb_predictions(tnm, images), gold, data.lexicon, "gt_verb")
    assert report.value >= 0.95
    assert report.grnd >= 0.80


def run_pipeline(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    config = root / "config.json"
    values = acceptance_config(root)
    values["data"]["split_ratios"] = [0.6, 0.2, 0.2]
    # patches without positions cannot tell a layout from its mirror
    values["model"]["verb_c_position_encoding"] = False
    values["cfvm"] = {"epsilon": 1.0}
    config.write_text(json.dumps(values))
    for command in ("gen-data", "train-tnm", "train-verb-c", "build-gallery", "train-verb-f"):
        assert main([command, "--config", str(config)]) == 0
    args = ["--config", str(config), "--split", "dev"]
    assert main(["predict", *args]) == 0
    assert main(["predict", *args, "--no-rerank", "--output", str(root / "coarse_dev.json")]) == 0
    assert main(["eval", *args, "--all-settings"]) == 0
    return config


def top1(dump: Path, gold, lexicon, verbs=None) -> float:
    predictions, _ = load_predictions(dump, lexicon)
    subset = [g for g in gold if verbs is None or g[1].verb in verbs]
    return evaluate(predictions, subset, lexicon, "top1").verb_acc


@pytest.mark.slow
def test_coarse_to_fine_gain_and_determinism(tmp_path):
    config = run_pipeline(tmp_path / "a")
    cfg = config_from_dict(json.loads(config.read_text()))
    lexicon = load_lexicon(cfg)
    gold = load_annotations(Path(cfg.data.data_dir) / "dev.json", lexicon)
    run = Path(cfg.output_dir)

    meta = json.loads((Path(cfg.data.data_dir) / "synth_meta.json").read_text())
    confusable = {lexicon.verb_id(name) for pair in meta["confusable_pairs"] for name in pair}
    reranked, coarse = run / "predictions_dev.json", tmp_path / "a" / "coarse_dev.json"
    assert top1(reranked, gold, lexicon) >= top1(coarse, gold, lexicon)
    assert top1(reranked, gold, lexicon, confusable) > top1(coarse, gold, lexicon, confusable)

    run_pipeline(tmp_path / "b")
    first = json.loads((run / "report_dev.json").read_text())["settings"]
    second = json.loads((tmp_path / "b" / "run" / "report_dev.json").read_text())["settings"]
    assert first == second


@pytest.mark.slow
def test_query_ablation_direction(tmp_path):
    root = tmp_path
    config = root / "config.json"
    values = acceptance_config(root)
    values["data"].update(anchored_roles=True, num_roles=6, roles_min=2, roles_max=3)
    values["tnm"] = {"decoder_layers": 1}
    values["train"]["tnm"]["steps"] = 800
    config.write_text(json.dumps(values))
    assert main(["gen-data", "--config", str(config)]) == 0

    cfg = config_from_dict(values)
    lexicon = load_lexicon(cfg)
    train = load_split(cfg.data.data_dir, "train", lexicon)
    dev = load_split(cfg.data.data_dir, "dev", lexicon)
    results = run_ablation(cfg, lexicon, train, dev, seeds=3)
    full = results["verb+shared"]["value"]
    for name in ("verb+per-verb", "no-verb+shared", "no-verb+per-verb"):
        assert results[name]["value"] <= full, name


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
