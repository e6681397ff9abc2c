#!/usr/bin/env python3
"""
Command line for the situation recognizer.

Subcommands run the pipeline one artifact at a time:
gen-data, train-tnm, train-verb-c, build-gallery, train-verb-f, predict, eval,
plus the sweep, sweep-depth and ablate benchmarks.
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .cfvm import build_gallery, topn, verb_c_forward
from .config import (EVAL_SETTINGS, NULL_CONVENTIONS, RunConfig, apply_overrides, config_from_dict,
                     config_to_dict, fingerprint, load_config, save_resolved)
from .errors import SchemaError, SituError
from .logger import get_logger, log_exception, setup_logging
from .metrics import (MetricReport, check_image_ids, evaluate, evaluate_all, format_table, load_predictions,
                      per_verb_breakdown, write_predictions, write_report)
from .numerics import file_digest, no_tape
from .ontology import VerbLexicon, load_annotations, validate_frame
from .pipeline import Predictor, coarse_view, gold_verb_predictions, ordered_map
from .synth import LEXICON_FILE, SynthSpec, load_meta, load_split, synth_generate, write_dataset
from .training import (ARTIFACT_EXCLUDE, DATA_EXCLUDE, DATA_SECTIONS, GALLERY_SECTIONS, PREDICT_SECTIONS,
                       REPORT_SECTIONS, artifact_paths, check_run_dump, load_gallery, load_head, load_lexicon,
                       load_tnm, load_verb_c, train_tnm, train_verb_c, train_verb_f)

logger = get_logger(__name__)

IO_EXIT_CODE = 6
ABLATIONS = {
    "verb+shared": (True, True),
    "verb+per-verb": (True, False),
    "no-verb+shared": (False, True),
    "no-verb+per-verb": (False, False),
}


# Configuration

def _flag_values(args: argparse.Namespace) -> Dict:
    """Dedicated flags as a nested config mapping; unset flags are left out"""
    values: Dict = {}

    def put(path: str, value):
        if value is None:
            return
        node = values
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    put("seed", args.seed)
    put("output_dir", args.output_dir)
    put("workers", args.workers)
    put("data.data_dir", args.data_dir)
    put("cfvm.top_n", args.top_n)
    put("cfvm.support_m", args.support_m)
    put("cfvm.alpha", args.alpha)
    put("cfvm.beta", args.beta)
    put("cfvm.epsilon", args.epsilon)
    put("cfvm.margin", args.margin)
    put("eval.null_grounding", args.null_grounding)
    if args.support_mean:
        put("cfvm.support_mean", True)
    if args.no_verb_query:
        put("tnm.use_verb_query", False)
    if args.no_shared_role_queries:
        put("tnm.share_role_queries", False)
    if args.no_presence:
        put("tnm.presence_head", False)
    return values


def _deep_update(target: Dict, values: Dict):
    for key, value in values.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _deep_update(target[key], value)
        else:
            target[key] = value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then --set overrides, then dedicated flags"""
    cfg = apply_overrides(load_config(args.config), args.set)
    merged = config_to_dict(cfg)
    _deep_update(merged, _flag_values(args))
    return config_from_dict(merged)


def derive_config(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of cfg with dotted-path changes, e.g. derive_config(cfg, **{"cfvm.support_m": 5})"""
    merged = config_to_dict(cfg)
    for path, value in changes.items():
        node = merged
        parts = path.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(merged)


def _mapper(cfg: RunConfig):
    return lambda fn, items: ordered_map(fn, items, cfg.workers)


def _write_json(path: Path, payload: Dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    return path


# Subcommands

def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec = SynthSpec(**{f.name: getattr(cfg.data, f.name) for f in fields(SynthSpec)})
    dataset = synth_generate(spec, cfg.seed)
    for image in dataset.images:
        violations = validate_frame(image.gold, dataset.lexicon)
        if violations:
            raise SchemaError(f"generated frame for {image.image_id} is invalid: {'; '.join(violations)}")
    counts = write_dataset(cfg.data.data_dir, dataset, cfg.data.split_ratios, extra_meta={
        "seed": cfg.seed,
        "fingerprint": fingerprint(cfg, DATA_SECTIONS, DATA_EXCLUDE),
    })
    print(f"Dataset written to {cfg.data.data_dir}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def cmd_train_tnm(cfg: RunConfig, args: argparse.Namespace) -> int:
    lexicon = load_lexicon(cfg)
    images = load_split(cfg.data.data_dir, "train", lexicon)
    _, result = train_tnm(cfg, lexicon, images)
    print(f"tnm: final loss {result.final_loss:.6f} -> {artifact_paths(cfg).tnm}")
    return 0


def cmd_train_verb_c(cfg: RunConfig, args: argparse.Namespace) -> int:
    lexicon = load_lexicon(cfg)
    images = load_split(cfg.data.data_dir, "train", lexicon)
    _, result = train_verb_c(cfg, lexicon, images)
    print(f"verb_c: final loss {result.final_loss:.6f} -> {artifact_paths(cfg).verb_c}")
    return 0


def cmd_build_gallery(cfg: RunConfig, args: argparse.Namespace) -> int:
    lexicon = load_lexicon(cfg)
    images = load_split(cfg.data.data_dir, "train", lexicon)
    paths = artifact_paths(cfg)
    tnm = load_tnm(cfg, lexicon)
    verb_c = load_verb_c(cfg, lexicon)
    gallery = build_gallery(images, verb_c, tnm, checkpoint_hash=file_digest(paths.tnm, paths.verb_c),
                            fingerprint=fingerprint(cfg, GALLERY_SECTIONS, ARTIFACT_EXCLUDE),
                            mapper=_mapper(cfg))
    gallery.save(paths.gallery, lexicon)
    print(f"Gallery with {len(gallery)} entries -> {paths.gallery}")
    return 0


def cmd_train_verb_f(cfg: RunConfig, args: argparse.Namespace) -> int:
    lexicon = load_lexicon(cfg)
    gallery = load_gallery(cfg, lexicon)
    images = load_split(cfg.data.data_dir, "train", lexicon)
    tnm = load_tnm(cfg, lexicon)
    verb_c = load_verb_c(cfg, lexicon)
    _, result = train_verb_f(cfg, images, verb_c, tnm, gallery)
    final = "n/a" if result.final_loss is None else f"{result.final_loss:.6f}"
    print(f"verb_f: final loss {final} -> {artifact_paths(cfg).verb_f}")
    return 0


def build_predictor(cfg: RunConfig, lexicon: VerbLexicon, use_rerank: bool = True) -> Predictor:
    tnm = load_tnm(cfg, lexicon)
    verb_c = load_verb_c(cfg, lexicon)
    head = gallery = None
    if use_rerank:
        head = load_head(cfg)
        gallery = load_gallery(cfg, lexicon)
    return Predictor(verb_c, tnm, cfg.cfvm, head=head, gallery=gallery, use_rerank=use_rerank)


def _prediction_meta(cfg: RunConfig, split: str, use_rerank: bool) -> Dict:
    c = cfg.cfvm
    return {"split": split, "rerank": use_rerank, "top_n": c.top_n, "support_m": c.support_m,
            "alpha": c.alpha, "beta": c.beta, "epsilon": c.epsilon, "support_mean": c.support_mean,
            "fingerprint": fingerprint(cfg, PREDICT_SECTIONS, ARTIFACT_EXCLUDE)}


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = args.split or cfg.eval.split
    lexicon = load_lexicon(cfg)
    images = load_split(cfg.data.data_dir, split, lexicon)
    use_rerank = not args.no_rerank
    predictor = build_predictor(cfg, lexicon, use_rerank)
    predictions = predictor.predict_all(images, cfg.workers)
    out = Path(args.output) if args.output else artifact_paths(cfg).predictions(split)
    write_predictions(out, predictions, lexicon, meta=_prediction_meta(cfg, split, use_rerank))
    print(f"{len(predictions)} predictions -> {out}")
    return 0


def _confusable_subset(gold, lexicon: VerbLexicon, data_dir: str):
    pairs = load_meta(data_dir).get("confusable_pairs", [])
    verbs = {lexicon.verb_id(name) for pair in pairs for name in pair}
    if not verbs:
        raise SchemaError(f"no confusable pairs recorded in {data_dir}")
    return [item for item in gold if item[1].verb in verbs]


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = args.split or cfg.eval.split
    data_dir = cfg.data.data_dir
    paths = artifact_paths(cfg)
    lexicon = VerbLexicon.load(args.lexicon or Path(data_dir) / LEXICON_FILE)
    gold = load_annotations(args.gold or Path(data_dir) / f"{split}.json", lexicon)
    dump = Path(args.predictions) if args.predictions else paths.predictions(split)
    predictions, meta = load_predictions(dump, lexicon)
    check_run_dump(cfg, dump, meta)
    check_image_ids(predictions, gold)
    if args.subset == "confusable":
        gold = _confusable_subset(gold, lexicon, data_dir)

    null_grounding = cfg.eval.null_grounding
    logger.info(f"Evaluating {dump} on {len(gold)} images, null grounding convention '{null_grounding}'")
    if args.all_settings:
        settings = list(EVAL_SETTINGS)
    elif args.setting:
        settings = [args.setting]
    else:
        settings = list(cfg.eval.settings)
    reports = evaluate_all(predictions, gold, lexicon, settings, null_grounding)

    print(format_table(reports))
    report_path = Path(args.report) if args.report else paths.report(split)
    write_report(report_path, reports, meta={"predictions": str(dump), "subset": args.subset or "all",
                                             "dump_meta": meta,
                                             "fingerprint": fingerprint(cfg, REPORT_SECTIONS, ARTIFACT_EXCLUDE)})
    if args.per_verb:
        out = _write_json(paths.output_dir / f"per_verb_{split}.json",
                          per_verb_breakdown(predictions, gold, lexicon, null_grounding))
        print(f"Per-verb breakdown -> {out}")
    return 0


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Verb accuracy for several support-set sizes, plus the coarse-only row"""
    split = args.split or cfg.eval.split
    lexicon = load_lexicon(cfg)
    images = load_split(cfg.data.data_dir, split, lexicon)
    gold = [(im.image_id, im.gold) for im in images]
    null_grounding = cfg.eval.null_grounding

    rows: Dict[str, Dict[str, MetricReport]] = {}
    for m in args.values:
        run_cfg = derive_config(cfg, **{"cfvm.support_m": m})
        predictions = build_predictor(run_cfg, lexicon).predict_all(images, cfg.workers)
        rows[f"M={m}"] = evaluate_all(predictions, gold, lexicon, ("top1", "top5"), null_grounding)
        if "coarse" not in rows:
            rows["coarse"] = evaluate_all(coarse_view(predictions), gold, lexicon, ("top1", "top5"),
                                          null_grounding)

    print(f"{'support':<10}  {'top-1':>8}  {'top-5':>8}")
    for name, reports in rows.items():
        print(f"{name:<10}  {100 * reports['top1'].verb_acc:8.2f}  {100 * reports['top5'].verb_acc:8.2f}")
    _write_json(artifact_paths(cfg).output_dir / f"sweep_support_m_{split}.json",
                {name: {s: r.to_json() for s, r in reports.items()} for name, reports in rows.items()})
    return 0


def verb_accuracy(verb_c, images, workers: int = 1) -> Dict[str, float]:
    def one(image):
        with no_tape():
            probs, _ = verb_c_forward(image.grid, verb_c)
        ranked = topn(probs, min(5, len(probs)))
        return ranked[0] == image.gold.verb, image.gold.verb in ranked

    hits = ordered_map(one, images, workers)
    n = max(len(hits), 1)
    return {"top1": sum(h[0] for h in hits) / n, "top5": sum(h[1] for h in hits) / n}


def cmd_sweep_depth(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Retrain the coarse classifier for each encoder depth"""
    split = args.split or cfg.eval.split
    lexicon = load_lexicon(cfg)
    train = load_split(cfg.data.data_dir, "train", lexicon)
    images = load_split(cfg.data.data_dir, split, lexicon)

    results = {}
    for depth in args.depths:
        run_cfg = derive_config(cfg, **{"model.verb_c_encoder_layers": depth,
                                        "output_dir": str(Path(cfg.output_dir) / "depth" / f"layers_{depth}")})
        save_resolved(run_cfg)
        model, _ = train_verb_c(run_cfg, lexicon, train)
        results[depth] = verb_accuracy(model, images, cfg.workers)
        logger.info(f"verb_c with {depth} encoder layers: top-1 {results[depth]['top1']:.4f}")

    print(f"{'layers':<8}  {'top-1':>8}  {'top-5':>8}")
    for depth, acc in results.items():
        print(f"{depth:<8}  {100 * acc['top1']:8.2f}  {100 * acc['top5']:8.2f}")
    _write_json(artifact_paths(cfg).output_dir / f"sweep_depth_{split}.json",
                {str(d): a for d, a in results.items()})
    return 0


def run_ablation(cfg: RunConfig, lexicon: VerbLexicon, train, images, seeds: int,
                 names: Sequence[str] = tuple(ABLATIONS)) -> Dict[str, Dict[str, float]]:
    """Ground-truth-verb metrics of the noun model per query configuration, averaged over seeds"""
    gold = [(im.image_id, im.gold) for im in images]
    out = {}
    for name in names:
        use_verb_query, share_role_queries = ABLATIONS[name]
        totals: Dict[str, float] = {}
        for k in range(seeds):
            run_cfg = derive_config(cfg, **{
                "seed": cfg.seed + k,
                "tnm.use_verb_query": use_verb_query,
                "tnm.share_role_queries": share_role_queries,
                "output_dir": str(Path(cfg.output_dir) / "ablate" / name / f"seed{cfg.seed + k}"),
            })
            save_resolved(run_cfg)
            model, _ = train_tnm(run_cfg, lexicon, train)
            report = evaluate(gold_verb_predictions(model, images, cfg.workers), gold, lexicon, "gt_verb",
                              cfg.eval.null_grounding)
            for metric in ("value", "value_all", "grnd", "grnd_all"):
                totals[metric] = totals.get(metric, 0.0) + report.ratio(metric) / seeds
        out[name] = totals
        logger.info(f"ablation {name}: " + ", ".join(f"{k} {v:.4f}" for k, v in totals.items()))
    return out


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = args.split or cfg.eval.split
    lexicon = load_lexicon(cfg)
    train = load_split(cfg.data.data_dir, "train", lexicon)
    images = load_split(cfg.data.data_dir, split, lexicon)
    results = run_ablation(cfg, lexicon, train, images, args.seeds)

    print(f"{'queries':<18}  " + "  ".join(f"{h:>8}" for h in ("value", "val-all", "grnd", "grnd-all")))
    for name, row in results.items():
        print(f"{name:<18}  " + "  ".join(f"{100 * row[m]:8.2f}"
                                         for m in ("value", "value_all", "grnd", "grnd_all")))
    _write_json(artifact_paths(cfg).output_dir / f"ablate_{split}.json", results)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tnm": cmd_train_tnm,
    "train-verb-c": cmd_train_verb_c,
    "build-gallery": cmd_build_gallery,
    "train-verb-f": cmd_train_verb_f,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "sweep-depth": cmd_sweep_depth,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON or YAML config file')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config field, e.g. --set train.tnm.steps=200')
    common.add_argument('--seed', type=int, help='Random seed')
    common.add_argument('--output-dir', help='Directory for checkpoints, dumps and logs')
    common.add_argument('--data-dir', help='Dataset directory')
    common.add_argument('--workers', type=int, help='Worker threads for prediction and gallery building')
    common.add_argument('--top-n', type=int, help='Candidate verbs kept from the coarse classifier')
    common.add_argument('--support-m', type=int, help='Support images per candidate verb')
    common.add_argument('--alpha', type=float, help='Weight of the coarse probability in re-ranking')
    common.add_argument('--beta', type=float, help='Weight of the support score in re-ranking')
    common.add_argument('--epsilon', type=float, help='Re-rank when the top probability is below this')
    common.add_argument('--margin', type=float, help='Triplet margin')
    common.add_argument('--support-mean', action='store_true', help='Average instead of sum support scores')
    common.add_argument('--no-verb-query', action='store_true', help='Decode without the verb query')
    common.add_argument('--no-shared-role-queries', action='store_true',
                        help='Use per-verb role queries instead of shared ones')
    common.add_argument('--no-presence', action='store_true', help='Disable the role presence head')
    common.add_argument('--null-grounding', choices=NULL_CONVENTIONS,
                        help='How roles without a gold box count towards grounding')
    common.add_argument('--debug', action='store_true', help='Enable debug logging')

    parser = argparse.ArgumentParser(prog="situformer", description="Grounded situation recognition at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="Generate the synthetic dataset")
    sub.add_parser("train-tnm", parents=[common], help="Train the noun model")
    sub.add_parser("train-verb-c", parents=[common], help="Train the coarse verb classifier")
    sub.add_parser("build-gallery", parents=[common], help="Cache training features for retrieval")
    sub.add_parser("train-verb-f", parents=[common], help="Train the fine verb head")

    p = sub.add_parser("predict", parents=[common], help="Write a prediction dump for a split")
    p.add_argument('--split', help='Dataset split (default: eval.split)')
    p.add_argument('--no-rerank', action='store_true', help='Keep the coarse ranking')
    p.add_argument('--output', help='Prediction dump path')

    p = sub.add_parser("eval", parents=[common], help="Score a prediction dump")
    p.add_argument('--split', help='Dataset split (default: eval.split)')
    p.add_argument('--predictions', help='Prediction dump (default: the run\'s dump for the split)')
    p.add_argument('--gold', help='Gold annotation file (default: the split file)')
    p.add_argument('--lexicon', help='Lexicon file (default: the dataset lexicon)')
    p.add_argument('--report', help='Report path')
    p.add_argument('--setting', choices=EVAL_SETTINGS, help='Score a single verb setting')
    p.add_argument('--all-settings', action='store_true', help='Score top-1, top-5 and ground-truth verb')
    p.add_argument('--per-verb', action='store_true', help='Also write a per-verb breakdown')
    p.add_argument('--subset', choices=("confusable",), help='Restrict scoring to confusable verb pairs')

    p = sub.add_parser("sweep", parents=[common], help="Verb accuracy across support-set sizes")
    p.add_argument('--split', help='Dataset split (default: eval.split)')
    p.add_argument('--values', type=int, nargs='+', default=[1, 5, 10, 20], help='Support sizes to try')

    p = sub.add_parser("sweep-depth", parents=[common], help="Coarse verb accuracy across encoder depths")
    p.add_argument('--split', help='Dataset split (default: eval.split)')
    p.add_argument('--depths', type=int, nargs='+', default=[0, 2, 4], help='Encoder depths to try')

    p = sub.add_parser("ablate", parents=[common], help="Noun model query ablation")
    p.add_argument('--split', help='Dataset split (default: eval.split)')
    p.add_argument('--seeds', type=int, default=1, help='Seeds averaged per configuration')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except SituError as e:
        setup_logging(debug=args.debug)
        log_exception(e, "Invalid configuration")
        return e.exit_code

    try:
        setup_logging(Path(cfg.output_dir) / "logs", args.debug)
        save_resolved(cfg)
        logger.info(f"Running {args.command} (seed {cfg.seed}, output {cfg.output_dir})")
        return COMMANDS[args.command](cfg, args)
    except SituError as e:
        log_exception(e, f"{args.command} failed")
        return e.exit_code
    except OSError as e:
        log_exception(e, f"{args.command} failed on file access")
        return IO_EXIT_CODE
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
