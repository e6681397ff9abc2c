#!/usr/bin/env python3
"""
Grounded situation recognition metrics

verb, value, value-all, grnd and grnd-all under the top-1, top-5 and
ground-truth-verb settings. value and grnd are micro-averages over gold role
slots; value-all and grnd-all are per-image rates.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .config import EVAL_SETTINGS, NULL_CONVENTIONS
from .errors import ConfigError, DegenerateBoxError, SchemaError
from .logger import get_logger
from .ontology import BBox, GroundedFrame, VerbLexicon, box_overlap

logger = get_logger(__name__)

PREDICTIONS_FORMAT = "situformer-predictions/1"
REPORT_FORMAT = "situformer-report/1"
IOU_THRESHOLD = 0.5
METRICS = ("verb", "value", "value_all", "grnd", "grnd_all")
TABLE_HEADERS = ("verb", "value", "val-all", "grnd", "grnd-all")


def iou(a, b) -> float:
    inter, union, _ = box_overlap(a, b)
    return inter / union


def score_role(pred_noun: int, pred_box: Optional[BBox], pred_present: bool, gold_nouns: Iterable[int],
               gold_box: Optional[BBox]) -> Tuple[bool, bool]:
    """(noun correct, grounded correct); a role with no gold box is grounded iff predicted absent"""
    noun_ok = pred_noun in set(gold_nouns)
    if not noun_ok:
        return False, False
    if gold_box is None:
        return True, not pred_present
    if not pred_present or pred_box is None:
        return True, False
    try:
        return True, iou(pred_box, gold_box) >= IOU_THRESHOLD
    except DegenerateBoxError:
        logger.debug(f"Degenerate predicted box {pred_box} scored as a miss")
        return True, False


@dataclass
class RolePrediction:
    role: int
    noun: int
    box: Optional[BBox]
    present: bool = True


@dataclass
class CandidateFrame:
    verb: int
    prob: float
    roles: List[RolePrediction]
    coarse_prob: Optional[float] = None


@dataclass
class Prediction:
    """Ranked candidate verbs, each with its own role predictions"""
    image_id: str
    ranked: List[CandidateFrame]
    gold_frame: Optional[CandidateFrame] = None

    @property
    def ranked_verbs(self) -> List[int]:
        return [c.verb for c in self.ranked]

    def frame_for(self, verb: int) -> Optional[CandidateFrame]:
        for candidate in self.ranked:
            if candidate.verb == verb:
                return candidate
        return None


@dataclass
class MetricReport:
    setting: str
    null_grounding: str
    counts: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    def ratio(self, name: str) -> float:
        num, den = self.counts[name]
        return num / den if den else 0.0

    @property
    def verb_acc(self) -> float:
        return self.ratio("verb")

    @property
    def value(self) -> float:
        return self.ratio("value")

    @property
    def val_all(self) -> float:
        return self.ratio("value_all")

    @property
    def grnd(self) -> float:
        return self.ratio("grnd")

    @property
    def grnd_all(self) -> float:
        return self.ratio("grnd_all")

    def to_json(self) -> Dict:
        out = {name: self.ratio(name) for name in METRICS}
        out["counts"] = {name: list(self.counts[name]) for name in METRICS}
        return out

    @classmethod
    def from_json(cls, setting: str, null_grounding: str, data: Mapping) -> "MetricReport":
        try:
            counts = {name: (int(data["counts"][name][0]), int(data["counts"][name][1])) for name in METRICS}
        except (KeyError, IndexError, TypeError) as e:
            raise SchemaError(f"report for setting '{setting}' lacks counts: {e}") from e
        return cls(setting=setting, null_grounding=null_grounding, counts=counts)


def _scored_frame(pred: Prediction, gold_verb: int, setting: str) -> Tuple[bool, Optional[CandidateFrame]]:
    ranked = pred.ranked_verbs
    if setting == "gt_verb":
        frame = pred.frame_for(gold_verb) or pred.gold_frame
        if frame is None or frame.verb != gold_verb:
            raise SchemaError(f"image {pred.image_id} has no prediction conditioned on its gold verb")
        return True, frame
    k = 1 if setting == "top1" else 5
    if gold_verb in ranked[:k]:
        return True, pred.frame_for(gold_verb)
    return False, None


def evaluate(predictions: Union[Mapping[str, Prediction], Sequence[Prediction]],
             gold: Sequence[Tuple[str, GroundedFrame]], lexicon: VerbLexicon, setting: str,
             null_grounding: str = "presence") -> MetricReport:
    """
    Score predictions against gold frames under one verb setting.

    With null_grounding="exclude", roles without a gold box leave the grnd
    denominator; grnd-all then needs every noun right and every boxed role
    grounded.
    """
    if setting not in EVAL_SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {EVAL_SETTINGS}")
    if null_grounding not in NULL_CONVENTIONS:
        raise ConfigError(f"unknown null grounding convention {null_grounding!r}")
    if not isinstance(predictions, Mapping):
        predictions = {p.image_id: p for p in predictions}
    if not gold:
        raise SchemaError("no gold frames to evaluate")

    verb_num = value_num = value_den = all_num = grnd_num = grnd_den = grnd_all_num = 0
    for image_id, frame in gold:
        pred = predictions.get(image_id)
        if pred is None:
            raise SchemaError(f"missing prediction for image {image_id}")
        verb_ok, cand = _scored_frame(pred, frame.verb, setting)
        verb_num += verb_ok

        if cand is not None and [r.role for r in cand.roles] != list(frame.roles):
            raise SchemaError(f"image {image_id}: predicted roles do not match the roles of "
                              f"'{lexicon.verb_name(frame.verb)}'")
        all_nouns, all_grounded = True, True
        for j, entry in enumerate(frame.entries):
            if cand is None:
                noun_ok = grounded_ok = False
            else:
                rp = cand.roles[j]
                noun_ok, grounded_ok = score_role(rp.noun, rp.box, rp.present, entry.gold_nouns, entry.box)
            value_den += 1
            value_num += noun_ok
            all_nouns &= noun_ok
            if null_grounding == "exclude" and entry.box is None:
                continue
            grnd_den += 1
            grnd_num += grounded_ok
            all_grounded &= grounded_ok
        all_num += all_nouns
        if null_grounding == "exclude":
            all_grounded &= all_nouns
        grnd_all_num += all_grounded

    n = len(gold)
    return MetricReport(setting=setting, null_grounding=null_grounding, counts={
        "verb": (verb_num, n),
        "value": (value_num, value_den),
        "value_all": (all_num, n),
        "grnd": (grnd_num, grnd_den),
        "grnd_all": (grnd_all_num, n),
    })


def evaluate_all(predictions, gold, lexicon: VerbLexicon, settings: Sequence[str] = EVAL_SETTINGS,
                 null_grounding: str = "presence") -> Dict[str, MetricReport]:
    return {s: evaluate(predictions, gold, lexicon, s, null_grounding) for s in settings}


def per_verb_breakdown(predictions, gold: Sequence[Tuple[str, GroundedFrame]], lexicon: VerbLexicon,
                       null_grounding: str = "presence") -> Dict[str, Dict]:
    """Debug dump: per gold verb, top-1 and ground-truth-verb reports"""
    by_verb: Dict[int, List[Tuple[str, GroundedFrame]]] = {}
    for item in gold:
        by_verb.setdefault(item[1].verb, []).append(item)
    out = {}
    for verb in sorted(by_verb):
        subset = by_verb[verb]
        out[lexicon.verb_name(verb)] = {
            "images": len(subset),
            "top1": evaluate(predictions, subset, lexicon, "top1", null_grounding).to_json(),
            "gt_verb": evaluate(predictions, subset, lexicon, "gt_verb", null_grounding).to_json(),
        }
    return out


def format_table(reports: Mapping[str, MetricReport]) -> str:
    """Percentages laid out as setting | verb value val-all grnd grnd-all"""
    labels = {"top1": "Top-1-Verb", "top5": "Top-5-Verb", "gt_verb": "Ground-Truth-Verb"}
    width = max(len(labels.get(s, s)) for s in reports) if reports else 10
    lines = [f"{'setting':<{width}}  " + "  ".join(f"{h:>8}" for h in TABLE_HEADERS)]
    lines.append("-" * len(lines[0]))
    for setting, report in reports.items():
        values = [100.0 * report.ratio(name) for name in METRICS]
        lines.append(f"{labels.get(setting, setting):<{width}}  " + "  ".join(f"{v:8.2f}" for v in values))
    return "\n".join(lines)


# Prediction dump and report files

def _box_json(box: Optional[BBox]):
    return None if box is None else box.to_list()


def _frame_json(frame: CandidateFrame, lexicon: VerbLexicon) -> Dict:
    out = {
        "verb": lexicon.verb_name(frame.verb),
        "prob": frame.prob,
        "roles": {
            lexicon.role_name(r.role): {"noun": lexicon.noun_name(r.noun), "box": _box_json(r.box),
                                        "present": bool(r.present)}
            for r in frame.roles
        },
    }
    if frame.coarse_prob is not None:
        out["coarse_prob"] = frame.coarse_prob
    return out


def _frame_from_json(raw: Mapping, lexicon: VerbLexicon, image_id: str) -> CandidateFrame:
    try:
        verb = lexicon.verb_id(raw["verb"])
        roles_raw = dict(raw["roles"])
        prob = float(raw.get("prob", 0.0))
        coarse = raw.get("coarse_prob")
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise SchemaError(f"image {image_id}: malformed candidate {raw!r}: {e!r}") from e
    expected = [lexicon.role_name(r) for r in lexicon.roles_of(verb)]
    if sorted(roles_raw.keys()) != sorted(expected):
        raise SchemaError(f"image {image_id}: roles {sorted(roles_raw)} do not match verb '{raw['verb']}' {expected}")
    roles = []
    for name in expected:
        value = roles_raw[name]
        try:
            box = value.get("box")
            if box is not None and len(box) != 4:
                raise SchemaError(f"image {image_id}: box for role '{name}' needs 4 values")
            roles.append(RolePrediction(role=lexicon.role_id(name),
                                        noun=lexicon.noun_id(value["noun"], oov="unknown"),
                                        box=None if box is None else BBox(*(float(v) for v in box)),
                                        present=bool(value.get("present", True))))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise SchemaError(f"image {image_id}: role '{name}' is malformed, missing or bad field {e!r}") from e
    return CandidateFrame(verb=verb, prob=prob, roles=roles, coarse_prob=None if coarse is None else float(coarse))


def write_predictions(path: Union[str, Path], predictions: Sequence[Prediction], lexicon: VerbLexicon,
                      meta: Optional[Dict] = None) -> Path:
    payload = {"format": PREDICTIONS_FORMAT, "meta": meta or {}, "images": {}}
    for pred in predictions:
        entry = {"ranked": [_frame_json(c, lexicon) for c in pred.ranked]}
        if pred.gold_frame is not None:
            entry["gt_verb_frame"] = _frame_json(pred.gold_frame, lexicon)
        payload["images"][pred.image_id] = entry
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
    logger.info(f"Wrote {len(predictions)} predictions to: {path}")
    return path


def load_predictions(path: Union[str, Path], lexicon: VerbLexicon) -> Tuple[Dict[str, Prediction], Dict]:
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"prediction dump {path} is not valid JSON: {e}") from e
    if payload.get("format") != PREDICTIONS_FORMAT:
        raise SchemaError(f"prediction dump {path} has format {payload.get('format')!r}, "
                          f"expected {PREDICTIONS_FORMAT!r}")
    out = {}
    for image_id, entry in payload.get("images", {}).items():
        if not isinstance(entry, dict):
            raise SchemaError(f"image {image_id}: entry must be an object, got {type(entry).__name__}")
        ranked = [_frame_from_json(raw, lexicon, image_id) for raw in entry.get("ranked", [])]
        if not ranked:
            raise SchemaError(f"image {image_id}: no ranked candidates")
        verbs = [c.verb for c in ranked]
        if len(set(verbs)) != len(verbs):
            raise SchemaError(f"image {image_id}: ranked verbs are not distinct")
        gold_raw = entry.get("gt_verb_frame")
        gold_frame = _frame_from_json(gold_raw, lexicon, image_id) if gold_raw else None
        out[image_id] = Prediction(image_id=image_id, ranked=ranked, gold_frame=gold_frame)
    return out, payload.get("meta", {})


def check_image_ids(predictions: Mapping[str, Prediction], gold: Sequence[Tuple[str, GroundedFrame]]):
    gold_ids = {image_id for image_id, _ in gold}
    missing = sorted(gold_ids - set(predictions))
    extra = sorted(set(predictions) - gold_ids)
    if missing or extra:
        raise SchemaError(f"image ids differ between dump and gold: {len(missing)} missing "
                          f"(e.g. {missing[:3]}), {len(extra)} unexpected (e.g. {extra[:3]})")


def write_report(path: Union[str, Path], reports: Mapping[str, MetricReport], meta: Optional[Dict] = None) -> Path:
    conventions = {r.null_grounding for r in reports.values()}
    payload = {
        "format": REPORT_FORMAT,
        "null_grounding": conventions.pop() if len(conventions) == 1 else sorted(conventions),
        "meta": meta or {},
        "settings": {setting: report.to_json() for setting, report in reports.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def load_report(path: Union[str, Path]) -> Dict[str, MetricReport]:
    with open(path, "r") as f:
        payload = json.load(f)
    if payload.get("format") != REPORT_FORMAT:
        raise SchemaError(f"report {path} has format {payload.get('format')!r}, expected {REPORT_FORMAT!r}")
    null_grounding = payload.get("null_grounding", "presence")
    return {setting: MetricReport.from_json(setting, null_grounding, data)
            for setting, data in payload.get("settings", {}).items()}
