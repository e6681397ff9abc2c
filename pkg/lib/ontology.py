#!/usr/bin/env python3
"""
Verb lexicon, grounded frames and SWiG-style annotation files

Annotation files map image id -> {"verb", "width", "height", "frames", "bb"}.
Each of the (usually three) annotator frames maps role -> {"noun": name};
"bb" maps role -> pixel corners [x1, y1, x2, y2], with null or
[-1, -1, -1, -1] for roles that have no visible grounding.
"""

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import DegenerateBoxError, SchemaError
from .logger import get_logger

logger = get_logger(__name__)

LEXICON_FORMAT = "situformer-lexicon/1"
UNKNOWN_NOUN = 0
UNKNOWN_NOUN_NAME = "blank"
NULL_BOX = (-1, -1, -1, -1)
DEFAULT_MAX_ROLES = 6
ANNOTATORS = 3


@dataclass(frozen=True)
class BBox:
    """Center-format box normalized to the image extent"""
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)

    def corners(self, clip: bool = True) -> Tuple[float, float, float, float]:
        x1, y1 = self.cx - self.w / 2.0, self.cy - self.h / 2.0
        x2, y2 = self.cx + self.w / 2.0, self.cy + self.h / 2.0
        if clip:
            x1, y1 = min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0)
            x2, y2 = min(max(x2, 0.0), 1.0), min(max(y2, 0.0), 1.0)
        return (x1, y1, x2, y2)

    def to_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]

    def problems(self) -> List[str]:
        issues = []
        if self.w <= 0 or self.h <= 0:
            issues.append("degenerate box")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0 and self.w <= 1.0 and self.h <= 1.0):
            issues.append("box out of range")
        return issues


@dataclass(frozen=True)
class RoleEntry:
    role: int
    gold_nouns: Tuple[int, ...]
    box: Optional[BBox] = None


@dataclass(frozen=True)
class GroundedFrame:
    """One verb frame: per-role gold noun sets and optional boxes, in lexicon role order"""
    verb: int
    entries: Tuple[RoleEntry, ...]

    @property
    def roles(self) -> Tuple[int, ...]:
        return tuple(e.role for e in self.entries)


class VerbLexicon:
    """Verb catalog with ordered role lists plus role and noun vocabularies"""

    def __init__(self, roles_of: Mapping[str, Sequence[str]], nouns: Sequence[str],
                 max_roles: int = DEFAULT_MAX_ROLES, truncated: bool = False):
        self.verbs: List[str] = list(roles_of.keys())
        self.max_roles = max_roles
        self.truncated = truncated

        self.role_vocab: List[str] = []
        role_index: Dict[str, int] = {}
        self._roles_of: List[Tuple[int, ...]] = []
        for verb in self.verbs:
            roles = list(roles_of[verb])
            if not 1 <= len(roles) <= max_roles:
                raise SchemaError(f"verb '{verb}' has {len(roles)} roles, allowed 1..{max_roles}")
            if len(set(roles)) != len(roles):
                raise SchemaError(f"verb '{verb}' lists a role twice")
            for role in roles:
                if role not in role_index:
                    role_index[role] = len(self.role_vocab)
                    self.role_vocab.append(role)
            self._roles_of.append(tuple(role_index[r] for r in roles))

        nouns = list(nouns)
        if not nouns or nouns[0] != UNKNOWN_NOUN_NAME:
            nouns = [UNKNOWN_NOUN_NAME] + [n for n in nouns if n != UNKNOWN_NOUN_NAME]
        self.noun_vocab: List[str] = nouns

        self._verb_index = {name: i for i, name in enumerate(self.verbs)}
        self._role_index = role_index
        self._noun_index = {name: i for i, name in enumerate(self.noun_vocab)}

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_roles(self) -> int:
        return len(self.role_vocab)

    @property
    def num_nouns(self) -> int:
        return len(self.noun_vocab)

    def roles_of(self, verb: int) -> Tuple[int, ...]:
        if not 0 <= verb < self.num_verbs:
            raise SchemaError(f"unknown verb id {verb}")
        return self._roles_of[verb]

    def verb_id(self, name: str) -> int:
        try:
            return self._verb_index[name]
        except KeyError:
            raise SchemaError(f"unknown verb '{name}'") from None

    def role_id(self, name: str) -> int:
        try:
            return self._role_index[name]
        except KeyError:
            raise SchemaError(f"unknown role '{name}'") from None

    def noun_id(self, name: str, oov: str = "error") -> int:
        # SWiG writes "" for a blank role value
        if name == "" or name is None:
            return UNKNOWN_NOUN
        idx = self._noun_index.get(name)
        if idx is None:
            if oov == "unknown":
                return UNKNOWN_NOUN
            raise SchemaError(f"unknown noun '{name}'")
        return idx

    def verb_name(self, verb: int) -> str:
        return self.verbs[verb]

    def role_name(self, role: int) -> str:
        return self.role_vocab[role]

    def noun_name(self, noun: int) -> str:
        return self.noun_vocab[noun]

    def to_json(self) -> Dict:
        return {
            "format": LEXICON_FORMAT,
            "max_roles": self.max_roles,
            "truncated": self.truncated,
            "verbs": {v: [self.role_vocab[r] for r in self._roles_of[i]] for i, v in enumerate(self.verbs)},
            "nouns": list(self.noun_vocab),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "VerbLexicon":
        if data.get("format", LEXICON_FORMAT) != LEXICON_FORMAT:
            raise SchemaError(f"unsupported lexicon format {data.get('format')!r}")
        if "verbs" not in data or "nouns" not in data:
            raise SchemaError("lexicon needs 'verbs' and 'nouns'")
        return cls(data["verbs"], data["nouns"], max_roles=data.get("max_roles", DEFAULT_MAX_ROLES),
                   truncated=data.get("truncated", False))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VerbLexicon":
        try:
            with open(path, "r") as f:
                return cls.from_json(json.load(f))
        except json.JSONDecodeError as e:
            raise SchemaError(f"lexicon {path} is not valid JSON: {e}") from e


def noun_frequencies(frames: Iterable[GroundedFrame]) -> Counter:
    counts = Counter()
    for frame in frames:
        for entry in frame.entries:
            counts.update(entry.gold_nouns)
    return counts


def truncate_nouns(lexicon: VerbLexicon, counts: Mapping[str, int], top_k: int) -> VerbLexicon:
    """Keep the top_k most frequent noun names (ties by name); the rest load as unknown"""
    ranked = sorted((name for name in counts if name not in ("", UNKNOWN_NOUN_NAME)),
                    key=lambda name: (-counts[name], name))
    kept = ranked[:top_k]
    logger.info(f"Noun vocabulary truncated to {len(kept)} of {len(ranked)} nouns")
    roles_of = {v: [lexicon.role_name(r) for r in lexicon.roles_of(i)] for i, v in enumerate(lexicon.verbs)}
    return VerbLexicon(roles_of, [UNKNOWN_NOUN_NAME] + kept, max_roles=lexicon.max_roles, truncated=True)


def annotation_noun_counts(path: Union[str, Path]) -> Counter:
    """Count noun names over every annotator frame of an annotation file"""
    with open(path, "r") as f:
        data = json.load(f)
    counts = Counter()
    for record in data.values():
        for frame in record.get("frames", []):
            for value in frame.values():
                counts[value.get("noun", "")] += 1
    return counts


def _box_from_pixels(raw, width: float, height: float, context: str) -> Optional[BBox]:
    if raw is None:
        return None
    if len(raw) != 4:
        raise SchemaError(f"{context}: box needs 4 values, got {raw}")
    if all(v == -1 for v in raw):
        return None
    x1, y1, x2, y2 = (float(v) for v in raw)
    return BBox.from_corners(x1 / width, y1 / height, x2 / width, y2 / height)


def _pixel(value: float):
    nearest = round(value)
    return int(nearest) if abs(value - nearest) < 1e-9 else value


def load_annotations(path: Union[str, Path], lexicon: VerbLexicon,
                     oov: Optional[str] = None) -> List[Tuple[str, GroundedFrame]]:
    """Parse an annotation file into (image id, frame) pairs in file order"""
    if oov is None:
        oov = "unknown" if lexicon.truncated else "error"
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"annotation file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise SchemaError(f"annotation file {path} must map image ids to records")

    items = []
    for image_id, record in data.items():
        try:
            verb = lexicon.verb_id(record["verb"])
            frames = record["frames"]
        except KeyError as e:
            raise SchemaError(f"image {image_id}: missing field {e}") from None
        roles = lexicon.roles_of(verb)
        role_names = [lexicon.role_name(r) for r in roles]
        if not frames:
            raise SchemaError(f"image {image_id}: no annotator frames")
        for frame in frames:
            if set(frame.keys()) != set(role_names):
                raise SchemaError(f"image {image_id}: role set {sorted(frame.keys())} does not match "
                                  f"lexicon roles {role_names} of verb '{record['verb']}'")

        bb = record.get("bb") or {}
        for role in bb:
            if role not in role_names:
                raise SchemaError(f"image {image_id}: box for role '{role}' not in verb's set")
        width = float(record.get("width", 1.0))
        height = float(record.get("height", 1.0))

        entries = []
        for role, name in zip(roles, role_names):
            ids = [lexicon.noun_id(frame[name].get("noun", ""), oov=oov) for frame in frames]
            gold = tuple(dict.fromkeys(ids))
            box = _box_from_pixels(bb.get(name), width, height, f"image {image_id} role '{name}'")
            entries.append(RoleEntry(role=role, gold_nouns=gold, box=box))
        items.append((image_id, GroundedFrame(verb=verb, entries=tuple(entries))))

    logger.debug(f"Loaded {len(items)} annotations from {path}")
    return items


def write_annotations(path: Union[str, Path], items: Iterable[Tuple[str, GroundedFrame]],
                      lexicon: VerbLexicon, width: float = 1.0, height: float = 1.0) -> Path:
    """Write frames in the annotation format; load_annotations reads them back unchanged"""
    data = {}
    for image_id, frame in items:
        role_names = [lexicon.role_name(r) for r in frame.roles]
        frames = []
        for k in range(ANNOTATORS):
            frames.append({
                name: {"noun": lexicon.noun_name(e.gold_nouns[min(k, len(e.gold_nouns) - 1)])}
                for name, e in zip(role_names, frame.entries)
            })
        bb = {}
        for name, e in zip(role_names, frame.entries):
            if e.box is None:
                bb[name] = list(NULL_BOX)
            else:
                x1, y1, x2, y2 = e.box.corners(clip=False)
                bb[name] = [_pixel(x1 * width), _pixel(y1 * height), _pixel(x2 * width), _pixel(y2 * height)]
        data[image_id] = {
            "verb": lexicon.verb_name(frame.verb),
            "width": _pixel(width),
            "height": _pixel(height),
            "frames": frames,
            "bb": bb,
        }

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=1)
    return path


def validate_frame(frame: GroundedFrame, lexicon: VerbLexicon) -> List[str]:
    """Return the frame's violations; an empty list means the frame is well formed"""
    if not 0 <= frame.verb < lexicon.num_verbs:
        return [f"unknown verb {frame.verb}"]
    expected = lexicon.roles_of(frame.verb)
    violations = []

    seen = set()
    for entry in frame.entries:
        name = lexicon.role_name(entry.role) if 0 <= entry.role < lexicon.num_roles else str(entry.role)
        if entry.role not in expected:
            violations.append(f"role not in verb's set: {name}")
        if entry.role in seen:
            violations.append(f"duplicate role: {name}")
        seen.add(entry.role)
        if not entry.gold_nouns:
            violations.append(f"empty gold nouns for role {name}")
        for noun in entry.gold_nouns:
            if not 0 <= noun < lexicon.num_nouns:
                violations.append(f"unknown noun {noun} for role {name}")
        if entry.box is not None:
            violations.extend(f"{issue} for role {name}" for issue in entry.box.problems())

    for role in expected:
        if role not in seen:
            violations.append(f"missing role: {lexicon.role_name(role)}")
    if not violations and frame.roles != expected:
        violations.append("role order differs from lexicon")
    return violations


def require_box(box) -> Tuple[float, float, float, float]:
    """Corner tuple for a BBox or a raw (x1, y1, x2, y2); raises on zero area"""
    if isinstance(box, BBox):
        corners = box.corners(clip=True)
    else:
        corners = tuple(float(v) for v in box)
        if len(corners) != 4:
            raise SchemaError(f"box needs 4 values, got {box}")
    x1, y1, x2, y2 = corners
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateBoxError(f"degenerate box {corners}")
    return corners


def box_overlap(a, b) -> Tuple[float, float, float]:
    """(intersection, union, enclosure) areas of two boxes in corner form"""
    ax1, ay1, ax2, ay2 = require_box(a)
    bx1, by1, bx2, by2 = require_box(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclosure = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclosure


if __name__ == "__main__":
    lexicon = VerbLexicon({"buying": ["agent", "goods", "place"], "browsing": ["agent", "goods", "place"]},
                          ["person", "shoe", "store"])
    frame = GroundedFrame(verb=0, entries=tuple(
        RoleEntry(role=r, gold_nouns=(1 + i,), box=BBox(0.5, 0.5, 0.2, 0.2)) for i, r in enumerate(lexicon.roles_of(0))))
    logger.info(f"violations: {validate_frame(frame, lexicon)}")
