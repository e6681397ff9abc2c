#!/usr/bin/env python3
"""
Procedural synthetic dataset with recoverable verb, noun and box structure

Each noun is a solid color glyph. Each verb places its roles in a fixed set of
grid cells; a confusable verb pair shares roles and noun pools and differs only
by a left-right mirror of that layout. Grounded roles are drawn filled, roles
without grounding are drawn as outlines so their noun stays visible. With
anchored roles every role name keeps one home cell in all base verbs.
"""

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, SchemaError
from .logger import get_logger, log_exception
from .ontology import BBox, GroundedFrame, RoleEntry, VerbLexicon, load_annotations, write_annotations

logger = get_logger(__name__)

PALETTE_LEVELS = (64, 128, 191, 255)
ROLE_NAMES = ("agent", "item", "place", "tool", "goods", "victim",
              "source", "destination", "coagent", "vehicle", "target", "substance")
SPLITS = ("train", "dev", "test")
META_FILE = "synth_meta.json"
LEXICON_FILE = "lexicon.json"


@dataclass
class SynthSpec:
    num_verbs: int = 8
    roles_min: int = 1
    roles_max: int = 4
    num_roles: int = 12
    num_nouns: int = 24
    image_size: int = 32
    cell_size: int = 8
    count: int = 400
    nouns_per_role: int = 3
    null_rate: float = 0.2
    disagree_rate: float = 0.15
    confusable_pairs: bool = True
    anchored_roles: bool = False
    max_roles: int = 6

    def validate(self):
        if self.num_verbs < 1 or self.num_nouns < 1 or self.count < 0:
            raise ConfigError("synthetic spec needs num_verbs >= 1, num_nouns >= 1, count >= 0")
        if not 1 <= self.roles_min <= self.roles_max <= min(self.max_roles, len(ROLE_NAMES)):
            raise ConfigError(f"roles per verb must satisfy 1 <= {self.roles_min} <= {self.roles_max} "
                              f"<= {min(self.max_roles, len(ROLE_NAMES))}")
        if self.cell_size < 4 or self.image_size % self.cell_size != 0:
            raise ConfigError(f"image size {self.image_size} must be a multiple of a cell size >= 4")
        cells = (self.image_size // self.cell_size) ** 2
        if self.roles_max > cells:
            raise ConfigError(f"{self.roles_max} glyphs cannot fit in {cells} cells")
        if not self.roles_max <= self.num_roles <= len(ROLE_NAMES):
            raise ConfigError(f"num_roles must lie in [{self.roles_max}, {len(ROLE_NAMES)}], got {self.num_roles}")
        g = self.image_size // self.cell_size
        if self.anchored_roles and (self.num_roles + 1) // 2 > g * (g // 2):
            raise ConfigError(f"{self.num_roles} anchored roles need {(self.num_roles + 1) // 2} mirrored "
                              f"cell pairs, the grid has {g * (g // 2)}")
        if self.num_nouns > len(PALETTE_LEVELS) ** 3:
            raise ConfigError(f"at most {len(PALETTE_LEVELS) ** 3} noun colors are available")
        if self.nouns_per_role > self.num_nouns:
            raise ConfigError(f"nouns_per_role {self.nouns_per_role} exceeds num_nouns {self.num_nouns}")
        for name in ("null_rate", "disagree_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class VerbPlan:
    verb: int
    roles: Tuple[str, ...]
    cells: Tuple[int, ...]
    noun_pools: Tuple[Tuple[int, ...], ...]
    noun_weights: Tuple[Tuple[float, ...], ...]
    partner: Optional[int] = None


@dataclass
class SynthImage:
    image_id: str
    grid: np.ndarray
    gold: GroundedFrame


@dataclass
class SynthDataset:
    lexicon: VerbLexicon
    images: List[SynthImage]
    palette: Dict[int, Tuple[int, int, int]] = field(default_factory=dict)
    plans: List[VerbPlan] = field(default_factory=list)
    spec: Optional[SynthSpec] = None

    def confusable_pairs(self) -> List[Tuple[int, int]]:
        return [(p.verb, p.partner) for p in self.plans if p.partner is not None and p.verb < p.partner]

    def meta(self) -> Dict:
        return {
            "spec": asdict(self.spec) if self.spec else {},
            "palette": {self.lexicon.noun_name(n): list(rgb) for n, rgb in self.palette.items()},
            "layouts": {
                self.lexicon.verb_name(p.verb): {
                    "roles": list(p.roles),
                    "cells": list(p.cells),
                    "noun_pools": [[self.lexicon.noun_name(n) for n in pool] for pool in p.noun_pools],
                }
                for p in self.plans
            },
            "confusable_pairs": [[self.lexicon.verb_name(a), self.lexicon.verb_name(b)]
                                 for a, b in self.confusable_pairs()],
        }


def _mirror(cells: Sequence[int], grid_cells: int) -> Tuple[int, ...]:
    return tuple((c // grid_cells) * grid_cells + (grid_cells - 1 - c % grid_cells) for c in cells)


def _anchored_layout(names: Sequence[str], homes: Sequence[int], m: int,
                     rng: np.random.Generator) -> Tuple[Tuple[str, ...], Tuple[int, ...]]:
    picked = rng.choice(len(names), size=m, replace=False)
    return tuple(names[i] for i in picked), tuple(homes[i] for i in picked)


def _anchored_homes(spec: SynthSpec, g: int, rng: np.random.Generator) -> List[int]:
    """One home cell per role name; homes come in left-right mirrored pairs"""
    left = [r * g + c for r in range(g) for c in range(g // 2)]
    picked = rng.choice(len(left), size=(spec.num_roles + 1) // 2, replace=False)
    homes = []
    for i in picked:
        homes.extend([left[int(i)], _mirror([left[int(i)]], g)[0]])
    return homes[:spec.num_roles]


def _plan_verbs(spec: SynthSpec, rng: np.random.Generator) -> List[VerbPlan]:
    g = spec.image_size // spec.cell_size
    names = ROLE_NAMES[:spec.num_roles]
    homes = _anchored_homes(spec, g, rng) if spec.anchored_roles else []
    used = set()
    plans: List[VerbPlan] = []
    for v in range(spec.num_verbs):
        if spec.confusable_pairs and v % 2 == 1:
            base = plans[v - 1]
            base.partner = v
            plans.append(VerbPlan(verb=v, roles=base.roles, cells=_mirror(base.cells, g),
                                  noun_pools=base.noun_pools, noun_weights=base.noun_weights, partner=v - 1))
            continue

        m = int(rng.integers(spec.roles_min, spec.roles_max + 1))
        roles = tuple(names[i] for i in rng.choice(len(names), size=m, replace=False))
        pools = tuple(tuple(int(n) + 1 for n in sorted(rng.choice(spec.num_nouns, size=spec.nouns_per_role,
                                                                    replace=False)))
                      for _ in range(m))
        weights = tuple(tuple(float(w) for w in rng.dirichlet(np.ones(spec.nouns_per_role))) for _ in range(m))
        wants_partner = spec.confusable_pairs and v + 1 < spec.num_verbs

        for _ in range(500):
            if spec.anchored_roles:
                roles, cells = _anchored_layout(names, homes, m, rng)
            else:
                cells = tuple(int(c) for c in rng.choice(g * g, size=m, replace=False))
            layout = frozenset(cells)
            mirrored = frozenset(_mirror(cells, g))
            if layout in used:
                continue
            if wants_partner and (mirrored == layout or mirrored in used):
                continue
            break
        else:
            raise ConfigError(f"cannot place a distinct glyph layout for verb {v}; "
                              f"use fewer verbs or a larger image")
        used.add(layout)
        if wants_partner:
            used.add(mirrored)
        plans.append(VerbPlan(verb=v, roles=roles, cells=cells, noun_pools=pools, noun_weights=weights))
    return plans


def _render(spec: SynthSpec, plan: VerbPlan, palette: Dict[int, Tuple[int, int, int]],
            lexicon: VerbLexicon, rng: np.random.Generator) -> Tuple[np.ndarray, GroundedFrame]:
    size, cell = spec.image_size, spec.cell_size
    g = size // cell
    image = Image.new("RGB", (size, size), (0, 0, 0))
    draw = ImageDraw.Draw(image)
    entries = []
    for slot, c in enumerate(plan.cells):
        pool = plan.noun_pools[slot]
        noun = int(pool[rng.choice(len(pool), p=np.asarray(plan.noun_weights[slot]))])
        annotated = [noun]
        for _ in range(2):
            if rng.random() < spec.disagree_rate:
                annotated.append(int(pool[rng.integers(len(pool))]))
            else:
                annotated.append(noun)
        grounded = rng.random() >= spec.null_rate

        w = int(rng.integers(3, cell))
        h = int(rng.integers(3, cell))
        x1 = (c % g) * cell + int(rng.integers(0, cell - w + 1))
        y1 = (c // g) * cell + int(rng.integers(0, cell - h + 1))
        x2, y2 = x1 + w, y1 + h
        # PIL rectangles include their end pixel
        if grounded:
            draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=palette[noun])
        else:
            draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=palette[noun])

        box = BBox.from_corners(x1 / size, y1 / size, x2 / size, y2 / size) if grounded else None
        entries.append(RoleEntry(role=lexicon.role_id(plan.roles[slot]),
                                 gold_nouns=tuple(dict.fromkeys(annotated)), box=box))

    grid = np.asarray(image, dtype=np.float64) / 255.0
    return grid, GroundedFrame(verb=plan.verb, entries=tuple(entries))


def synth_generate(spec: SynthSpec, seed: int) -> SynthDataset:
    """Generate `spec.count` images, verbs balanced round-robin; same seed, same bits"""
    spec.validate()
    rng = np.random.default_rng(seed)

    colors = [(r, g, b) for r in PALETTE_LEVELS for g in PALETTE_LEVELS for b in PALETTE_LEVELS]
    order = rng.permutation(len(colors))[:spec.num_nouns]
    palette = {n + 1: colors[int(k)] for n, k in enumerate(order)}

    plans = _plan_verbs(spec, rng)
    lexicon = VerbLexicon({f"verb{p.verb:02d}": list(p.roles) for p in plans},
                          [f"noun{n:02d}" for n in range(1, spec.num_nouns + 1)],
                          max_roles=spec.max_roles)

    images = []
    for i in range(spec.count):
        grid, frame = _render(spec, plans[i % spec.num_verbs], palette, lexicon, rng)
        images.append(SynthImage(image_id=f"img{i:06d}", grid=grid, gold=frame))

    logger.info(f"Generated {len(images)} synthetic images over {spec.num_verbs} verbs (seed {seed})")
    return SynthDataset(lexicon=lexicon, images=images, palette=palette, plans=plans, spec=spec)


def split_counts(total: int, ratios: Sequence[float]) -> List[int]:
    """Integer split sizes; the last split takes the remainder"""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    counts = [int(round(total * r)) for r in ratios[:-1]]
    counts.append(total - sum(counts))
    if counts[-1] < 0:
        raise ConfigError(f"split ratios {list(ratios)} do not fit {total} images")
    return counts


def split_images(images: Sequence[SynthImage], ratios: Sequence[float]) -> Dict[str, List[SynthImage]]:
    """Contiguous splits; round-robin verbs keep every split balanced"""
    counts = split_counts(len(images), ratios)
    out, start = {}, 0
    for name, n in zip(SPLITS, counts):
        out[name] = list(images[start:start + n])
        start += n
    return out


# Image store

def encode_png(grid: np.ndarray) -> bytes:
    pixels = np.clip(np.rint(np.asarray(grid) * 255.0), 0, 255).astype(np.uint8)
    output = io.BytesIO()
    Image.fromarray(pixels).save(output, format="PNG")
    return output.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    try:
        image = Image.open(io.BytesIO(data))
        if image.mode != "RGB":
            image = image.convert("RGB")
        return np.asarray(image, dtype=np.float64) / 255.0
    except Exception as e:
        log_exception(e, "Failed to decode image")
        raise SchemaError(f"unreadable image: {e}") from e


def save_image(grid: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(grid))
    return path


def load_image(path: Union[str, Path]) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


def write_split(data_dir: Union[str, Path], split: str, images: Sequence[SynthImage],
                lexicon: VerbLexicon) -> Path:
    data_dir = Path(data_dir)
    for image in images:
        save_image(image.grid, data_dir / "images" / f"{image.image_id}.png")
    size = images[0].grid.shape[0] if images else 1
    return write_annotations(data_dir / f"{split}.json", [(im.image_id, im.gold) for im in images],
                             lexicon, width=size, height=size)


def write_dataset(data_dir: Union[str, Path], dataset: SynthDataset,
                  ratios: Sequence[float], extra_meta: Optional[Dict] = None) -> Dict[str, int]:
    data_dir = Path(data_dir)
    dataset.lexicon.save(data_dir / LEXICON_FILE)
    splits = split_images(dataset.images, ratios)
    for name, images in splits.items():
        write_split(data_dir, name, images, dataset.lexicon)
    with open(data_dir / META_FILE, "w") as f:
        json.dump({**dataset.meta(), **(extra_meta or {})}, f, indent=2)
    logger.info(f"Wrote dataset to {data_dir}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return {name: len(images) for name, images in splits.items()}


def load_split(data_dir: Union[str, Path], split: str, lexicon: VerbLexicon) -> List[SynthImage]:
    data_dir = Path(data_dir)
    path = data_dir / f"{split}.json"
    if not path.exists():
        raise SchemaError(f"missing split file {path}")
    return [SynthImage(image_id=image_id, grid=load_image(data_dir / "images" / f"{image_id}.png"), gold=frame)
            for image_id, frame in load_annotations(path, lexicon)]


def load_meta(data_dir: Union[str, Path]) -> Dict:
    path = Path(data_dir) / META_FILE
    if not path.exists():
        return {}
    with open(path, "r") as f:
        return json.load(f)


if __name__ == "__main__":
    data = synth_generate(SynthSpec(count=8), seed=0)
    logger.info(f"verbs: {data.lexicon.verbs}, confusable: {data.confusable_pairs()}")
