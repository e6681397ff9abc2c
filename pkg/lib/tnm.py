#!/usr/bin/env python3
"""
Noun model: decodes every role of a given verb in parallel

A verb query and one query per role (shared across verbs by default) attend
to the encoded patch tokens; a small head turns each role output into noun
logits, a box and a presence logit.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericalError, SchemaError, ShapeError
from .logger import get_logger
from .numerics import (Linear, Module, Parameter, Tensor, absolute, as_tensor, concat, gather, gelu,
                       log_softmax, maximum, minimum, reshape, sigmoid, softplus, take, transpose, tsum)
from .ontology import BBox, GroundedFrame, VerbLexicon, box_overlap
from .transformer import DecoderStack, EncoderStack, PadMask, sinusoidal_pe

logger = get_logger(__name__)


def _as_grid(image) -> np.ndarray:
    grid = getattr(image, "grid", image)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {grid.shape}")
    return grid


class BackboneStub(Module):
    """Non-overlapping patch flattening followed by a learned linear projection"""

    def __init__(self, patch: int, channels: int, rng: np.random.Generator, in_channels: int = 3):
        if patch < 1:
            raise ShapeError(f"patch size must be >= 1, got {patch}")
        self.proj = Linear(patch * patch * in_channels, channels, rng)
        self._patch = patch
        self._in_channels = in_channels

    @property
    def channels(self) -> int:
        return self.proj.weight.shape[1]

    def grid_shape(self, image) -> Tuple[int, int]:
        grid = _as_grid(image)
        p = self._patch
        if grid.shape[0] % p or grid.shape[1] % p:
            raise ShapeError(f"image {grid.shape[:2]} is not divisible by patch size {p}")
        return grid.shape[0] // p, grid.shape[1] // p

    def patchify(self, image) -> np.ndarray:
        grid = _as_grid(image)
        if grid.shape[2] != self._in_channels:
            raise ShapeError(f"image has {grid.shape[2]} channels, backbone expects {self._in_channels}")
        h, w = self.grid_shape(grid)
        p = self._patch
        patches = grid.reshape(h, p, w, p, self._in_channels).transpose(0, 2, 1, 3, 4)
        return patches.reshape(h * w, p * p * self._in_channels)

    def tokens(self, image) -> Tensor:
        """(H*W) x C token matrix, row-major over the patch grid"""
        return self.proj(Tensor(self.patchify(image)))

    def __call__(self, image) -> Tensor:
        h, w = self.grid_shape(image)
        return reshape(transpose(self.tokens(image)), (self.channels, h, w))


def backbone_stub(image, stub: BackboneStub) -> Tensor:
    """C x H x W feature map of `image`"""
    return stub(image)


class QuerySet(Module):
    """
    Verb and role query embeddings.

    With shared role queries there is one row per role id, reused by every
    verb that has the role; otherwise each (verb, role slot) owns a row.
    Checkpoint entries are keyed by verb and role names.
    """

    def __init__(self, lexicon: VerbLexicon, dim: int, rng: np.random.Generator,
                 use_verb_query: bool = True, share_role_queries: bool = True):
        self._lexicon = lexicon
        self._dim = dim
        self.use_verb_query = use_verb_query
        self.share_role_queries = share_role_queries

        self.verb_table = Parameter(rng.normal(0.0, 1.0, size=(lexicon.num_verbs, dim))) if use_verb_query else None
        self._rows: List[Tuple[int, ...]] = []
        if share_role_queries:
            self.role_table = Parameter(rng.normal(0.0, 1.0, size=(lexicon.num_roles, dim)))
            self._rows = [tuple(lexicon.roles_of(v)) for v in range(lexicon.num_verbs)]
        else:
            start = 0
            for v in range(lexicon.num_verbs):
                m = len(lexicon.roles_of(v))
                self._rows.append(tuple(range(start, start + m)))
                start += m
            self.role_table = Parameter(rng.normal(0.0, 1.0, size=(start, dim)))

    @property
    def dim(self) -> int:
        return self._dim

    def role_rows(self, verb: int) -> Tuple[int, ...]:
        self._lexicon.roles_of(verb)
        return self._rows[verb]

    def _row_names(self) -> Tuple[List[str], List[str]]:
        lex = self._lexicon
        verb_names = list(lex.verbs) if self.use_verb_query else []
        if self.share_role_queries:
            role_names = list(lex.role_vocab)
        else:
            role_names = [f"{lex.verb_name(v)}.{lex.role_name(r)}"
                          for v in range(lex.num_verbs) for r in lex.roles_of(v)]
        return verb_names, role_names

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        verb_names, role_names = self._row_names()
        state = {}
        for i, name in enumerate(verb_names):
            state[f"{prefix}verb_table.{name}"] = self.verb_table.data[i].copy()
        for i, name in enumerate(role_names):
            state[f"{prefix}role_table.{name}"] = self.role_table.data[i].copy()
        return state

    def _load(self, state: Mapping[str, np.ndarray], prefix: str, used: set):
        verb_names, role_names = self._row_names()
        tables = []
        if self.use_verb_query:
            tables.append((self.verb_table, "verb_table", verb_names))
        tables.append((self.role_table, "role_table", role_names))
        for param, table, names in tables:
            rows = []
            for name in names:
                key = f"{prefix}{table}.{name}"
                if key not in state:
                    raise SchemaError(f"checkpoint is missing query embedding '{key}'")
                row = np.asarray(state[key], dtype=np.float64)
                if row.shape != (self._dim,):
                    raise ShapeError(f"query embedding '{key}' has shape {row.shape}, expected ({self._dim},)")
                rows.append(row)
                used.add(key)
            data = np.stack(rows)
            if not np.all(np.isfinite(data)):
                raise NumericalError(f"non-finite values in checkpoint table '{prefix}{table}'")
            param.data = data


def assemble_queries(verb: int, lexicon: VerbLexicon, qs: QuerySet,
                     max_roles: int) -> Tuple[Tensor, PadMask]:
    """Slot 0 holds the verb query (when enabled), then one slot per role; the rest are padding"""
    roles = lexicon.roles_of(verb)
    if len(roles) > max_roles:
        raise ShapeError(f"verb '{lexicon.verb_name(verb)}' has {len(roles)} roles, max_roles is {max_roles}")
    parts = []
    if qs.use_verb_query:
        parts.append(take(qs.verb_table, [verb], axis=0))
    parts.append(take(qs.role_table, qs.role_rows(verb), axis=0))
    lead = 1 if qs.use_verb_query else 0
    active = lead + len(roles)
    total = lead + max_roles
    if total > active:
        parts.append(Tensor(np.zeros((total - active, qs.dim))))
    return concat(parts, axis=0), PadMask.prefix(active, total)


class DetectionHead(Module):
    def __init__(self, dim: int, num_nouns: int, rng: np.random.Generator, presence: bool = True):
        self.noun = Linear(dim, num_nouns, rng)
        self.box_hidden = Linear(dim, dim, rng)
        self.box_out = Linear(dim, 4, rng)
        self.presence = Linear(dim, 1, rng) if presence else None

    def __call__(self, features: Tensor) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        noun_logits = self.noun(features)
        boxes = sigmoid(self.box_out(gelu(self.box_hidden(features))))
        presence = self.presence(features) if self.presence is not None else None
        return noun_logits, boxes, presence


@dataclass
class RoleDetection:
    role: int
    noun_logits: np.ndarray
    box: BBox
    presence_logit: Optional[float]
    feature: np.ndarray

    @property
    def noun(self) -> int:
        # np.argmax keeps the lowest id on exact ties
        return int(np.argmax(self.noun_logits))

    @property
    def present(self) -> bool:
        return True if self.presence_logit is None else self.presence_logit > 0.0


@dataclass
class TnmOutput:
    verb: int
    roles: Tuple[int, ...]
    noun_logits: Tensor
    boxes: Tensor
    presence_logits: Optional[Tensor]
    role_features: Tensor
    verb_feature: Optional[Tensor] = None

    def detections(self) -> List[RoleDetection]:
        logits = self.noun_logits.data
        boxes = self.boxes.data
        feats = self.role_features.data
        out = []
        for i, role in enumerate(self.roles):
            presence = None if self.presence_logits is None else float(self.presence_logits.data[i, 0])
            out.append(RoleDetection(role=role, noun_logits=logits[i].copy(), box=BBox(*(float(v) for v in boxes[i])),
                                     presence_logit=presence, feature=feats[i].copy()))
        return out


class TransformerNounModel(Module):
    def __init__(self, lexicon: VerbLexicon, rng: np.random.Generator, dim: int = 64, heads: int = 4,
                 ff_dim: int = 128, encoder_layers: int = 2, decoder_layers: int = 2, patch: int = 4,
                 use_verb_query: bool = True, share_role_queries: bool = True, presence_head: bool = True):
        self.backbone = BackboneStub(patch, dim, rng)
        self.encoder = EncoderStack(encoder_layers, dim, heads, ff_dim, rng)
        self.decoder = DecoderStack(decoder_layers, dim, heads, ff_dim, rng)
        self.queries = QuerySet(lexicon, dim, rng, use_verb_query, share_role_queries)
        self.head = DetectionHead(dim, lexicon.num_nouns, rng, presence=presence_head)
        self._lexicon = lexicon
        self._dim = dim
        self._pe: Dict[Tuple[int, int], Tensor] = {}

    @property
    def lexicon(self) -> VerbLexicon:
        return self._lexicon

    def position_encoding(self, h: int, w: int) -> Tensor:
        key = (h, w)
        if key not in self._pe:
            self._pe[key] = sinusoidal_pe(h, w, self._dim)
        return self._pe[key]

    def encode_image(self, image) -> Tuple[Tensor, Tensor]:
        """Encoded memory and its position encodings; reusable across verbs"""
        tokens = self.backbone.tokens(image)
        pos = self.position_encoding(*self.backbone.grid_shape(image))
        return self.encoder(tokens, None, pos), pos

    def decode_verb(self, memory: Tensor, pos: Tensor, verb: int) -> TnmOutput:
        queries, mask = assemble_queries(verb, self._lexicon, self.queries, self._lexicon.max_roles)
        out = self.decoder(queries, memory, mask, None, pos)
        roles = self._lexicon.roles_of(verb)
        lead = 1 if self.queries.use_verb_query else 0
        features = take(out, list(range(lead, lead + len(roles))), axis=0)
        verb_feature = take(out, [0], axis=0) if lead else None
        noun_logits, boxes, presence = self.head(features)
        return TnmOutput(verb=verb, roles=roles, noun_logits=noun_logits, boxes=boxes,
                         presence_logits=presence, role_features=features, verb_feature=verb_feature)

    def forward(self, image, verb: int) -> TnmOutput:
        memory, pos = self.encode_image(image)
        return self.decode_verb(memory, pos, verb)

    __call__ = forward


def tnm_forward(image, verb: int, lexicon: VerbLexicon, model: TransformerNounModel) -> TnmOutput:
    if lexicon is not model.lexicon and lexicon.to_json() != model.lexicon.to_json():
        raise SchemaError("lexicon differs from the one the noun model was built with")
    return model.forward(image, verb)


# Loss

@dataclass
class LossWeights:
    noun: float = 1.0
    giou: float = 2.0
    l1: float = 5.0
    presence: float = 1.0


def _corners(boxes) -> Tuple:
    cx, cy = take(boxes, [0], axis=1), take(boxes, [1], axis=1)
    hw, hh = take(boxes, [2], axis=1) * 0.5, take(boxes, [3], axis=1) * 0.5
    return cx - hw, cy - hh, cx + hw, cy + hh


def giou_tensor(pred: Tensor, gold: np.ndarray) -> Tensor:
    """Row-wise GIoU of n x 4 (cx, cy, w, h) boxes in unclipped corner form; n x 1"""
    gold = np.asarray(gold, dtype=np.float64).reshape(-1, 4)
    px1, py1, px2, py2 = _corners(pred)
    g = gold
    gx1, gy1 = (g[:, 0:1] - g[:, 2:3] / 2.0), (g[:, 1:2] - g[:, 3:4] / 2.0)
    gx2, gy2 = (g[:, 0:1] + g[:, 2:3] / 2.0), (g[:, 1:2] + g[:, 3:4] / 2.0)

    iw = maximum(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = maximum(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    enclosure = (maximum(px2, gx2) - minimum(px1, gx1)) * (maximum(py2, gy2) - minimum(py1, gy1))
    return inter / union - (enclosure - union) / enclosure


def giou(a, b) -> float:
    """Generalized IoU of two boxes (BBox or corner tuples); in [-1, 1]"""
    inter, union, enclosure = box_overlap(a, b)
    return inter / union - (enclosure - union) / enclosure


def tnm_loss(pred: TnmOutput, gold: GroundedFrame, weights: Optional[LossWeights] = None,
             role_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """
    Sum over roles of noun cross-entropy, GIoU and L1 box terms (roles with a
    gold box only) and presence BCE. `role_mask` restricts the sum to the
    selected roles.
    """
    weights = weights or LossWeights()
    if pred.verb != gold.verb or tuple(pred.roles) != gold.roles:
        raise SchemaError(f"misaligned role lists: predicted {tuple(pred.roles)} for verb {pred.verb}, "
                          f"gold {gold.roles} for verb {gold.verb}")
    m = len(gold.entries)
    keep = [True] * m if role_mask is None else [bool(k) for k in role_mask]
    if len(keep) != m:
        raise ShapeError(f"role mask has {len(keep)} entries for {m} roles")
    rows = [i for i in range(m) if keep[i]]
    if not rows:
        return Tensor(0.0)

    logp = log_softmax(take(pred.noun_logits, rows, axis=0), axis=-1)
    targets = [gold.entries[i].gold_nouns[0] for i in rows]
    loss = -tsum(gather(logp, targets)) * weights.noun

    boxed = [i for i in rows if gold.entries[i].box is not None]
    if boxed and (weights.giou or weights.l1):
        pb = take(pred.boxes, boxed, axis=0)
        gb = np.array([gold.entries[i].box.to_list() for i in boxed])
        if weights.l1:
            loss = loss + tsum(absolute(pb - gb)) * weights.l1
        if weights.giou:
            loss = loss + tsum(1.0 - giou_tensor(pb, gb)) * weights.giou

    if pred.presence_logits is not None and weights.presence:
        z = take(pred.presence_logits, rows, axis=0)
        y = np.array([[1.0 if gold.entries[i].box is not None else 0.0] for i in rows])
        loss = loss + tsum(softplus(z) - z * y) * weights.presence
    return loss
