#!/usr/bin/env python3
"""
Coarse-to-fine verb model

Verb-c classifies the verb from a CLS token and proposes the top-N verbs.
For each candidate, the most role-similar training images of that verb are
retrieved from a gallery. Verb-f (a small MLP over the frozen CLS feature)
re-scores the candidates against those support images when the coarse
classifier is not confident.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .config import CfvmConfig
from .errors import ConfigError, GalleryError, SchemaError, ShapeError
from .logger import get_logger, log_exception
from .numerics import (Linear, Module, Parameter, Tensor, as_tensor, concat, gather, gelu, l2_normalize,
                       log_softmax, maximum, no_tape, reshape, softmax, take, tsum)
from .ontology import VerbLexicon
from .tnm import BackboneStub, TransformerNounModel
from .transformer import EncoderStack, sinusoidal_pe

logger = get_logger(__name__)

GALLERY_FORMAT = "situformer-gallery/1"


# Verb-c

class VerbCModel(Module):
    def __init__(self, num_verbs: int, rng: np.random.Generator, dim: int = 64, heads: int = 4,
                 ff_dim: int = 128, encoder_layers: int = 4, patch: int = 4,
                 position_encoding: bool = True, zero_init_classifier: bool = False):
        self.backbone = BackboneStub(patch, dim, rng)
        self.cls_embed = Parameter(rng.normal(0.0, 1.0, size=(1, dim)))
        self.encoder = EncoderStack(encoder_layers, dim, heads, ff_dim, rng)
        self.classifier = Linear(dim, num_verbs, rng, zero_init=zero_init_classifier)
        self._dim = dim
        self._use_pos = position_encoding
        self._pe: Dict[Tuple[int, int], Tensor] = {}

    @property
    def num_verbs(self) -> int:
        return self.classifier.weight.shape[1]

    def _position_encoding(self, h: int, w: int) -> Tensor:
        key = (h, w)
        if key not in self._pe:
            # the CLS slot carries no position
            pe = sinusoidal_pe(h, w, self._dim).data
            self._pe[key] = Tensor(np.vstack([np.zeros((1, self._dim)), pe]))
        return self._pe[key]

    def cls_feature(self, image) -> Tensor:
        """Encoded CLS token, 1 x d"""
        tokens = concat([self.cls_embed, self.backbone.tokens(image)], axis=0)
        pos = self._position_encoding(*self.backbone.grid_shape(image)) if self._use_pos else None
        return take(self.encoder(tokens, None, pos), [0], axis=0)

    def logits(self, image) -> Tuple[Tensor, Tensor]:
        cls = self.cls_feature(image)
        return self.classifier(cls), cls

    def loss(self, image, verb: int) -> Tensor:
        logits, _ = self.logits(image)
        return -tsum(gather(log_softmax(logits, axis=-1), [verb]))


def verb_c_forward(image, model: VerbCModel) -> Tuple[np.ndarray, np.ndarray]:
    """(probabilities over verbs, CLS feature)"""
    logits, cls = model.logits(image)
    return softmax(logits, axis=-1).data.reshape(-1), cls.data.reshape(-1)


def topn(probs: Sequence[float], n: int) -> List[int]:
    """Verb ids by probability, highest first; ties go to the lower id"""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 1 <= n <= len(p):
        raise ConfigError(f"top-N must lie in [1, {len(p)}], got {n}")
    order = np.lexsort((np.arange(len(p)), -p))
    return [int(v) for v in order[:n]]


# Gallery

@dataclass
class GalleryEntry:
    image_id: str
    verb: int
    cls_feature: np.ndarray
    role_features: np.ndarray


class Gallery:
    """Per-training-image CLS and role features, indexed by gold verb"""

    def __init__(self, entries: Iterable[GalleryEntry], checkpoint_hash: str = "", fingerprint: str = ""):
        self.entries: List[GalleryEntry] = list(entries)
        self.checkpoint_hash = checkpoint_hash
        self.fingerprint = fingerprint
        self._by_verb: Dict[int, List[GalleryEntry]] = {}
        for entry in self.entries:
            self._by_verb.setdefault(entry.verb, []).append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def of_verb(self, verb: int) -> List[GalleryEntry]:
        return self._by_verb.get(verb, [])

    def verbs(self) -> List[int]:
        return sorted(self._by_verb)

    def require_hash(self, expected: str):
        if self.checkpoint_hash != expected:
            raise GalleryError("gallery is stale: it was built from different noun/verb checkpoints; "
                               "run build-gallery again")

    def save(self, path: Union[str, Path], lexicon: VerbLexicon) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": GALLERY_FORMAT,
            "checkpoint_hash": self.checkpoint_hash,
            "fingerprint": self.fingerprint,
            "entries": [
                {
                    "image_id": e.image_id,
                    "verb": lexicon.verb_name(e.verb),
                    "cls_feature": e.cls_feature.tolist(),
                    "role_features": e.role_features.tolist(),
                }
                for e in self.entries
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f)
        logger.info(f"Saved gallery with {len(self.entries)} entries to: {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], lexicon: VerbLexicon) -> "Gallery":
        path = Path(path)
        if not path.exists():
            raise GalleryError(f"gallery not found: {path}; run build-gallery first")
        try:
            with open(path, "r") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"gallery {path} is not valid JSON: {e}") from e
        if payload.get("format") != GALLERY_FORMAT:
            raise SchemaError(f"gallery {path} has format {payload.get('format')!r}, expected {GALLERY_FORMAT!r}")

        entries = []
        for i, raw in enumerate(payload.get("entries", [])):
            try:
                image_id = raw["image_id"]
                verb = lexicon.verb_id(raw["verb"])
                role_features = np.asarray(raw["role_features"], dtype=np.float64)
                cls_feature = np.asarray(raw["cls_feature"], dtype=np.float64)
            except (KeyError, TypeError, ValueError, AttributeError) as e:
                raise SchemaError(f"gallery {path}: entry {i} is malformed, missing or bad field {e!r}") from e
            if role_features.ndim != 2 or role_features.shape[0] != len(lexicon.roles_of(verb)):
                raise SchemaError(f"gallery entry {image_id} has role features of shape "
                                  f"{role_features.shape} for verb '{raw['verb']}'")
            entries.append(GalleryEntry(image_id=image_id, verb=verb, cls_feature=cls_feature,
                                        role_features=role_features))
        return cls(entries, payload.get("checkpoint_hash", ""), payload.get("fingerprint", ""))


def gallery_entry(image_id: str, image, verb: int, verb_c: VerbCModel, tnm: TransformerNounModel) -> GalleryEntry:
    with no_tape():
        _, cls = verb_c_forward(image, verb_c)
        out = tnm.forward(image, verb)
    role_features = out.role_features.numpy()
    if len(role_features) != len(tnm.lexicon.roles_of(verb)):
        raise ShapeError(f"image {image_id}: {len(role_features)} role features for verb {verb}")
    return GalleryEntry(image_id=image_id, verb=verb, cls_feature=cls.copy(), role_features=role_features)


def build_gallery(images: Iterable, verb_c: VerbCModel, tnm: TransformerNounModel,
                  checkpoint_hash: str = "", fingerprint: str = "", mapper=map) -> Gallery:
    """
    Cache CLS and gold-verb role features for every training image, in input order.

    `mapper` may be an ordered parallel map (see pipeline.ordered_map).
    """
    def one(image):
        try:
            return gallery_entry(image.image_id, image.grid, image.gold.verb, verb_c, tnm)
        except Exception as e:
            log_exception(e, f"Gallery forward pass failed on image {image.image_id}")
            raise GalleryError(f"gallery build failed on image {image.image_id}: {e}") from e

    gallery = Gallery(list(mapper(one, list(images))), checkpoint_hash, fingerprint)
    logger.info(f"Built gallery with {len(gallery)} entries over {len(gallery.verbs())} verbs")
    return gallery


# Support retrieval

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def role_similarity(query_features: np.ndarray, entry: Union[GalleryEntry, np.ndarray]) -> float:
    """Mean over roles of the cosine between query and entry role features; zero vectors count as 0"""
    other = entry.role_features if isinstance(entry, GalleryEntry) else np.asarray(entry, dtype=np.float64)
    query = np.asarray(query_features, dtype=np.float64)
    if query.shape != other.shape:
        raise ShapeError(f"role feature shapes differ: {query.shape} vs {other.shape}")
    return float(np.mean([_cosine(q, o) for q, o in zip(query, other)]))


@dataclass
class SupportSet:
    verb: int
    members: List[Tuple[GalleryEntry, float]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.members

    def image_ids(self) -> List[str]:
        return [e.image_id for e, _ in self.members]


def rank_support(scored: Iterable[Tuple[GalleryEntry, float]], m: int) -> List[Tuple[GalleryEntry, float]]:
    """Top-m by score, ties by ascending image id"""
    return sorted(scored, key=lambda pair: (-pair[1], pair[0].image_id))[:m]


def retrieve_support(image, verb: int, gallery: Gallery, tnm: Optional[TransformerNounModel], m: int,
                     query_features: Optional[np.ndarray] = None, exclude: Optional[str] = None) -> SupportSet:
    """
    Up to m gallery images of gold verb `verb`, most role-similar first.

    Query role features come from the noun model run on `image` under `verb`
    unless `query_features` is given. A verb absent from the gallery yields
    an empty set.
    """
    if m < 1:
        raise ConfigError(f"support size must be >= 1, got {m}")
    pool = [e for e in gallery.of_verb(verb) if e.image_id != exclude]
    if not pool:
        return SupportSet(verb=verb)
    if query_features is None:
        with no_tape():
            query_features = tnm.forward(image, verb).role_features.numpy()
    scored = [(e, role_similarity(query_features, e)) for e in pool]
    return SupportSet(verb=verb, members=rank_support(scored, m))


# Verb-f

class FineHead(Module):
    """phi: two-layer MLP over the CLS feature, L2-normalized output"""

    def __init__(self, dim: int, rng: np.random.Generator, settings: Optional[CfvmConfig] = None,
                 out_dim: Optional[int] = None):
        settings = settings or CfvmConfig()
        if settings.margin <= 0:
            raise ConfigError(f"margin must be positive, got {settings.margin}")
        if settings.support_m < 1 or settings.top_n < 1:
            raise ConfigError("support size and candidate count must be >= 1")
        if not 0.0 <= settings.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {settings.epsilon}")
        out_dim = out_dim or settings.phi_dim or dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, out_dim, rng)
        self.settings = settings

    def embed(self, features) -> Tensor:
        x = as_tensor(features)
        if x.data.ndim == 1:
            x = reshape(x, (1, x.size))
        return l2_normalize(self.fc2(gelu(self.fc1(x))))


def triplet_hinge(cos_ap: float, cos_an: float, margin: float) -> float:
    return max(0.0, margin + cos_an - cos_ap)


def triplet_loss(anchor, positive, negative, head: FineHead) -> Tensor:
    """max(0, margin + cos(phi(a), phi(n)) - cos(phi(a), phi(p))); inputs are treated as constants"""
    rows = [np.asarray(as_tensor(x).data, dtype=np.float64).reshape(1, -1) for x in (anchor, positive, negative)]
    e = head.embed(Tensor(np.vstack(rows)))
    ea, ep, en = take(e, [0], axis=0), take(e, [1], axis=0), take(e, [2], axis=0)
    cos_ap = tsum(ea * ep)
    cos_an = tsum(ea * en)
    return maximum(cos_an - cos_ap + head.settings.margin, 0.0)


@dataclass
class TripletPools:
    anchor_id: str
    verb: int
    positives: List[GalleryEntry]
    negatives: List[GalleryEntry]


def mine_triplets(anchor: GalleryEntry, image, gallery: Gallery, probs: Sequence[float],
                  tnm: Optional[TransformerNounModel], settings: CfvmConfig) -> TripletPools:
    """
    Positive pool: the support set of the anchor's gold verb (anchor excluded).
    Negative pool: the union of support sets of the other top-N candidates.
    """
    candidates = topn(probs, min(settings.top_n, len(probs)))
    memory = None

    def query(verb: int) -> np.ndarray:
        nonlocal memory
        if verb == anchor.verb:
            return anchor.role_features
        with no_tape():
            if memory is None:
                memory = tnm.encode_image(image)
            return tnm.decode_verb(memory[0], memory[1], verb).role_features.numpy()

    positives = retrieve_support(None, anchor.verb, gallery, None, settings.support_m,
                                 query_features=anchor.role_features, exclude=anchor.image_id)
    negatives: List[GalleryEntry] = []
    seen = set()
    for verb in candidates:
        if verb == anchor.verb or not gallery.of_verb(verb):
            continue
        support = retrieve_support(None, verb, gallery, None, settings.support_m, query_features=query(verb))
        for entry, _ in support.members:
            if entry.image_id not in seen:
                seen.add(entry.image_id)
                negatives.append(entry)
    return TripletPools(anchor_id=anchor.image_id, verb=anchor.verb,
                        positives=[e for e, _ in positives.members], negatives=negatives)


def sample_triplet(pools: TripletPools, rng: np.random.Generator) -> Optional[Tuple[GalleryEntry, GalleryEntry]]:
    """One uniformly drawn (positive, negative) pair, or None when either pool is empty"""
    if not pools.positives or not pools.negatives:
        return None
    positive = pools.positives[int(rng.integers(len(pools.positives)))]
    negative = pools.negatives[int(rng.integers(len(pools.negatives)))]
    return positive, negative


# Re-ranking

@dataclass
class RerankResult:
    final_verb: int
    order: List[int]
    scores: Dict[int, float]
    reranked: bool


def rerank_score(prob: float, support: Sequence[Tuple[float, float]], alpha: float, beta: float,
                 support_mean: bool = False) -> float:
    """beta * sum(cos * S) + alpha * p; `support` holds (cos, S) pairs"""
    total = sum(c * s for c, s in support)
    if support_mean and support:
        total /= len(support)
    return beta * total + alpha * prob


def should_rerank(top_prob: float, epsilon: float) -> bool:
    return epsilon >= 1.0 or top_prob < epsilon


def rerank(probs: Sequence[float], candidates: Sequence[int], supports: Mapping[int, SupportSet],
           head: FineHead, query_cls) -> RerankResult:
    """Keep the coarse order when p(v1) >= epsilon, else order by the support-weighted score"""
    s = head.settings
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    candidates = [int(v) for v in candidates]
    if not candidates:
        raise ConfigError("rerank needs at least one candidate")
    if not should_rerank(float(p[candidates[0]]), s.epsilon):
        return RerankResult(final_verb=candidates[0], order=list(candidates),
                            scores={v: float(p[v]) for v in candidates}, reranked=False)

    with no_tape():
        query = head.embed(np.asarray(query_cls, dtype=np.float64).reshape(1, -1)).data[0]
        scores = {}
        for v in candidates:
            support = supports.get(v)
            pairs = []
            if support is not None and not support.empty:
                feats = np.vstack([e.cls_feature for e, _ in support.members])
                cos = head.embed(feats).data @ query
                pairs = [(float(c), sim) for c, (_, sim) in zip(cos, support.members)]
            scores[v] = rerank_score(float(p[v]), pairs, s.alpha, s.beta, s.support_mean)

    order = [candidates[i] for i in sorted(range(len(candidates)), key=lambda i: (-scores[candidates[i]], i))]
    return RerankResult(final_verb=order[0], order=order, scores=scores, reranked=True)
