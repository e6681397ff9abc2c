#!/usr/bin/env python3
"""
Inference pipeline: Verb-c proposes candidates, the noun model decodes every
candidate, Verb-f re-ranks. Images are processed by a worker pool and
results come back in input order.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from .cfvm import (FineHead, Gallery, RerankResult, SupportSet, VerbCModel, rerank, retrieve_support,
                   should_rerank, topn, verb_c_forward)
from .config import CfvmConfig
from .errors import SituError
from .logger import get_logger, log_exception
from .metrics import CandidateFrame, Prediction, RolePrediction
from .numerics import no_tape
from .synth import SynthImage
from .tnm import TnmOutput, TransformerNounModel

logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """map() over a thread pool; results keep the order of `items`"""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def role_predictions(output: TnmOutput) -> List[RolePrediction]:
    return [RolePrediction(role=d.role, noun=d.noun, box=d.box, present=d.present) for d in output.detections()]


class Predictor:
    def __init__(self, verb_c: VerbCModel, tnm: TransformerNounModel, settings: CfvmConfig,
                 head: Optional[FineHead] = None, gallery: Optional[Gallery] = None, use_rerank: bool = True):
        self.verb_c = verb_c
        self.tnm = tnm
        self.settings = settings
        self.head = head
        self.gallery = gallery
        self.use_rerank = use_rerank and head is not None and gallery is not None
        if use_rerank and not self.use_rerank:
            logger.warning("Re-ranking requested without a fine head and gallery; using coarse ranking")

    def _rerank(self, probs: np.ndarray, candidates: List[int], cls: np.ndarray,
                outputs: Dict[int, TnmOutput]) -> RerankResult:
        s = self.settings
        if not self.use_rerank or not should_rerank(float(probs[candidates[0]]), s.epsilon):
            return RerankResult(final_verb=candidates[0], order=list(candidates),
                                scores={v: float(probs[v]) for v in candidates}, reranked=False)
        supports: Dict[int, SupportSet] = {
            v: retrieve_support(None, v, self.gallery, None, s.support_m,
                                query_features=outputs[v].role_features.numpy())
            for v in candidates
        }
        return rerank(probs, candidates, supports, self.head, cls)

    def predict(self, image: SynthImage) -> Prediction:
        with no_tape():
            probs, cls = verb_c_forward(image.grid, self.verb_c)
            candidates = topn(probs, min(self.settings.top_n, len(probs)))
            memory, pos = self.tnm.encode_image(image.grid)
            outputs = {v: self.tnm.decode_verb(memory, pos, v) for v in candidates}
            result = self._rerank(probs, candidates, cls, outputs)

            ranked = [CandidateFrame(verb=v, prob=result.scores[v], roles=role_predictions(outputs[v]),
                                     coarse_prob=float(probs[v]))
                      for v in result.order]
            gold_frame = None
            gold = getattr(image, "gold", None)
            if gold is not None and gold.verb not in outputs:
                out = self.tnm.decode_verb(memory, pos, gold.verb)
                gold_frame = CandidateFrame(verb=gold.verb, prob=float(probs[gold.verb]),
                                            roles=role_predictions(out), coarse_prob=float(probs[gold.verb]))
        return Prediction(image_id=image.image_id, ranked=ranked, gold_frame=gold_frame)

    def predict_all(self, images: Sequence[SynthImage], workers: int = 1) -> List[Prediction]:
        def one(image: SynthImage) -> Prediction:
            try:
                return self.predict(image)
            except SituError as e:
                log_exception(e, f"Prediction failed on image {image.image_id}")
                raise

        predictions = ordered_map(one, images, workers)
        reranked = sum(1 for p in predictions if p.ranked and p.ranked[0].verb != _coarse_top(p))
        logger.info(f"Predicted {len(predictions)} images; {reranked} top-1 verbs changed by re-ranking")
        return predictions


def _coarse_top(prediction: Prediction) -> int:
    best = min(prediction.ranked, key=lambda c: (-(c.coarse_prob or 0.0), c.verb))
    return best.verb


def gold_verb_predictions(tnm: TransformerNounModel, images: Sequence[SynthImage],
                          workers: int = 1) -> List[Prediction]:
    """Noun-model output under each image's gold verb only (ground-truth-verb evaluation)"""
    def one(image: SynthImage) -> Prediction:
        with no_tape():
            out = tnm.forward(image.grid, image.gold.verb)
        frame = CandidateFrame(verb=image.gold.verb, prob=1.0, roles=role_predictions(out))
        return Prediction(image_id=image.image_id, ranked=[frame])

    return ordered_map(one, images, workers)


def coarse_view(predictions: Sequence[Prediction]) -> List[Prediction]:
    """The same predictions ranked by Verb-c probability alone"""
    view = []
    for p in predictions:
        ranked = sorted(p.ranked, key=lambda c: (-(c.coarse_prob if c.coarse_prob is not None else c.prob), c.verb))
        ranked = [CandidateFrame(verb=c.verb, prob=c.coarse_prob if c.coarse_prob is not None else c.prob,
                                 roles=c.roles, coarse_prob=c.coarse_prob) for c in ranked]
        view.append(Prediction(image_id=p.image_id, ranked=ranked, gold_frame=p.gold_frame))
    return view
