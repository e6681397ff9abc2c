#!/usr/bin/env python3
"""
Staged training: noun model, coarse verb classifier and fine verb head are
trained separately, one image per optimizer step.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from .cfvm import (FineHead, Gallery, TripletPools, VerbCModel, mine_triplets, sample_triplet, triplet_loss,
                   verb_c_forward)
from .config import RunConfig, StageConfig, check_fingerprint, fingerprint
from .errors import GalleryError, NumericalError, PrerequisiteError
from .logger import get_logger
from .numerics import (Module, OptimState, Tape, Tensor, adam_step, backward, file_digest, load_checkpoint,
                       named_grads, no_tape, save_checkpoint)
from .ontology import VerbLexicon, annotation_noun_counts, truncate_nouns
from .synth import LEXICON_FILE, META_FILE, SynthImage
from .tnm import LossWeights, TransformerNounModel, tnm_loss

logger = get_logger(__name__)

DATA_SECTIONS = ("seed", "data")
DATA_EXCLUDE = ("data.data_dir", "data.noun_cutoff")
TNM_SECTIONS = ("seed", "data", "model.dim", "model.heads", "model.ff_dim", "model.patch", "tnm", "train.tnm")
VERB_C_SECTIONS = ("seed", "data", "model", "train.verb_c")
GALLERY_SECTIONS = TNM_SECTIONS + ("model", "train.verb_c")
VERB_F_SECTIONS = GALLERY_SECTIONS + ("cfvm.margin", "cfvm.phi_dim", "train.verb_f")
PREDICT_SECTIONS = VERB_F_SECTIONS + ("cfvm",)
REPORT_SECTIONS = PREDICT_SECTIONS + ("eval.null_grounding",)
ARTIFACT_EXCLUDE = ("data.data_dir",)


@dataclass
class ArtifactPaths:
    output_dir: Path

    @property
    def checkpoints(self) -> Path:
        return self.output_dir / "checkpoints"

    @property
    def tnm(self) -> Path:
        return self.checkpoints / "tnm.json"

    @property
    def verb_c(self) -> Path:
        return self.checkpoints / "verb_c.json"

    @property
    def verb_f(self) -> Path:
        return self.checkpoints / "verb_f.json"

    @property
    def gallery(self) -> Path:
        return self.output_dir / "gallery.json"

    @property
    def logs(self) -> Path:
        return self.output_dir / "logs"

    def losses(self, stage: str) -> Path:
        return self.output_dir / "losses" / f"{stage}.json"

    def predictions(self, split: str) -> Path:
        return self.output_dir / f"predictions_{split}.json"

    def report(self, split: str) -> Path:
        return self.output_dir / f"report_{split}.json"


def artifact_paths(cfg: RunConfig) -> ArtifactPaths:
    return ArtifactPaths(Path(cfg.output_dir))


@dataclass
class StageResult:
    stage: str
    losses: List[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


class EpochSampler:
    """Visits every index once per epoch in a seeded shuffled order"""

    def __init__(self, size: int, rng: np.random.Generator):
        if size < 1:
            raise PrerequisiteError("training split is empty")
        self._size = size
        self._rng = rng
        self._order: List[int] = []

    def next(self) -> int:
        if not self._order:
            self._order = [int(i) for i in self._rng.permutation(self._size)]
        return self._order.pop(0)


def stage_rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def learning_rate(step: int, stage: StageConfig) -> float:
    """Step schedule: lr until lr_drop_at of the steps are done, then lr * lr_drop_factor"""
    if step >= int(stage.lr_drop_at * stage.steps):
        return stage.lr * stage.lr_drop_factor
    return stage.lr


def log_memory(stage: str):
    rss = psutil.Process().memory_info().rss
    logger.info(f"{stage}: resident memory {rss / 2 ** 20:.1f} MiB")


def run_stage(name: str, model: Module, step_loss: Callable[[int], Optional[Tensor]],
              stage: StageConfig) -> StageResult:
    """Optimize `model` for stage.steps steps; step_loss may return None to skip a step"""
    params = model.trainable()
    lr_scale = {n: stage.backbone_lr_scale for n in params if n.startswith("backbone.")}
    state = OptimState(weight_decay=stage.weight_decay)
    result = StageResult(stage=name)
    drop_step = int(stage.lr_drop_at * stage.steps)

    logger.info(f"{name}: {stage.steps} steps, lr {stage.lr}, {sum(p.size for p in params.values())} parameters")
    for step in range(stage.steps):
        if step == drop_step and step > 0:
            logger.info(f"{name}: learning rate drops to {learning_rate(step, stage):.2e} at step {step}")
        try:
            with Tape() as tape:
                loss = step_loss(step)
            if loss is None:
                result.skipped += 1
                continue
            grads = named_grads(params, backward(loss, tape))
            adam_step(params, grads, state, learning_rate(step, stage), lr_scale)
        except NumericalError as e:
            raise NumericalError(f"{name}: training aborted at step {step}: {e}") from e
        result.losses.append(loss.item())
        if step % stage.log_every == 0 or step == stage.steps - 1:
            logger.info(f"{name}: step {step} loss {result.losses[-1]:.6f}")

    if result.skipped:
        logger.info(f"{name}: skipped {result.skipped} steps without a usable sample")
    log_memory(name)
    return result


def save_losses(path: Path, result: StageResult, config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"stage": result.stage, "fingerprint": config_hash, "skipped": result.skipped,
                   "losses": result.losses}, f)
    return path


def check_run_dump(cfg: RunConfig, dump: Path, meta: Dict):
    """Dumps inside this run's output directory must come from the current config; outside ones are exempt"""
    if dump.resolve().parent != Path(cfg.output_dir).resolve():
        return
    check_fingerprint(meta.get("fingerprint"), cfg, PREDICT_SECTIONS, f"prediction dump {dump}", ARTIFACT_EXCLUDE)


# Data

def load_lexicon(cfg: RunConfig) -> VerbLexicon:
    data_dir = Path(cfg.data.data_dir)
    path = data_dir / LEXICON_FILE
    if not path.exists():
        raise PrerequisiteError(f"lexicon not found at {path}; run gen-data first")
    lexicon = VerbLexicon.load(path)
    meta_path = data_dir / META_FILE
    if meta_path.exists():
        with open(meta_path, "r") as f:
            stored = json.load(f).get("fingerprint")
        if stored is not None:
            check_fingerprint(stored, cfg, DATA_SECTIONS, f"dataset in {data_dir}", DATA_EXCLUDE)
    if cfg.data.noun_cutoff:
        lexicon = truncate_nouns(lexicon, annotation_noun_counts(data_dir / "train.json"), cfg.data.noun_cutoff)
    return lexicon


# Model construction and checkpoints

def build_tnm(cfg: RunConfig, lexicon: VerbLexicon) -> TransformerNounModel:
    m, t = cfg.model, cfg.tnm
    return TransformerNounModel(lexicon, stage_rng(cfg, 0), dim=m.dim, heads=m.heads, ff_dim=m.ff_dim,
                                encoder_layers=t.encoder_layers, decoder_layers=t.decoder_layers, patch=m.patch,
                                use_verb_query=t.use_verb_query, share_role_queries=t.share_role_queries,
                                presence_head=t.presence_head)


def build_verb_c(cfg: RunConfig, num_verbs: int) -> VerbCModel:
    m = cfg.model
    return VerbCModel(num_verbs, stage_rng(cfg, 2), dim=m.dim, heads=m.heads, ff_dim=m.ff_dim,
                      encoder_layers=m.verb_c_encoder_layers, patch=m.patch,
                      position_encoding=m.verb_c_position_encoding,
                      zero_init_classifier=m.verb_c_zero_init_classifier)


def build_head(cfg: RunConfig) -> FineHead:
    return FineHead(cfg.model.dim, stage_rng(cfg, 4), cfg.cfvm)


def loss_weights(cfg: RunConfig) -> LossWeights:
    t = cfg.tnm
    return LossWeights(noun=t.lambda_noun, giou=t.lambda_giou, l1=t.lambda_l1, presence=t.lambda_presence)


def _save_model(path: Path, model: Module, stage: str, cfg: RunConfig, sections: Sequence[str],
                result: StageResult) -> Path:
    meta = {
        "stage": stage,
        "fingerprint": fingerprint(cfg, sections, ARTIFACT_EXCLUDE),
        "steps": len(result.losses),
        "final_loss": result.final_loss,
    }
    return save_checkpoint(path, model.state_dict(), meta)


def _load_model(path: Path, model: Module, stage: str, cfg: RunConfig, sections: Sequence[str]) -> Module:
    if not path.exists():
        raise PrerequisiteError(f"{stage} checkpoint not found at {path}; run train-{stage.replace('_', '-')} first")
    state, meta = load_checkpoint(path)
    check_fingerprint(meta.get("fingerprint"), cfg, sections, f"{stage} checkpoint {path}", ARTIFACT_EXCLUDE)
    model.load_state_dict(state)
    return model


def load_tnm(cfg: RunConfig, lexicon: VerbLexicon, path: Optional[Path] = None) -> TransformerNounModel:
    return _load_model(path or artifact_paths(cfg).tnm, build_tnm(cfg, lexicon), "tnm", cfg, TNM_SECTIONS)


def load_verb_c(cfg: RunConfig, lexicon: VerbLexicon, path: Optional[Path] = None) -> VerbCModel:
    return _load_model(path or artifact_paths(cfg).verb_c, build_verb_c(cfg, lexicon.num_verbs), "verb_c", cfg,
                       VERB_C_SECTIONS)


def load_head(cfg: RunConfig, path: Optional[Path] = None) -> FineHead:
    return _load_model(path or artifact_paths(cfg).verb_f, build_head(cfg), "verb_f", cfg, VERB_F_SECTIONS)


def load_gallery(cfg: RunConfig, lexicon: VerbLexicon) -> Gallery:
    """Load the gallery and refuse it if the noun/verb checkpoints changed since it was built"""
    paths = artifact_paths(cfg)
    gallery = Gallery.load(paths.gallery, lexicon)
    check_fingerprint(gallery.fingerprint, cfg, GALLERY_SECTIONS, f"gallery {paths.gallery}", ARTIFACT_EXCLUDE)
    gallery.require_hash(file_digest(paths.tnm, paths.verb_c))
    return gallery


# Stages

def train_tnm(cfg: RunConfig, lexicon: VerbLexicon, images: Sequence[SynthImage],
              save: bool = True) -> Tuple[TransformerNounModel, StageResult]:
    model = build_tnm(cfg, lexicon)
    weights = loss_weights(cfg)
    sampler = EpochSampler(len(images), stage_rng(cfg, 1))

    def step_loss(step: int) -> Tensor:
        image = images[sampler.next()]
        return tnm_loss(model.forward(image.grid, image.gold.verb), image.gold, weights)

    result = run_stage("tnm", model, step_loss, cfg.train.tnm)
    if save:
        paths = artifact_paths(cfg)
        _save_model(paths.tnm, model, "tnm", cfg, TNM_SECTIONS, result)
        save_losses(paths.losses("tnm"), result, fingerprint(cfg, TNM_SECTIONS, ARTIFACT_EXCLUDE))
    return model, result


def train_verb_c(cfg: RunConfig, lexicon: VerbLexicon, images: Sequence[SynthImage],
                 save: bool = True) -> Tuple[VerbCModel, StageResult]:
    model = build_verb_c(cfg, lexicon.num_verbs)
    sampler = EpochSampler(len(images), stage_rng(cfg, 3))

    def step_loss(step: int) -> Tensor:
        image = images[sampler.next()]
        return model.loss(image.grid, image.gold.verb)

    result = run_stage("verb_c", model, step_loss, cfg.train.verb_c)
    if save:
        paths = artifact_paths(cfg)
        _save_model(paths.verb_c, model, "verb_c", cfg, VERB_C_SECTIONS, result)
        save_losses(paths.losses("verb_c"), result, fingerprint(cfg, VERB_C_SECTIONS, ARTIFACT_EXCLUDE))
    return model, result


def mine_pools(cfg: RunConfig, images: Sequence[SynthImage], verb_c: VerbCModel, tnm: TransformerNounModel,
               gallery: Gallery) -> List[TripletPools]:
    by_id = {e.image_id: e for e in gallery.entries}
    pools = []
    for image in images:
        anchor = by_id.get(image.image_id)
        if anchor is None:
            raise GalleryError(f"gallery has no entry for training image {image.image_id}; rebuild it")
        with no_tape():
            probs, _ = verb_c_forward(image.grid, verb_c)
        pools.append(mine_triplets(anchor, image.grid, gallery, probs, tnm, cfg.cfvm))
    usable = sum(1 for p in pools if p.positives and p.negatives)
    logger.info(f"Mined triplet pools for {len(pools)} anchors, {usable} with both positives and negatives")
    return pools


def train_verb_f(cfg: RunConfig, images: Sequence[SynthImage], verb_c: VerbCModel, tnm: TransformerNounModel,
                 gallery: Optional[Gallery], save: bool = True) -> Tuple[FineHead, StageResult]:
    if gallery is None or len(gallery) == 0:
        raise GalleryError("verb_f training needs a built gallery; run build-gallery first")
    verb_c.freeze()
    tnm.freeze()
    head = build_head(cfg)
    pools = mine_pools(cfg, images, verb_c, tnm, gallery)
    by_id = {e.image_id: e for e in gallery.entries}
    sampler = EpochSampler(len(pools), stage_rng(cfg, 5))
    pair_rng = stage_rng(cfg, 6)

    def step_loss(step: int) -> Optional[Tensor]:
        pool = pools[sampler.next()]
        pair = sample_triplet(pool, pair_rng)
        if pair is None:
            return None
        positive, negative = pair
        return triplet_loss(by_id[pool.anchor_id].cls_feature, positive.cls_feature, negative.cls_feature, head)

    result = run_stage("verb_f", head, step_loss, cfg.train.verb_f)
    if save:
        paths = artifact_paths(cfg)
        _save_model(paths.verb_f, head, "verb_f", cfg, VERB_F_SECTIONS, result)
        save_losses(paths.losses("verb_f"), result, fingerprint(cfg, VERB_F_SECTIONS, ARTIFACT_EXCLUDE))
    return head, result
