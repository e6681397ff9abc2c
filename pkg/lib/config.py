#!/usr/bin/env python3
"""
Run configuration: dataclass defaults, merged with a JSON/YAML file, then
`section.key=value` overrides and dedicated command-line flags.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import yaml

from .errors import ConfigError
from .logger import get_logger

logger = get_logger(__name__)

RESOLVED_CONFIG = "config.resolved.json"
NULL_CONVENTIONS = ("presence", "exclude")
EVAL_SETTINGS = ("top1", "top5", "gt_verb")


@dataclass
class DataConfig:
    data_dir: str = "data"
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
    split_ratios: List[float] = field(default_factory=lambda: [0.75, 0.125, 0.125])
    # 0 keeps every noun
    noun_cutoff: int = 0


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    patch: int = 4
    verb_c_encoder_layers: int = 4
    verb_c_position_encoding: bool = True
    verb_c_zero_init_classifier: bool = False


@dataclass
class TnmConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    use_verb_query: bool = True
    share_role_queries: bool = True
    presence_head: bool = True
    lambda_noun: float = 1.0
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    lambda_presence: float = 1.0


@dataclass
class StageConfig:
    steps: int = 1500
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop_at: float = 0.5
    lr_drop_factor: float = 0.1
    backbone_lr_scale: float = 1.0
    log_every: int = 50


@dataclass
class TrainConfig:
    tnm: StageConfig = field(default_factory=StageConfig)
    verb_c: StageConfig = field(default_factory=StageConfig)
    verb_f: StageConfig = field(default_factory=lambda: StageConfig(steps=500, lr=5e-4))


@dataclass
class CfvmConfig:
    top_n: int = 5
    support_m: int = 10
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 0.4
    margin: float = 0.2
    support_mean: bool = False
    # 0 uses the model dim
    phi_dim: int = 0


@dataclass
class EvalConfig:
    null_grounding: str = "presence"
    settings: List[str] = field(default_factory=lambda: list(EVAL_SETTINGS))
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tnm: TnmConfig = field(default_factory=TnmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cfvm: CfvmConfig = field(default_factory=CfvmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def config_to_dict(cfg) -> Dict:
    return asdict(cfg)


def _coerce(value: Any, current: Any, key: str):
    # PyYAML reads "1e-3" as a string
    if isinstance(value, str) and isinstance(current, (int, float)) and not isinstance(current, bool):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be true or false, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        if current and not isinstance(current[0], str):
            return [_coerce(v, current[0], key) for v in value]
        return list(value)
    return value


def _merge(target, values: Mapping, path: str = ""):
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        full = f"{path}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key '{full}'")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section '{full}' must be a mapping")
            _merge(current, value, f"{full}.")
        else:
            setattr(target, key, _coerce(value, current, full))


def config_from_dict(values: Optional[Mapping]) -> RunConfig:
    """Defaults with `values` merged over them; unknown keys are errors"""
    cfg = RunConfig()
    if values:
        _merge(cfg, values)
    validate_config(cfg)
    return cfg


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return config_from_dict({})
    path = Path(path)
    try:
        with open(path, "r") as f:
            if path.suffix in (".yaml", ".yml"):
                values = yaml.safe_load(f) or {}
            else:
                values = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"failed to parse config {path}: {e}") from e
    logger.info(f"Loading configuration from: {path}")
    return config_from_dict(values)


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply `section.key=value` strings; values are parsed as YAML scalars"""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value of override '{item}': {e}") from e
        nested: Dict[str, Any] = {}
        node = nested
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        _merge(cfg, nested)
    validate_config(cfg)
    return cfg


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def validate_config(cfg: RunConfig):
    d, m, t, c, e = cfg.data, cfg.model, cfg.tnm, cfg.cfvm, cfg.eval
    _require(cfg.workers >= 1, "workers must be >= 1")
    _require(d.count >= 0, "data.count must be >= 0")
    _require(len(d.split_ratios) == 3, "data.split_ratios needs train/dev/test ratios")
    _require(all(r >= 0 for r in d.split_ratios) and abs(sum(d.split_ratios) - 1.0) < 1e-9,
             "data.split_ratios must be non-negative and sum to 1")
    _require(d.noun_cutoff >= 0, "data.noun_cutoff must be >= 0")
    _require(m.dim > 0 and m.heads > 0 and m.dim % m.heads == 0, "model.dim must be divisible by model.heads")
    _require(m.dim % 4 == 0, "model.dim must be a multiple of 4 for the position encodings")
    _require(m.ff_dim > 0 and m.patch > 0, "model.ff_dim and model.patch must be positive")
    _require(d.image_size % m.patch == 0, "data.image_size must be divisible by model.patch")
    _require(m.verb_c_encoder_layers >= 0, "model.verb_c_encoder_layers must be >= 0")
    _require(t.encoder_layers >= 0 and t.decoder_layers >= 0, "tnm layer counts must be >= 0")
    for name in ("lambda_noun", "lambda_giou", "lambda_l1", "lambda_presence"):
        _require(getattr(t, name) >= 0, f"tnm.{name} must be >= 0")
    for stage in ("tnm", "verb_c", "verb_f"):
        s = getattr(cfg.train, stage)
        _require(s.steps >= 0, f"train.{stage}.steps must be >= 0")
        _require(s.lr > 0, f"train.{stage}.lr must be positive")
        _require(s.weight_decay >= 0, f"train.{stage}.weight_decay must be >= 0")
        _require(0.0 <= s.lr_drop_at <= 1.0, f"train.{stage}.lr_drop_at must lie in [0, 1]")
        _require(s.lr_drop_factor > 0, f"train.{stage}.lr_drop_factor must be positive")
        _require(s.backbone_lr_scale > 0, f"train.{stage}.backbone_lr_scale must be positive")
        _require(s.log_every >= 1, f"train.{stage}.log_every must be >= 1")
    _require(c.margin > 0, "cfvm.margin must be positive")
    _require(c.support_m >= 1, "cfvm.support_m must be >= 1")
    _require(1 <= c.top_n <= d.num_verbs, "cfvm.top_n must lie in [1, data.num_verbs]")
    _require(0.0 <= c.epsilon <= 1.0, "cfvm.epsilon must lie in [0, 1]")
    _require(c.alpha >= 0 and c.beta >= 0, "cfvm.alpha and cfvm.beta must be >= 0")
    _require(c.phi_dim >= 0, "cfvm.phi_dim must be >= 0")
    _require(e.null_grounding in NULL_CONVENTIONS,
             f"eval.null_grounding must be one of {NULL_CONVENTIONS}, got {e.null_grounding!r}")
    _require(all(s in EVAL_SETTINGS for s in e.settings), f"eval.settings must be drawn from {EVAL_SETTINGS}")


def _section(cfg: RunConfig, name: str):
    node = cfg
    for part in name.split("."):
        node = getattr(node, part)
    return asdict(node) if is_dataclass(node) else node


def fingerprint(cfg: RunConfig, sections: Sequence[str], exclude: Sequence[str] = ()) -> str:
    """SHA-256 of the canonical JSON of the named (possibly dotted) sections, minus `exclude` keys"""
    payload = {name: _section(cfg, name) for name in sections}
    for key in exclude:
        section, _, leaf = key.rpartition(".")
        if isinstance(payload.get(section), dict):
            payload[section].pop(leaf, None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def check_fingerprint(stored: Optional[str], cfg: RunConfig, sections: Sequence[str], artifact: str,
                      exclude: Sequence[str] = ()):
    expected = fingerprint(cfg, sections, exclude)
    if stored != expected:
        raise ConfigError(f"{artifact} was produced under a different configuration "
                          f"(fingerprint {str(stored)[:12]} != {expected[:12]})")


def save_resolved(cfg: RunConfig, output_dir: Optional[Union[str, Path]] = None) -> Path:
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
    return path


def copy_config(cfg: RunConfig) -> RunConfig:
    return config_from_dict(config_to_dict(cfg))
