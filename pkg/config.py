# config.py
"""
Run configuration: flat `key = value` file (# comments), published defaults,
per-(model, dataset) presets and a stable hash for checkpoints.
"""
import dataclasses
import hashlib
import logging
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from errors import ConfigError

LOG = logging.getLogger("fairgen.config")

# =========================
# KONSTANTA
# =========================
ARCHITECTURES = ("transformer", "recurrent")
BASELINES = ("raw", "attr", "adv", "norm", "nattr", "coffee")
QUALITY_MEASURES = ("L", "F", "LF")
DIM_PROFILES = ("desk", "full")
GRANULARITIES = ("epoch", "batch")

# lambda / eta / lambda_D operating points per (architecture, dataset)
PRESETS: Dict[str, Dict[str, float]] = {
    "transformer/games": {"lam": 0.2, "eta": 0.6, "lambda_d": 0.5},
    "transformer/movies": {"lam": 0.2, "eta": 0.6, "lambda_d": 0.0},
    "transformer/yelp": {"lam": 0.2, "eta": 0.5, "lambda_d": 0.5},
    "recurrent/games": {"lam": 0.3, "eta": 0.5, "lambda_d": 0.5},
    "recurrent/movies": {"lam": 0.1, "eta": 0.5, "lambda_d": 0.0},
    "recurrent/yelp": {"lam": 0.1, "eta": 0.5, "lambda_d": 0.5},
}


# =========================
# TRAIN CONFIG
# =========================
@dataclass
class TrainConfig:
    lam: float = 0.2
    eta: float = 0.6
    n_samples: int = 3
    lambda_d: float = 0.5
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-5
    batch_size: int = 16
    finetune_batch_size: Optional[int] = None
    max_decode_len: int = 128
    top_k: int = 5
    seed: int = 0
    quality: str = "L"
    quality_weights: Tuple[float, ...] = (1.0, 1.0)
    max_epochs: int = 100
    patience: int = 5
    finetune_epochs: int = 1
    grad_clip: float = 1.0
    finetune_grad_clip: Optional[float] = None
    loss_weights: Tuple[float, ...] = (1.0, 1.0, 1.0)
    disc_hidden: Optional[int] = None
    disc_lr: Optional[float] = None
    schedule_x: int = 1
    schedule_z: int = 1
    schedule_granularity: str = "batch"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.lambda_d < 0:
            raise ConfigError(f"lambda_d must be >= 0, got {self.lambda_d}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.batch_size < 1 or (self.finetune_batch_size is not None and self.finetune_batch_size < 1):
            raise ConfigError("batch sizes must be >= 1")
        if self.max_decode_len < 1:
            raise ConfigError("max_decode_len must be >= 1")
        if self.quality not in QUALITY_MEASURES:
            raise ConfigError(f"quality must be one of {QUALITY_MEASURES}, got '{self.quality}'")
        if len(self.quality_weights) != 2 or len(self.loss_weights) != 3:
            raise ConfigError("quality_weights needs 2 values, loss_weights needs 3")
        if self.schedule_x < 1 or self.schedule_z < 1:
            raise ConfigError("alternation schedule needs X >= 1 and Z >= 1")
        if self.schedule_granularity not in GRANULARITIES:
            raise ConfigError(f"schedule_granularity must be one of {GRANULARITIES}")
        if self.grad_clip < 0 or (self.finetune_grad_clip is not None and self.finetune_grad_clip <= 0):
            raise ConfigError("grad_clip must be >= 0 and finetune_grad_clip > 0 (or none)")
        if self.max_epochs < 0 or self.patience < 1 or self.finetune_epochs < 0:
            raise ConfigError("max_epochs >= 0, patience >= 1 and finetune_epochs >= 0 required")


# =========================
# RUN CONFIG
# =========================
@dataclass
class RunConfig(TrainConfig):
    # data
    data_path: str = "data/corpus.jsonl"
    lexicon_path: str = "data/features.txt"
    attribute_name: str = "gender"
    attribute_values: Tuple[str, ...] = ("male", "female")
    attribute_side: str = "user"
    merge_values: Tuple[str, ...] = ()
    split_ratios: Tuple[float, ...] = (0.8, 0.1, 0.1)
    vocab_size: int = 20000
    # model
    arch: str = "transformer"
    dims: str = "desk"
    emb_dim: Optional[int] = None
    ffn_dim: Optional[int] = None
    n_layers: Optional[int] = None
    n_heads: Optional[int] = None
    hidden_dim: Optional[int] = None
    attr_dim: Optional[int] = None
    dropout: Optional[float] = None
    # method
    baseline: str = "coffee"
    preset: str = ""
    use_attribute: bool = True
    norm_data: bool = False
    norm_threshold: float = 0.1
    nattr_inference: bool = False
    eval_measures: Tuple[str, ...] = ("L", "F", "LF")
    sweep_lambdas: Tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
    # synthesis
    synth_users: int = 200
    synth_items: int = 100
    synth_records: int = 4000
    synth_probs: Tuple[float, ...] = (0.5, 0.5)
    synth_mean_length: Tuple[float, ...] = (20.0, 8.0)
    synth_mean_features: Tuple[float, ...] = (2.0, 1.0)
    # output
    out_dir: str = "runs"
    tag: str = ""

    def validate(self) -> None:
        super().validate()
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got '{self.arch}'")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got '{self.baseline}'")
        if self.dims not in DIM_PROFILES:
            raise ConfigError(f"dims must be one of {DIM_PROFILES}, got '{self.dims}'")
        if self.attribute_side not in ("user", "item"):
            raise ConfigError("attribute_side must be user or item")
        if len(self.attribute_values) < 2 or len(set(self.attribute_values)) != len(self.attribute_values):
            raise ConfigError("attribute_values needs >= 2 distinct values")
        for m in self.eval_measures:
            if m not in QUALITY_MEASURES:
                raise ConfigError(f"eval measure '{m}' not in {QUALITY_MEASURES}")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ConfigError(f"split_ratios must be 3 non-negative values summing to 1, got {list(self.split_ratios)}")
        n = len(self.attribute_values)
        if not (len(self.synth_probs) == len(self.synth_mean_length) == len(self.synth_mean_features) == n):
            raise ConfigError("synth_probs / synth_mean_length / synth_mean_features need one value per attribute value")
        if not 0.0 < self.norm_threshold < 1.0:
            raise ConfigError("norm_threshold must be in (0, 1)")
        if self.vocab_size <= 4:
            raise ConfigError("vocab_size must exceed 4")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset '{self.preset}', choose from {sorted(PRESETS)}")
        self.merge_map()

    def merge_map(self) -> Dict[str, str]:
        out = {}
        for pair in self.merge_values:
            if ":" not in pair:
                raise ConfigError(f"merge_values entry '{pair}' must look like from:to")
            src, dst = pair.split(":", 1)
            out[src.strip()] = dst.strip()
        return out

    @property
    def effective_finetune_batch(self) -> int:
        if self.finetune_batch_size is not None:
            return self.finetune_batch_size
        return 8 if self.arch == "transformer" else self.batch_size

    @property
    def run_tag(self) -> str:
        return self.tag or f"{self.baseline}-{self.arch}-{self.quality}"


# =========================
# PARSER
# =========================
def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, raw, key)
    if origin in (tuple, Tuple):
        inner = args[0] if args else str
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_coerce(inner, p, key) for p in parts)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key '{key}': cannot read '{raw}' as {getattr(tp, '__name__', tp)}") from e


def parse_config_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.split(" #", 1)[0].strip() if not line.lstrip().startswith("#") else ""
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {line_no}: expected 'key = value', got '{line.strip()}'")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_dict(raw: Dict[str, str]) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    preset = raw.get("preset", "").strip()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}', choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    for key, value in raw.items():
        values[key] = _coerce(hints[key], value, key)
    return RunConfig(**values)


def load_config(path, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = config_from_dict(parse_config_text(path.read_text(encoding="utf-8")))
    if overrides:
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    LOG.debug(f"Loaded config {path} (hash {config_hash(cfg)[:12]})")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the canonical dump, ignoring where outputs go."""
    canon = dataclasses.replace(cfg, out_dir="", tag="")
    return hashlib.sha256(dump_config(canon).encode("utf-8")).hexdigest()
