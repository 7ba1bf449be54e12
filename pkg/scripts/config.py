#!/usr/bin/env python3
"""
Centralized configuration for layerpath.

Module-level constants fix paths and artifact names shared by every
subcommand. The dataclasses below hold every tunable of every module;
defaults follow the published values for router training and
length-aware search where those exist.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from errors import ConfigError

# ============================================================================
# DIRECTORY PATHS
# ============================================================================

PROJECT_ROOT = Path(__file__).parent.parent.absolute()
CONFIGS_DIR = PROJECT_ROOT / "configs"
DEFAULT_CONFIG_PATH = CONFIGS_DIR / "desk.yaml"
RUNS_DIR = PROJECT_ROOT / "runs"

# ============================================================================
# ARTIFACT NAMES (relative to a run directory)
# ============================================================================

EFFECTIVE_CONFIG_FILE = "effective_config.yaml"
CORPUS_DIR = "corpus"
EVAL_CORPUS_DIR = "eval_corpus"
BACKBONE_FILE = "backbone.ckpt"
ROUTERS_FILE = "routers.ckpt"
DATASET_FILE = "dataset.jsonl"
STATS_FILE = "stats.csv"
HELDOUT_FILE = "heldout_ids.json"
TRAIN_LOG_FILE = "train_log.csv"
REPORT_FILE = "report.json"
OOD_REPORT_FILE = "ood_report.json"
ANALYSIS_DIR = "analysis"
SWEEP_DIR = "sweep"

# ============================================================================
# STRATA
# ============================================================================

MULTICHOICE_STRATA = ("A1", "A2")
NUMERIC_STRATA = ("D1", "D2", "D3", "D4", "D5")
ALL_STRATA = MULTICHOICE_STRATA + NUMERIC_STRATA

# Sampled-column proportions of the reference supervision set
DEFAULT_STRATUM_SIZES = {"A1": 400, "A2": 600, "D1": 200, "D2": 400,
                         "D3": 600, "D4": 800, "D5": 1000}

# ============================================================================
# SECTIONS
# ============================================================================


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclass
class BackboneConfig:
    kind: str = "counter"

    def __post_init__(self):
        _require(self.kind in ("counter", "transformer"),
                 f"backbone.kind must be 'counter' or 'transformer', got {self.kind!r}")


@dataclass
class CounterConfig:
    num_layers: int = 8
    hidden_dim: int = 32
    modulus: int = 48
    roles: Optional[str] = None      # e.g. "NNFRRFFF"; None picks default_roles(L)
    distractor_scale: float = 1.0

    def __post_init__(self):
        _require(self.num_layers >= 1, "counter.num_layers must be >= 1")
        _require(self.hidden_dim >= self.num_layers + 8,
                 "counter.hidden_dim must be >= num_layers + 8")
        _require(1 <= self.modulus <= 48, "counter.modulus must be in [1, 48]")
        if self.roles is not None:
            _require(len(self.roles) == self.num_layers and set(self.roles) <= set("NRF"),
                     "counter.roles must have one of N/R/F per layer")
        _require(self.distractor_scale >= 0, "counter.distractor_scale must be >= 0")


@dataclass
class TransformerConfig:
    num_layers: int = 8
    hidden_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_seq_len: int = 64
    init_scale: float = 0.02

    def __post_init__(self):
        _require(self.num_layers >= 1, "transformer.num_layers must be >= 1")
        _require(self.heads >= 1 and self.hidden_dim % self.heads == 0,
                 "transformer.hidden_dim must be divisible by heads")
        _require(self.vocab_size >= 64, "transformer.vocab_size must cover the 64-token vocabulary")
        _require(self.max_seq_len >= 1 and self.ffn_dim >= 1, "transformer sizes must be positive")


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_max: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    corpus_size: int = 4000
    copy_fraction: float = 0.5
    copy_length: int = 6
    heldout_fraction: float = 0.1
    max_heldout_loss: float = 0.5

    def __post_init__(self):
        _require(self.steps >= 0 and self.batch_size >= 1, "pretrain.steps/batch_size out of range")
        _require(self.lr_max >= 0 and self.weight_decay >= 0, "pretrain.lr_max/weight_decay must be >= 0")
        _require(0.0 <= self.copy_fraction <= 1.0, "pretrain.copy_fraction must be in [0, 1]")
        _require(0.0 < self.heldout_fraction < 1.0, "pretrain.heldout_fraction must be in (0, 1)")
        _require(self.max_heldout_loss > 0, "pretrain.max_heldout_loss must be > 0")


@dataclass
class RouterConfig:
    windows: int = 8
    hidden: int = 128
    input_mode: str = "previous"
    frequency_bias_init: bool = False

    def __post_init__(self):
        _require(self.windows >= 1, "routing.windows must be >= 1")
        _require(self.hidden >= 1, "routing.hidden must be >= 1")
        _require(self.input_mode in ("previous", "first"),
                 "routing.input_mode must be 'previous' or 'first'")


@dataclass
class SearchConfig:
    simulations: int = 50
    exploration: float = 1.8
    length_penalty: float = 3.0
    random_child_prob: float = 0.1
    count_edge_skips: bool = True
    seed: int = 0

    def __post_init__(self):
        _require(self.simulations >= 1, "search.simulations must be >= 1")
        _require(self.exploration >= 0, "search.exploration must be >= 0")
        _require(self.length_penalty >= 0, "search.length_penalty must be >= 0")
        _require(0.0 <= self.random_child_prob <= 1.0, "search.random_child_prob must be in [0, 1]")


@dataclass
class LossConfig:
    mode: str = "focal"
    gamma: float = 2.0
    beta: float = 0.999
    prob_floor: float = 1e-12

    def __post_init__(self):
        _require(self.mode in ("focal", "weighted-ce", "plain-ce"),
                 "loss.mode must be focal, weighted-ce or plain-ce")
        _require(self.gamma >= 0, "loss.gamma must be >= 0")
        _require(0.0 < self.beta < 1.0, "loss.beta must be in (0, 1)")


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 500
    epochs: int = 25
    batch_size: int = 16
    micro_batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    teacher_forcing: bool = True
    heldout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        _require(self.epochs >= 0, "train.epochs must be >= 0")
        _require(self.batch_size >= 1 and self.micro_batch_size >= 1,
                 "train.batch_size and train.micro_batch_size must be >= 1")
        _require(self.warmup_steps >= 0, "train.warmup_steps must be >= 0")
        _require(0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0,
                 "train.adam betas must be in [0, 1)")
        _require(0.0 < self.heldout_fraction < 1.0, "train.heldout_fraction must be in (0, 1)")


@dataclass
class TaskConfig:
    scale: float = 1.0
    eval_scale: float = 0.25
    sizes: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_STRATUM_SIZES))
    min_default_solve_rate: float = 0.9     # A1 accuracy of the default path, checked before search

    def __post_init__(self):
        _require(self.scale > 0 and self.eval_scale > 0, "tasks.scale and tasks.eval_scale must be > 0")
        _require(0.0 <= self.min_default_solve_rate <= 1.0, "tasks.min_default_solve_rate must be in [0, 1]")
        unknown = set(self.sizes) - set(ALL_STRATA)
        _require(not unknown, f"tasks.sizes has unknown strata: {sorted(unknown)}")

    def count_for(self, stratum, evaluation=False):
        """Number of instances generated for a stratum after scaling."""
        base = self.sizes.get(stratum, 0)
        if not base:
            return 0
        factor = self.eval_scale if evaluation else self.scale
        return max(1, int(round(base * factor)))


@dataclass
class EvalConfig:
    p_grid: List[float] = field(default_factory=lambda: [round(-1.0 + 0.1 * i, 1) for i in range(21)])
    ood_train_family: str = "D"
    ablation_windows: List[int] = field(default_factory=lambda: [1, 2, 4, 8])

    def __post_init__(self):
        _require(all(-1.0 <= float(p) <= 1.0 for p in self.p_grid), "eval.p_grid values must lie in [-1, 1]")
        _require(self.ood_train_family in ("A", "D"), "eval.ood_train_family must be 'A' or 'D'")


SECTIONS = {
    "backbone": BackboneConfig,
    "counter": CounterConfig,
    "transformer": TransformerConfig,
    "pretrain": PretrainConfig,
    "routing": RouterConfig,
    "search": SearchConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "tasks": TaskConfig,
    "eval": EvalConfig,
}

TOP_LEVEL_KEYS = ("seed", "workers", "out")     # also settable by flag


@dataclass
class PipelineConfig:
    seed: int = 7
    workers: int = 1
    out: str = "runs/desk"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    counter: CounterConfig = field(default_factory=CounterConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    routing: RouterConfig = field(default_factory=RouterConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        _require(self.workers >= 1, "workers must be >= 1")

    @property
    def num_layers(self):
        """Layer count of the configured backbone."""
        section = self.counter if self.backbone.kind == "counter" else self.transformer
        return section.num_layers


# ============================================================================
# LOADING
# ============================================================================

def _coerce(section, key, value, default):
    """Cast a YAML scalar to the type of the dataclass default."""
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError(value)
            return int(float(value))
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot use {value!r} as {type(default).__name__}") from None
    return value


def _build_section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    kwargs = {key: _coerce(name, key, value, getattr(defaults, key)) for key, value in values.items()}
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    """
    Build a validated PipelineConfig from a parsed mapping.

    Raises:
        ConfigError: unknown sections or keys, or values out of range
    """
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")

    defaults = PipelineConfig()
    kwargs = {key: _coerce("top", key, raw[key], getattr(defaults, key))
              for key in TOP_LEVEL_KEYS if key in raw}
    for name, cls in SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(name, cls, raw[name] or {})
    return PipelineConfig(**kwargs)


def load_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """
    Load a YAML config file and apply flag overrides.

    Precedence is flags > file > dataclass defaults.

    Args:
        path: YAML file path; None uses only the defaults
        overrides: Top-level values from CLI flags (seed, workers, out); None entries are ignored

    Returns:
        Validated PipelineConfig

    Example:
        >>> cfg = load_config("configs/desk.yaml", {"seed": 11})
        >>> cfg.search.simulations
        50
    """
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if overrides:
        raw = dict(raw)
        for key, value in overrides.items():
            if value is not None:
                raw[key] = value
    return config_from_dict(raw)


def config_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def write_effective_config(config: PipelineConfig, out_dir) -> Path:
    """Echo the merged config into an output directory as effective_config.yaml."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / EFFECTIVE_CONFIG_FILE
    with open(target, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True, default_flow_style=False)
    return target


# ============================================================================
# SEEDS
# ============================================================================

def derive_seed(root_seed: int, *names) -> int:
    """
    Split the root seed into an independent per-module seed.

    The seed is the first 8 bytes (little-endian) of SHA-256 over
    "root/name1/name2/...", masked to 63 bits.

    Example:
        >>> derive_seed(7, "search") == derive_seed(7, "search")
        True
    """
    key = "/".join([str(int(root_seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)


# ============================================================================
# HELPER FUNCTIONS
# ============================================================================

def resolve_out_dir(config: PipelineConfig) -> Path:
    """Run directory for the config, relative paths anchored at the project root."""
    out = Path(config.out)
    return out if out.is_absolute() else PROJECT_ROOT / out


def corpus_path(out_dir, stratum: str, evaluation: bool = False) -> Path:
    """Path of the corpus file for one stratum inside a run directory."""
    folder = EVAL_CORPUS_DIR if evaluation else CORPUS_DIR
    return Path(out_dir) / folder / f"{stratum.lower()}.jsonl"
