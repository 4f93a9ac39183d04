"""
Run configuration.

Config files are INI text with one section per concern::

    [data]       source = synthetic | encoded | raw, paths, ingest knobs
    [synthetic]  planted-interaction generator settings
    [model]      head, embedding_dim, mlp_sizes, BN flags, alpha_init
    [optim]      Adam and GRDA hyperparameters, batch_size
    [search]     epochs
    [retrain]    epochs, variant
    [run]        seed, output_dir, seeds, jobs

Every key is optional; defaults follow the usual CTR settings (batch 2000,
Adam lr 1e-3, GRDA c 0.005 / mu 0.6).  GRDA's γ defaults to ``auto``: it is
derived from the search stage's step budget.  Unknown sections and keys are
errors.
Values are converted by the annotation of the dataclass field they land in.

All randomness comes from one master seed through named substreams, see
`substream`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .data_model import Reduce
from .errors import ConfigError, GatedFMError
from .network import ModelConfig
from .optim import (
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_EPS,
    DEFAULT_GRDA_C,
    DEFAULT_GRDA_MU,
    DEFAULT_LR,
)
from .synthetic import DEFAULT_PLANTED

STREAMS = {
    "data": 1,
    "init": 2,
    "downsample": 3,
    "shuffle": 4,
    "random_gates": 5,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one concern of a run, e.g. ``substream(7, "init")``."""
    if name not in STREAMS:
        raise ConfigError(f"Unknown random stream '{name}'. Supported: {', '.join(STREAMS)}")
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


class DataSource(Enum):
    SYNTHETIC = "synthetic"
    ENCODED = "encoded"
    RAW = "raw"


class RetrainVariant(Enum):
    AUTOFM = "autofm"
    AUTOFM_BN = "autofm-bn"
    AUTOFM_BN_ALPHA = "autofm-bn-alpha"
    RANDOM_FM = "random-fm"
    STATS_TOP_N = "stats-top-n"


@dataclass(frozen=True)
class DataConfig:
    source: DataSource = DataSource.SYNTHETIC
    train_path: str = ""
    test_path: str = ""
    schema_path: str = ""
    raw_path: str = ""
    numeric_fields: Tuple[str, ...] = ()
    multi_hot_fields: Tuple[str, ...] = ()
    reduce: Reduce = Reduce.SUM
    min_count: int = 20
    bucket_count: int = 10
    holdout: float = 0.2
    downsample_ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError(f"data.holdout must be in (0, 1), got {self.holdout}")
        if self.min_count < 1:
            raise ConfigError(f"data.min_count must be >= 1, got {self.min_count}")
        if self.bucket_count < 2:
            raise ConfigError(f"data.bucket_count must be >= 2, got {self.bucket_count}")
        if not 0.0 <= self.downsample_ratio < 1.0:
            raise ConfigError(f"data.downsample_ratio must be in [0, 1), got {self.downsample_ratio}")


@dataclass(frozen=True)
class SyntheticConfig:
    spec_path: str = ""
    fields: int = 6
    categories: int = 60
    planted: str = DEFAULT_PLANTED
    n_train: int = 100_000
    n_test: int = 20_000
    noise_ratio: float = 0.01
    seed: Optional[int] = None

    def __post_init__(self):
        if self.fields < 2 or self.categories < 1:
            raise ConfigError("synthetic.fields must be >= 2 and synthetic.categories >= 1")
        if self.n_train < 2 or self.n_test < 2:
            raise ConfigError("synthetic.n_train and synthetic.n_test must be >= 2")
        if self.noise_ratio < 0:
            raise ConfigError(f"synthetic.noise_ratio must be >= 0, got {self.noise_ratio}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    batch_size: int = 2000
    # none: budget_grda_lr over the stage's step count
    grda_lr: Optional[float] = None
    grda_c: float = DEFAULT_GRDA_C
    grda_mu: float = DEFAULT_GRDA_MU

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"optim.batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"optim.lr must be > 0, got {self.lr}")
        if self.grda_lr is not None and self.grda_lr <= 0:
            raise ConfigError(f"optim.grda_lr must be > 0, got {self.grda_lr}")
        if self.grda_c < 0:
            raise ConfigError(f"optim.grda_c must be >= 0, got {self.grda_c}")
        if self.grda_lr is None and self.grda_c == 0:
            raise ConfigError("optim.grda_c = 0 needs an explicit optim.grda_lr")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 1
    variant: RetrainVariant = RetrainVariant.AUTOFM

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "runs"
    seeds: Tuple[int, ...] = ()
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError(f"run.jobs must be >= 1, got {self.jobs}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    search: StageConfig = field(default_factory=StageConfig)
    retrain: StageConfig = field(default_factory=StageConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


SECTIONS = [f.name for f in fields(RunConfig)]


# ---------------------------------------------------------------------------
# Value conversion
# ---------------------------------------------------------------------------

def _coerce(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return None if raw.lower() in ("", "none", "auto") else _coerce(raw, inner, where)
    if origin is tuple:
        inner = typing.get_args(hint)[0]
        return tuple(_coerce(p, inner, where) for p in raw.split(",") if p.strip())
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(raw.lower())
        except ValueError:
            choices = ", ".join(str(m.value) for m in hint)
            raise ConfigError(f"{where}: unknown value {raw!r}. Supported: {choices}")
    if hint is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if raw.lower() not in states:
            raise ConfigError(f"{where}: expected true/false, got {raw!r}")
        return states[raw.lower()]
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {hint.__name__}, got {raw!r}")
    return raw


def _render(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def _build(cls, section: str, values: Dict[str, str]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(
            f"Unknown key(s) in [{section}]: {', '.join(unknown)}. "
            f"Supported: {', '.join(sorted(known))}"
        )
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except GatedFMError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def parse_override(text: str) -> Tuple[str, str, str]:
    """``"optim.lr=0.01"`` -> ``("optim", "lr", "0.01")``."""
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ConfigError(f"Override {text!r} must look like section.key=value")
    return section, name, value.strip()


def load_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    text: Optional[str] = None,
) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                cp.read_file(fh)
        if text is not None:
            cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"Unreadable config: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc

    values: Dict[str, Dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for item in overrides:
        section, key, value = parse_override(item)
        values.setdefault(section, {})[key] = value

    unknown = sorted(set(values) - set(SECTIONS))
    if unknown:
        raise ConfigError(
            f"Unknown section(s): {', '.join(unknown)}. Supported: {', '.join(SECTIONS)}"
        )
    hints = typing.get_type_hints(RunConfig)
    return RunConfig(**{s: _build(hints[s], s, values.get(s, {})) for s in SECTIONS})


def canonical_lines(cfg: RunConfig) -> List[str]:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in sorted(fields(obj), key=lambda f: f.name):
            lines.append(f"{section}.{f.name}={_render(getattr(obj, f.name))}")
    return lines


def config_hash(cfg: RunConfig) -> str:
    """First 16 hex digits of SHA-256 over the sorted ``section.key=value`` lines."""
    canon = "\n".join(sorted(canonical_lines(cfg)))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        obj = getattr(cfg, section)
        cp[section] = {f.name: _render(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
