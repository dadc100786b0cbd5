"""Experiment configuration: nested dataclasses loaded from dotted ``key=value`` files."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .asv import ROLE_PARAMS, TrainConfig
from .attack import AttackConfig
from .dataio import CorpusConfig
from .defense import CascadeConfig
from .masking import MaskConfig
from .reformer import ALL_TAGS, ReformerTrainConfig

SEED_ENV = "ADVSHIELD_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    train_utts: int = 4
    n_trials: int = 1000


@dataclass(frozen=True)
class AwareConfig:
    tags: tuple[str, ...] = ("TC", "TCM")
    blocks: int = 1


@dataclass(frozen=True)
class ReformerSection:
    tags: tuple[str, ...] = ("TC", "TCM")
    hidden_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ff_dim: int = 256
    learning_rate: float = 1e-3
    epochs: int = 400
    batch_size: int = 16


@dataclass(frozen=True)
class DetectionConfig:
    moment_order: int = 5
    include_s0: bool = True
    orders: tuple[int, ...] = (2, 3, 4, 5)


@dataclass(frozen=True)
class FilterConfig:
    kernel: int = 3
    sigma: float = 1.0


@dataclass(frozen=True)
class EvalConfig:
    pooling_ratios: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    p_target: float = 0.01
    recalibrate: bool = True


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(utts_per_speaker=12))
    split: SplitConfig = field(default_factory=SplitConfig)
    asv: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    aware: AwareConfig = field(default_factory=AwareConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    reformer: ReformerSection = field(default_factory=ReformerSection)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    output_dir: str = "runs/default"
    global_seed: int = 0

    def __post_init__(self):
        for tag in self.reformer.tags:
            if tag not in ALL_TAGS:
                raise ConfigError(f"unknown reformer tag {tag!r}")
        if len(set(self.reformer.tags)) != len(self.reformer.tags):
            raise ConfigError("duplicate reformer tags")
        if self.cascade.reformer_tag not in self.reformer.tags:
            raise ConfigError(f"cascade tag {self.cascade.reformer_tag!r} is not among the trained reformers")
        for tag in self.aware.tags:
            if tag not in self.reformer.tags:
                raise ConfigError(f"attacker-aware tag {tag!r} is not among the trained reformers")
        if any(r < 0 for r in self.eval.pooling_ratios):
            raise ConfigError("pooling ratios must be >= 0")

    def reformer_train_config(self, seed: int) -> ReformerTrainConfig:
        r = self.reformer
        return ReformerTrainConfig(self.mask, r.hidden_dim, r.n_layers, r.n_heads, r.ff_dim,
                                   r.learning_rate, r.epochs, r.batch_size, seed)

    def section(self, name: str):
        return getattr(self, name)


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value.strip()
        if origin is tuple:
            (inner, _) = typing.get_args(tp)
            items = [v for v in value.replace(",", " ").split() if v]
            if items == ["all"] and inner is str:
                return ALL_TAGS
            return tuple(_coerce(v, inner, key) for v in items)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
    raise ConfigError(f"unsupported field type {tp} for {key}")


def _resolved_hints(cls):
    return typing.get_type_hints(cls)


def parse_overrides(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply dotted ``section.field`` overrides to a config."""
    base = base if base is not None else ExperimentConfig()
    top_hints = _resolved_hints(ExperimentConfig)
    sections: dict[str, dict] = {}
    top: dict[str, object] = {}
    role_given = False
    explicit_asv = set()
    for key, value in pairs.items():
        if "." not in key:
            if key not in top_hints or dataclasses.is_dataclass(top_hints[key]):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(value, top_hints[key], key)
            continue
        sec, name = key.split(".", 1)
        if sec not in top_hints or not dataclasses.is_dataclass(top_hints[sec]):
            raise ConfigError(f"unknown config section in {key!r}")
        hints = _resolved_hints(top_hints[sec])
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        sections.setdefault(sec, {})[name] = _coerce(value, hints[name], key)
        if sec == "asv":
            explicit_asv.add(name)
            role_given |= name == "role"
    if role_given:
        role = sections["asv"]["role"]
        if role not in ROLE_PARAMS:
            raise ConfigError(f"unknown ASV role {role!r}")
        margin, scale = ROLE_PARAMS[role]
        sections["asv"].setdefault("margin", margin)
        sections["asv"].setdefault("scale", scale)
    try:
        changes = {sec: dataclasses.replace(getattr(base, sec), **vals) for sec, vals in sections.items()}
        return dataclasses.replace(base, **changes, **top)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def read_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {no}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None, environ=None) -> ExperimentConfig:
    """Read a config file, apply overrides, then the ``ADVSHIELD_SEED`` environment variable."""
    pairs = read_pairs(Path(path).read_text(encoding="utf-8")) if path else {}
    pairs.update(overrides or {})
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        pairs["global_seed"] = environ[SEED_ENV]
    return parse_overrides(pairs)


def to_pairs(config: ExperimentConfig) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                out[f"{f.name}.{g.name}"] = _render(getattr(value, g.name))
        else:
            out[f.name] = _render(value)
    return out


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_config(config: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_pairs(config).items())


def section_json(obj) -> str:
    return json.dumps(dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj, sort_keys=True, default=list)
