"""Run configuration: a nested YAML document mapped onto dataclasses.

Every field can be set in the file or overridden on the command line with
``--set section.key=value``. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data.mixture import MixtureConfig
from .errors import ConfigError
from .model import ModelConfig
from .objectives import MPOConfig, WeightingScheme
from .positions import parse_delta

STAGES = ("pretrain", "sft", "mpo", "prm", "bon", "eval")


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float = 1.0
    schedule: str = "cosine"  # constant | cosine
    warmup: int = 50
    min_lr_ratio: float = 0.05

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        self.betas = tuple(float(b) for b in self.betas)
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class DataPaths:
    train: str | None = None  # pretrain schema; split into pools by kind
    eval: str | None = None  # pretrain schema
    preference: str | None = None
    heldout: str | None = None  # preference schema, margin tracking
    prm: str | None = None
    candidates: str | None = None  # prm schema, grouped by question for best-of-N


@dataclass
class Paths:
    vocab: str | None = None
    ckpt_in: str | None = None
    ckpt_out: str | None = None
    critic: str | None = None
    out_dir: str = "runs"


@dataclass
class BoNConfig:
    n: int = 8
    oracle: bool = False
    workers: int = 0


@dataclass
class EvalConfig:
    max_new: int = 48
    delta_sweep: bool = False
    heldout_pairs: int = 100


@dataclass
class RunConfig:
    stage: str = "pretrain"
    seed: int = 0
    steps: int = 100
    batch_size: int = 16
    delta: str = "sample"  # "sample" draws per image from the delta set; otherwise a fixed member
    weighting: str = "square"
    force: bool = False
    log_every: int = 1
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    mpo: MPOConfig = field(default_factory=MPOConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataPaths = field(default_factory=DataPaths)
    paths: Paths = field(default_factory=Paths)
    bon: BoNConfig = field(default_factory=BoNConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        WeightingScheme.parse(self.weighting)
        self.delta = str(self.delta)
        if self.delta not in ("sample", "auto"):
            parse_delta(self.delta)

    @property
    def scheme(self) -> WeightingScheme:
        return WeightingScheme.parse(self.weighting)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def snapshot(self) -> dict:
        """Semantic fields only: file locations do not change what a run computes."""
        d = self.to_dict()
        d.pop("paths")
        d.pop("data")
        for key in ("log_every", "checkpoint_every", "force"):
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, raw: dict | None) -> RunConfig:
        return _build(cls, raw or {}, "")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        return cls.from_dict(raw)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    def override(self, assignments: list[str]) -> RunConfig:
        """Apply ``a.b=value`` assignments (values parsed as YAML scalars)."""
        raw = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            node = raw
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = yaml.safe_load(value)
        return RunConfig.from_dict(raw)

    def replace(self, **changes) -> RunConfig:
        raw = self.to_dict()
        raw.update(changes)
        return RunConfig.from_dict(raw)


def lr_at(o: OptimConfig, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` of ``total``: linear warmup, then cosine decay."""
    if o.schedule == "constant":
        return o.lr
    if o.warmup and step < o.warmup:
        return o.lr * (step + 1) / o.warmup
    span = max(total - o.warmup, 1)
    t = min(max(step - o.warmup, 0) / span, 1.0)
    return o.lr * (o.min_lr_ratio + (1.0 - o.min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * t)))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {where or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value if value is not None else {}, name)
        else:
            kwargs[name] = _coerce(fields[name], value, f"{where}.{name}" if where else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where or '<root>'}: {exc}") from exc


def _coerce(f: dataclasses.Field, value, key: str):
    default = f.default
    if value is None or default is dataclasses.MISSING or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, float) and not isinstance(value, bool):
            return float(value)
        if isinstance(default, int) and not isinstance(value, bool):
            if float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key}: cannot use {value!r} as {type(default).__name__}") from None
    return value


_SECTIONS = {
    "model": ModelConfig,
    "mixture": MixtureConfig,
    "mpo": MPOConfig,
    "optim": OptimConfig,
    "data": DataPaths,
    "paths": Paths,
    "bon": BoNConfig,
    "eval": EvalConfig,
}
