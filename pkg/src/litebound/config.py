"""Run configuration: a nested YAML document validated against dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .frequency import DEFAULT_CUTOFF
from .losses import DEFAULT_LAMBDAS, PhaseConfig

DEFAULT_SCHEDULE = ((1, 40), (41, 80), (81, 120))


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


@dataclass
class DataConfig:
    train: str = "data/train"
    test: str = "data/test"


@dataclass
class TeacherConfig:
    bank: list = field(default_factory=lambda: ["edge_bank", "intensity_pyramid", "random_conv"])


@dataclass
class DistillConfig:
    enabled: bool = True
    width: int = 64
    projection_seed: int = 0


@dataclass
class ModelConfig:
    backbone: str = "unet"
    width: int = 64


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-4
    lr_decay: float = 1.0  # per-epoch multiplicative factor; 1.0 = constant
    batch_size: int = 8
    schedule: list = field(default_factory=lambda: [list(r) for r in DEFAULT_SCHEDULE])
    schedule_scale: float = 1.0
    lambdas: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    augment: bool = True
    dtype: str = "float32"
    threads: int = 1


@dataclass
class EvalConfig:
    threshold: float = 0.5
    band_width: float = 3.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teachers: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    cutoff_ratio: float = DEFAULT_CUTOFF
    device: str = "cpu"

    # ------------------------------------------------------------------ io

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        problems: list[str] = []
        cfg = _build(cls, raw or {}, "", problems)
        if not problems:
            problems = cfg.check()
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        apply_overrides(raw, overrides or [])
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def fingerprint(self) -> str:
        """Hash of everything that shapes the training trajectory."""
        d = self.to_dict()
        d.pop("data")
        d.pop("eval")
        d["train"].pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    # ------------------------------------------------------------------ checks

    def check(self) -> list[str]:
        p = []
        t = self.train
        if len(t.lambdas) != 5:
            p.append(f"train.lambdas must have 5 entries, got {len(t.lambdas)}")
        if not 0 < self.cutoff_ratio < 1:
            p.append("cutoff_ratio must lie in (0, 1)")
        if t.lr < 0:
            p.append("train.lr must be non-negative")
        if t.batch_size < 1:
            p.append("train.batch_size must be positive")
        if t.schedule_scale <= 0:
            p.append("train.schedule_scale must be positive")
        if t.dtype not in ("float32", "float64"):
            p.append("train.dtype must be float32 or float64")
        if len(t.schedule) != 3:
            p.append("train.schedule needs three [first, last] epoch ranges")
        else:
            prev = 0
            for rng in t.schedule:
                if len(rng) != 2 or rng[0] != prev + 1 or rng[1] < rng[0]:
                    p.append(f"train.schedule ranges must be consecutive and disjoint: {t.schedule}")
                    break
                prev = rng[1]
        if self.distill.width < 1:
            p.append("distill.width must be >= 1")
        if self.model.width < 1:
            p.append("model.width must be >= 1")
        if not self.teachers.bank:
            p.append("teachers.bank must not be empty")
        return p

    # ------------------------------------------------------------------ schedule

    def phase_ranges(self) -> list[tuple[int, int]]:
        out, start = [], 1
        for lo, hi in self.train.schedule:
            n = max(1, int(round((hi - lo + 1) * self.train.schedule_scale)))
            out.append((start, start + n - 1))
            start += n
        return out

    def phases(self, distill: bool | None = None, phase1_only: bool = False) -> list[PhaseConfig]:
        distill = self.distill.enabled if distill is None else distill
        t = self.train
        common = dict(lambdas=tuple(t.lambdas), lr=t.lr, batch_size=t.batch_size, distill=distill)
        ranges = self.phase_ranges()
        if phase1_only:
            return [PhaseConfig(1, (1, ranges[-1][1]), **common)]
        return [
            PhaseConfig(1, ranges[0], **common),
            PhaseConfig(2, ranges[1], **common),
            PhaseConfig(3, ranges[2], trainable="decoder_and_heads_only", **common),
        ]


def _build(cls, raw: Any, prefix: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{prefix.rstrip('.') or '<root>'}: expected a mapping")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in fields:
            problems.append(f"unknown key {prefix}{key}")
    kwargs = {}
    for name, f in fields.items():
        if name not in raw:
            continue
        value = raw[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{prefix}{name}.", problems)
        else:
            kwargs[name] = _coerce(value, f, f"{prefix}{name}", problems)
    return cls(**kwargs)


def _coerce(value, f: dataclasses.Field, key: str, problems: list[str]):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: expected a number, got {value!r}")
            return default
        if isinstance(default, int) and not isinstance(value, int):
            problems.append(f"{key}: expected an integer, got {value!r}")
            return default
        return type(default)(value)
    if isinstance(default, list) and not isinstance(value, list):
        problems.append(f"{key}: expected a list, got {value!r}")
        return default
    if isinstance(default, str) and not isinstance(value, str):
        problems.append(f"{key}: expected a string, got {value!r}")
        return default
    return value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, text = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {key}: {part} is not a section"])
        node[parts[-1]] = yaml.safe_load(text)
    return raw
