"""Run configuration files (JSON) with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .losses import KdLossConfig
from .training import DEFAULT_BETA_GRID, METHODS, TrainConfig


@dataclass
class SyntheticSection:
    classes: int = 3
    train: int = 200
    test: int = 200
    noise: float = 0.3
    seed: int = 0
    length: int = 100


@dataclass
class DataSection:
    path: str | None = None
    synthetic: SyntheticSection | None = None
    target_length: int = 100
    val_fraction: float = 0.2
    split_seed: int = 0


@dataclass
class ArchSection:
    hidden: int
    layers: int


@dataclass
class TrainSection:
    lr_teacher: float = 0.01
    lr_student: float = 0.1
    batch: int = 32
    epochs: int = 500
    patience: int = 50
    seeds: int = 5
    base_seed: int = 0


@dataclass
class KdSection:
    method: str = "memkd"
    alpha: float = 1.0
    beta: float | None = None
    beta_grid: list[float] | None = None
    tau: float = 4.0
    delta: float = 1.0
    K: int | None = None
    epsilon: float = 1e-8


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    teacher: ArchSection = field(default_factory=lambda: ArchSection(100, 3))
    student: ArchSection = field(default_factory=lambda: ArchSection(8, 1))
    train: TrainSection = field(default_factory=TrainSection)
    kd: KdSection = field(default_factory=KdSection)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def kd_loss(self) -> KdLossConfig:
        k = self.kd
        return KdLossConfig(alpha=k.alpha, beta=k.beta or 0.0, tau=k.tau, delta=k.delta,
                            num_long_pairs=k.K, epsilon=k.epsilon)

    def teacher_train(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr_teacher, batch_size=t.batch, max_epochs=t.epochs, patience=t.patience,
                           seeds=t.seeds, base_seed=t.base_seed)

    def student_train(self, method: str | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr_student, batch_size=t.batch, max_epochs=t.epochs, patience=t.patience,
                           seeds=t.seeds, base_seed=t.base_seed, method=method or self.kd.method,
                           kd=self.kd_loss())

    def beta_grid(self) -> list[float] | None:
        if self.kd.beta_grid is not None:
            return list(self.kd.beta_grid)
        if self.kd.beta is None:
            return list(DEFAULT_BETA_GRID)
        return None


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if cls is DataSection and name == "synthetic" and value is not None:
            value = _build(SyntheticSection, value, f"{where}.synthetic")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {"data": DataSection, "teacher": ArchSection, "student": ArchSection, "train": TrainSection, "kd": KdSection}


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        if name not in raw:
            continue
        section = raw[name]
        if cls is ArchSection:
            base = asdict(getattr(cfg, name))
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected an object")
            base.update(section)
            section = base
        setattr(cfg, name, _build(cls, section, name))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.kd.method not in METHODS:
        raise ConfigError(f"kd.method must be one of {', '.join(METHODS)}")
    if cfg.kd.beta is not None and cfg.kd.beta_grid is not None:
        raise ConfigError("give kd.beta or kd.beta_grid, not both")
    if cfg.kd.beta_grid is not None and not cfg.kd.beta_grid:
        raise ConfigError("kd.beta_grid is empty")
    if cfg.data.target_length < 2:
        raise ConfigError("data.target_length must be at least 2")
    if not 0 < cfg.data.val_fraction < 1:
        raise ConfigError("data.val_fraction must lie in (0, 1)")
    for arch in (cfg.teacher, cfg.student):
        if arch.hidden < 1 or arch.layers < 1:
            raise ConfigError("hidden and layers must be positive")
    try:
        cfg.kd_loss()
        cfg.teacher_train()
        cfg.student_train()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)
