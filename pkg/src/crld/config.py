"""Run configuration as flat ``section.key=value`` text.

Example::

    # a synthetic run
    data.kind=synthetic
    data.num_classes=8
    distill.tau_w=0.75
    distill.pairings=true,true,true,true
    run.out=runs/demo

Blank lines and lines starting with ``#`` are ignored. Values are parsed
using the type of the field's default, so ``dump`` followed by ``parse``
gives back an equal :class:`RunConfig`. Only ``data.kind`` and ``run.out``
have no default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from crld.augment import StrongPolicy
from crld.distill import ABLATION_GRID, DistillConfig
from crld.models import ModelConfig, Schedule, teacher_config, student_config

DATA_KINDS = ("synthetic", "cifar10", "cifar100")


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


@dataclass
class DataSpec:
    kind: str = ""
    train_path: str = ""
    test_path: str = ""
    num_classes: int = 8
    per_class_train: int = 100
    per_class_test: int = 100
    size: int = 32
    noise: float = 24.0
    seed: int = 0


@dataclass
class AugmentSpec:
    n: int = 2
    p_s: float = 1.0

    def policy(self):
        return StrongPolicy(self.n, self.p_s)


@dataclass
class OptimSpec:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class ScheduleSpec:
    # "auto" places the decays at 150/180/210 of 240 scaled to the run length
    milestones: str = "auto"
    gamma: float = 0.1

    def build(self, base_lr, epochs):
        if self.milestones == "auto":
            return Schedule.scaled(epochs, base_lr, self.gamma)
        return Schedule(base_lr, _parse_ints(self.milestones), self.gamma)


@dataclass
class PretrainSpec:
    epochs: int = 30
    batch_size: int = 64


@dataclass
class SweepSpec:
    rows: tuple = tuple(ABLATION_GRID)
    tau_w_grid: tuple = (0.5, 0.75, 0.95)
    tau_s_grid: tuple = (0.15, 0.35, 0.55)
    n_grid: tuple = (1, 2, 3)
    ps_grid: tuple = (0.25, 0.5, 1.0)


@dataclass
class RunSpec:
    out: str = ""
    seed: int = 0
    workers: int = 1
    teacher_ckpt: str = ""
    student_ckpt: str = ""
    preview_count: int = 8


def _default_teacher():
    return teacher_config(8)


def _default_student():
    return student_config(8)


def _default_distill():
    return DistillConfig()


@dataclass
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    teacher: ModelConfig = field(default_factory=_default_teacher)
    student: ModelConfig = field(default_factory=_default_student)
    distill: DistillConfig = field(default_factory=_default_distill)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def validate(self):
        if self.data.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.data.kind!r}")
        if self.data.kind != "synthetic" and not self.data.train_path:
            raise ConfigError(f"data.train_path is required for {self.data.kind}")
        if not self.run.out:
            raise ConfigError("run.out is required")
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.schedule.milestones != "auto":
            try:
                _parse_ints(self.schedule.milestones)
            except ValueError as exc:
                raise ConfigError(f"schedule.milestones: {exc}") from exc
        for row in self.sweep.rows:
            if row not in ABLATION_GRID:
                raise ConfigError(f"sweep.rows: unknown ablation row {row!r}")
        for name in ("tau_w_grid", "tau_s_grid"):
            if any(not 0.0 <= t <= 1.0 for t in getattr(self.sweep, name)):
                raise ConfigError(f"sweep.{name} values must lie in [0, 1]")
        if any(n < 1 for n in self.sweep.n_grid):
            raise ConfigError("sweep.n_grid values must be >= 1")
        if any(not 0.0 < p <= 1.0 for p in self.sweep.ps_grid):
            raise ConfigError("sweep.ps_grid values must lie in (0, 1]")
        try:
            self.augment.policy()
        except ValueError as exc:
            raise ConfigError(f"augment: {exc}") from exc
        return self

    def with_seed(self, seed):
        return replace(self, run=replace(self.run, seed=int(seed)))

    def with_out(self, out):
        return replace(self, run=replace(self.run, out=str(out)))

    def distill_config(self, **overrides) -> DistillConfig:
        """The distillation settings with the run seed applied."""
        return replace(self.distill, seed=self.run.seed, **overrides)


SECTIONS = tuple(f.name for f in fields(RunConfig))
# keys that do not change results and are left out of the config hash
_UNHASHED = {"run.out", "run.workers", "run.teacher_ckpt", "run.student_ckpt"}
# the run seed lives in run.seed
_SKIPPED = {"distill.seed"}


def _parse_ints(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text, kind, key):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


def _parse_value(text, default, key):
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        return tuple(_parse_scalar(t.strip(), kind, key) for t in text.split(",") if t.strip())
    return _parse_scalar(text, type(default), key)


def items(cfg: RunConfig):
    """``(dotted key, value)`` pairs in canonical order."""
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            key = f"{section}.{f.name}"
            if key not in _SKIPPED:
                yield key, getattr(obj, f.name)


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{key}={_format(value)}\n" for key, value in items(cfg))


def parse(text: str, validate=True) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()

    cfg = RunConfig()
    sections = {}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        kwargs = {}
        for f in fields(obj):
            key = f"{section}.{f.name}"
            if key in values and key not in _SKIPPED:
                kwargs[f.name] = _parse_value(values.pop(key), getattr(obj, f.name), key)
        try:
            sections[section] = replace(obj, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    if values:
        raise ConfigError(f"unknown config keys: {sorted(values)}")
    cfg = RunConfig(**sections)
    return cfg.validate() if validate else cfg


def load(path, validate=True) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), validate)


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the canonical text of every key that affects results."""
    text = "".join(f"{k}={_format(v)}\n" for k, v in items(cfg) if k not in _UNHASHED)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
