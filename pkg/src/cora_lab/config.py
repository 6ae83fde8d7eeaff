"""JSON run-configuration files.  Unknown keys are errors, never ignored."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .extraction import DEFAULT_THRESHOLDS
from .fixture import FixtureConfig
from .model import ModelDims
from .tasks import TaskSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractionConfig:
    ensemble_size: int = 5
    base_seed: int = 0
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS


@dataclass(frozen=True)
class RunConfigFile:
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec | None = None
    fixture: FixtureConfig = field(default_factory=FixtureConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)

    def task_spec(self) -> TaskSpec:
        if self.task is not None:
            return self.task
        return TaskSpec(kind=self.train.task, vocab_size=self.fixture.dims.vocab_size)


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return dict(data)


def _build(cls, data, where, **convert):
    d = _strict(cls, data, where)
    for key, fn in convert.items():
        if key in d and d[key] is not None:
            d[key] = fn(d[key])
    try:
        return cls(**d)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> RunConfigFile:
    d = _strict(RunConfigFile, data, "config")
    train = _build(TrainConfig, d.get("train", {}), "train", extra_trainable=tuple)
    task = None if d.get("task") is None else _build(TaskSpec, d["task"], "task")
    fx = _strict(FixtureConfig, d.get("fixture", {}), "fixture")
    fixture = _build(
        FixtureConfig, fx, "fixture",
        dims=lambda v: _build(ModelDims, v, "fixture.dims"), pool=tuple,
    )
    extraction = _build(ExtractionConfig, d.get("extraction", {}), "extraction",
                        thresholds=lambda v: tuple(float(x) for x in v))
    if task is not None and task.kind != train.task:
        raise ConfigError(f"task.kind {task.kind!r} disagrees with train.task {train.task!r}")
    return RunConfigFile(train=train, task=task, fixture=fixture, extraction=extraction)


def to_dict(cfg: RunConfigFile) -> dict:
    train = asdict(cfg.train)
    train["extra_trainable"] = list(cfg.train.extra_trainable)
    extraction = asdict(cfg.extraction)
    extraction["thresholds"] = list(cfg.extraction.thresholds)
    return {
        "train": train,
        "task": None if cfg.task is None else asdict(cfg.task),
        "fixture": cfg.fixture.to_dict(),
        "extraction": extraction,
    }


def dumps(cfg: RunConfigFile) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfigFile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return from_dict(data)


def load(path) -> RunConfigFile:
    return loads(Path(path).read_text())


def save(path, cfg: RunConfigFile) -> None:
    Path(path).write_text(dumps(cfg))
