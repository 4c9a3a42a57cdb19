"""Run configuration file: one JSON document with optional per-stage sections.

Schema (all sections optional, unknown keys rejected)::

    {
      "schema_version": 1,
      "teacher": {...TeacherConfig fields...},
      "student": {...StudentConfig fields...},
      "train":   {...TrainConfig fields...},
      "eval":    {...EvalSpec fields...},
      "bench":   {"batches": [1, 2, 4], "memory_budget_mb": 1024, "repeats": 5, "warmup": 1, "threads": 1}
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from . import config as cfgutil
from .config import ConfigError
from .evaluation.suite import EvalSpec
from .teacher import TeacherConfig
from .trainer import TrainConfig

RUN_SCHEMA_VERSION = 1


@dataclass
class BenchSpec:
    batches: List[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    memory_budget_mb: int = 1024
    repeats: int = 5
    warmup: int = 1
    threads: int = 1

    def __post_init__(self):
        if not self.batches or any(b < 1 for b in self.batches):
            raise ValueError("batches must be positive")
        if self.repeats < 5:
            raise ValueError("repeats must be >= 5")
        if self.memory_budget_mb < 1 or self.threads < 1 or self.warmup < 0:
            raise ValueError("invalid bench settings")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    schema_version: int = RUN_SCHEMA_VERSION
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    # student overrides applied on top of the teacher-derived defaults
    student: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "teacher": self.teacher.to_dict(),
                "student": dict(self.student), "train": self.train.to_dict(), "eval": self.eval.to_dict(),
                "bench": self.bench.to_dict()}


def parse_run_config(data: dict) -> RunConfig:
    """Validate a config mapping fully; raises ConfigError naming the offending key."""
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    version = data.get("schema_version", RUN_SCHEMA_VERSION)
    if version != RUN_SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {RUN_SCHEMA_VERSION})")
    cfg = cfgutil.from_dict(RunConfig, data)
    if not isinstance(cfg.student, dict):
        raise ConfigError("student: expected a mapping")
    from .student import StudentConfig

    # validate student overrides now rather than at model construction
    try:
        StudentConfig.for_teacher(cfg.teacher, **cfg.student)
    except TypeError as exc:
        raise ConfigError(f"student: {exc}") from exc
    cfgutil.from_dict(StudentConfig, StudentConfig.for_teacher(cfg.teacher, **cfg.student).to_dict(), "student")
    return cfg


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(data)
