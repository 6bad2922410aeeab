"""Run configuration: env choices, counts, thresholds, net sizes, and knobs
for the iteration loop. Serialized as JSON and echoed into run manifests."""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, Field, field_validator

from .envs import TASKS


class TaskSettings(BaseModel):
    demo_count: int = 200
    demo_noise: float = 0.45
    # Mixed-quality demos: every other episode uses this noise level instead,
    # giving the empirical-return advantages a real quality signal.
    demo_noise_high: float | None = None
    init_set: str = "standard"  # reset distribution used for this task's runs
    advantage_n_ticks: int | None = None  # None: l_max // 10
    # Iteration-stage positive-fraction override (strict mode: 0.10); the
    # pre-training stage always calibrates at the shared pretrain fraction.
    iteration_threshold_fraction: float | None = None
    env_overrides: dict = Field(default_factory=dict)


class TrainingSettings(BaseModel):
    value_hidden: list[int] = [256, 256]
    value_epochs: int = 30
    value_batch: int = 256
    value_lr: float = 1e-3
    trunk_hidden: list[int] = [64]
    trunk_out: int = 64
    dhead_hidden: list[int] = [32]
    bhead_hidden: list[int] = [64]
    fhead_hidden: list[int] = [64, 64]
    policy_epochs: int = 40
    policy_batch: int = 128
    policy_lr: float = 1e-3
    indicator_dropout: float = 0.3
    euler_steps: int = 10


class IterationSettings(BaseModel):
    iterations: int = 2
    autonomous_count: int = 300
    intervention_count: int = 100
    pretrain_positive_fraction: float = 0.30
    iteration_positive_fraction: float = 0.40
    include_negative_episodes: bool = True
    evaluation_episodes: int = 200
    evaluation_beta: float = 1.0


class GateSettings(BaseModel):
    window: int = 10
    drop_threshold: float = 0.15
    failure_margin: float = 0.1
    recovery_factor: float = 0.9


class BaselineSettings(BaseModel):
    beta_awr: float = 0.5
    w_max: float = 20.0
    eps_ar: float = 0.01
    eps_flow: float = 0.01
    alpha: float = 1.0
    epochs: int = 40


class RunConfig(BaseModel):
    tasks: list[str]
    task_settings: dict[str, TaskSettings] = Field(default_factory=dict)
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    iteration: IterationSettings = Field(default_factory=IterationSettings)
    gate: GateSettings = Field(default_factory=GateSettings)
    baselines: BaselineSettings = Field(default_factory=BaselineSettings)

    @field_validator("tasks")
    @classmethod
    def _known_tasks(cls, tasks):
        unknown = [t for t in tasks if t not in TASKS]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}; expected a subset of {list(TASKS)}")
        if not tasks:
            raise ValueError("at least one task required")
        return tasks

    def task(self, task_id: str) -> TaskSettings:
        return self.task_settings.get(task_id, TaskSettings())


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text())


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(), indent=2) + "\n")
