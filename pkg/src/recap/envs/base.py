"""Shared environment types.

Environments are functional: ``reset`` returns an initial state, ``step``
maps (state, action chunk) to a new state plus a StepResult. States carry a
seeded generator used only for scripted-expert noise and per-episode expert
choices, so whole rollouts are reproducible from the reset seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

OBS_DIM = 10

INIT_SETS = ("standard", "adversarial")


@dataclass
class EnvSpec:
    task_id: str
    obs_dim: int
    kind: str  # "discrete" | "continuous"
    l_max: int  # maximum episode length in low-level steps
    step_seconds: float
    n_actions: int = 0  # discrete only
    action_dim: int = 0  # continuous only
    chunk_h: int = 1  # low-level commands per chunk

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.chunk_h < 1:
            raise ValueError("chunk horizon must be >= 1")
        if self.step_seconds <= 0:
            raise ValueError("step duration must be positive")


@dataclass
class Observation:
    features: np.ndarray
    t: int


@dataclass
class StepResult:
    obs: Observation
    terminal: bool
    outcome: str | None  # "success" | "failure" | None

    def __post_init__(self):
        if self.outcome is not None and not self.terminal:
            raise ValueError("outcome set on a non-terminal step")


def check_init_set(init_set: str) -> None:
    if init_set not in INIT_SETS:
        raise ValueError(f"unknown init-condition set {init_set!r}; expected one of {INIT_SETS}")


def as_chunk(commands: np.ndarray, h: int, dim: int) -> np.ndarray:
    """Validate and clip a command chunk of 1..H rows to [-1, 1]."""
    arr = np.asarray(commands, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != dim or not 1 <= arr.shape[0] <= h:
        raise ValueError(f"chunk shape {arr.shape} incompatible with ({h}, {dim})")
    return np.clip(arr, -1.0, 1.0)


@dataclass
class EpisodeInfo:
    """Env-specific episode annotations (stage completion, mode flags)."""

    stages: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)
