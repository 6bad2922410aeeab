from .base import OBS_DIM, EnvSpec, Observation, StepResult, as_chunk
from .gate import GateConfig, GateState, gate_decide
from .gridfold import GridFold
from .reach import CollarFlip, ReachChunk

TASKS = ("gridfold", "reachchunk", "collarflip")


def make_env(task_id: str, **overrides):
    if task_id == "gridfold":
        return GridFold(**overrides)
    if task_id == "reachchunk":
        return ReachChunk(**overrides)
    if task_id == "collarflip":
        return CollarFlip(**overrides)
    raise ValueError(f"unknown task {task_id!r}; expected one of {TASKS}")


__all__ = [
    "OBS_DIM",
    "EnvSpec",
    "Observation",
    "StepResult",
    "as_chunk",
    "GateConfig",
    "GateState",
    "gate_decide",
    "GridFold",
    "ReachChunk",
    "CollarFlip",
    "TASKS",
    "make_env",
]
