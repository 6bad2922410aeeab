"""Scripted intervention gate standing in for a monitoring operator.

Triggers a takeover when the critic's value trace drops sharply within a
window or the rollout strays too close to a failure region; hands control
back once the value recovers toward its pre-drop level.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class GateConfig:
    window: int = 10
    drop_threshold: float = 0.15
    failure_margin: float = 0.1
    recovery_factor: float = 0.9


@dataclass
class GateState:
    intervening: bool = False
    pre_drop_value: float = 0.0


def gate_decide(
    value_trace: list[float],
    dist_to_failure: float,
    gate_state: GateState,
    config: GateConfig,
) -> str:
    """One gate decision: 'continue', 'intervene', or 'release'.

    Mutates ``gate_state`` when the mode flips.
    """
    if not value_trace:
        return "continue"
    current = value_trace[-1]
    window = value_trace[-config.window :]
    if gate_state.intervening:
        if current >= config.recovery_factor * gate_state.pre_drop_value:
            gate_state.intervening = False
            return "release"
        return "continue"
    dropped = max(window) - current > config.drop_threshold
    too_close = dist_to_failure < config.failure_margin
    if dropped or too_close:
        gate_state.intervening = True
        gate_state.pre_drop_value = max(window)
        return "intervene"
    return "continue"
