"""Reward assignment, undiscounted returns, per-task normalization, and
discretization into the 201 value bins.

Rewards are -1 per step with a terminal reward of 0 on success and -C_fail on
failure; C_fail equals the task's maximum episode length so that failed
episodes clamp to the lowest normalized value at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_BINS = 201
BIN_VALUES = np.linspace(-1.0, 0.0, N_BINS)


@dataclass
class RewardedEpisode:
    rewards: np.ndarray  # length T+1; rewards[T] is the terminal reward
    outcome: str  # "success" | "failure"
    task_id: str
    length: int  # T, in steps


@dataclass
class NormalizedReturnTrace:
    returns: np.ndarray  # R_hat_t in [-1, 0], length T+1
    bins: np.ndarray  # int bin indices in [0, 200]


def rewards_from_outcome(outcome: str, length: int, task_id: str, l_max: int) -> RewardedEpisode:
    """Per-step rewards for an episode of ``length`` steps that terminated
    with ``outcome``. C_fail = l_max."""
    if outcome not in ("success", "failure"):
        raise ValueError(f"episode has no terminal outcome (got {outcome!r})")
    if length < 0:
        raise ValueError("negative episode length")
    rewards = np.full(length + 1, -1.0)
    rewards[length] = 0.0 if outcome == "success" else -float(l_max)
    return RewardedEpisode(rewards=rewards, outcome=outcome, task_id=task_id, length=length)


def returns(rewarded: RewardedEpisode) -> np.ndarray:
    """Undiscounted suffix sums R_t = sum_{t'=t}^{T} r_{t'}."""
    return np.cumsum(rewarded.rewards[::-1])[::-1].copy()


def normalize_returns(raw_returns: np.ndarray, l_max: int) -> NormalizedReturnTrace:
    if l_max < 1:
        raise ValueError(f"l_max must be >= 1, got {l_max}")
    r_hat = np.clip(np.asarray(raw_returns, dtype=np.float64) / float(l_max), -1.0, 0.0)
    return NormalizedReturnTrace(returns=r_hat, bins=np.array([discretize(x) for x in r_hat]))


def discretize(r_hat: float) -> int:
    """Uniform bins over [-1, 0]: round-trip error is at most 1/400."""
    if not (-1.0 - 1e-12 <= r_hat <= 1e-12):
        raise ValueError(f"normalized return {r_hat} outside [-1, 0]")
    return int(np.clip(round((r_hat + 1.0) * (N_BINS - 1)), 0, N_BINS - 1))


def undiscretize(bin_index: int) -> float:
    if not 0 <= bin_index < N_BINS:
        raise ValueError(f"bin index {bin_index} outside [0, {N_BINS - 1}]")
    return -1.0 + bin_index / (N_BINS - 1)
