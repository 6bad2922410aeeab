"""Multi-task distributional value function.

The critic maps observation features plus a task one-hot to a categorical
distribution over 201 normalized-return bins, trained with cross-entropy
against discretized empirical returns. Advantages, threshold calibration,
and improvement indicators live here too.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import approx
from .approx import checkpoint as ckpt
from .data import PreparedEpisode, value_input
from .returns import BIN_VALUES, N_BINS

logger = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


# -- losses -----------------------------------------------------------------


class BinCrossEntropy:
    """Mean cross-entropy between one-hot bin targets and softmax outputs."""

    def __init__(self, targets):
        self.targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))

    def value_and_grad(self, outputs: np.ndarray) -> tuple[float, np.ndarray]:
        probs = softmax(outputs)
        rows = np.arange(len(self.targets))
        logp = np.log(probs[rows, self.targets])
        loss = float(-logp.mean())
        grad = probs
        grad[rows, self.targets] -= 1.0
        return loss, grad / len(self.targets)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- the critic ----------------------------------------------------------------


def expected_value(dist: np.ndarray) -> float:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (N_BINS,):
        raise ValueError(f"distribution must have {N_BINS} bins, got shape {dist.shape}")
    if np.any(dist < -1e-9) or abs(float(dist.sum()) - 1.0) > 1e-6:
        raise ValueError("not a probability simplex")
    return float(np.clip(dist @ BIN_VALUES, -1.0, 0.0))


@dataclass
class ValueNet:
    net: approx.Network
    tasks: list[str]

    def distribution(self, obs: np.ndarray, task_id: str) -> np.ndarray:
        return softmax(approx.forward(self.net, value_input(obs, task_id, self.tasks)))

    def value(self, obs: np.ndarray, task_id: str) -> float:
        return expected_value(self.distribution(obs, task_id))

    def values_for_episode(self, prep: PreparedEpisode) -> np.ndarray:
        x = np.stack([value_input(o, prep.task_id, self.tasks) for o in prep.obs])
        probs = softmax(approx.forward(self.net, x))
        return np.clip(probs @ BIN_VALUES, -1.0, 0.0)


@dataclass
class ValueTrainConfig:
    hidden: tuple = (256, 256)
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3


def train_value(
    preps: list[PreparedEpisode],
    tasks: list[str],
    cfg: ValueTrainConfig,
    rng: np.random.Generator,
    init: ValueNet | None = None,
) -> tuple[ValueNet, list[float]]:
    """Cross-entropy training on discretized returns. Returns the critic and
    the per-epoch mean training loss."""
    if not preps:
        raise ValueError("empty dataset")
    xs = np.concatenate([
        np.stack([value_input(o, p.task_id, tasks) for o in p.obs]) for p in preps
    ])
    ys = np.concatenate([p.bins for p in preps])
    sizes = [xs.shape[1], *cfg.hidden, N_BINS]
    if init is not None:
        if init.tasks != list(tasks):
            raise ValueError("init critic was trained with a different task list")
        net = init.net.copy()
    else:
        net = approx.init_network(sizes, rng)
    state = approx.init_adam(net, lr=cfg.lr)
    history: list[float] = []
    n = len(xs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss, grads = approx.batch_loss_and_gradients(net, xs[idx], BinCrossEntropy(ys[idx]))
            approx.adam_step(net, grads, state)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)
    return ValueNet(net=net, tasks=list(tasks)), history


def save_value(vnet: ValueNet, provenance: str, init_provenance: str) -> bytes:
    blocks = {f"net/{k}": v for k, v in vnet.net.params.items()}
    blocks["meta/tasks"] = np.frombuffer(",".join(vnet.tasks).encode(), dtype=np.uint8).astype(np.float32)
    blocks["meta/init_provenance"] = np.frombuffer(init_provenance.encode(), dtype=np.uint8).astype(np.float32)
    return ckpt.write_blocks(blocks, provenance)


def load_value(blob: bytes) -> tuple[ValueNet, str, str]:
    blocks, provenance = ckpt.read_blocks(blob)
    params = {k[len("net/") :]: v for k, v in blocks.items() if k.startswith("net/")}
    net = approx.Network(ckpt._sizes_from_params(params), params)
    tasks = bytes(blocks["meta/tasks"].astype(np.uint8)).decode().split(",")
    init_provenance = bytes(blocks["meta/init_provenance"].astype(np.uint8)).decode()
    return ValueNet(net=net, tasks=tasks), provenance, init_provenance


# -- advantages ------------------------------------------------------------------


def advantage(
    prep: PreparedEpisode,
    values: np.ndarray,
    mode: str = "montecarlo",
    t: int = 0,
    n_ticks: int | None = None,
) -> float:
    """Advantage of transition ``t`` given per-observation values.

    montecarlo: R_hat_t - V(o_t). nstep: sum of per-tick rewards over the
    lookahead plus the bootstrapped value, falling back to the empirical
    tail when the lookahead crosses the terminal step.
    """
    if not 0 <= t < prep.n_transitions:
        raise ValueError(f"transition index {t} out of range")
    if mode == "montecarlo":
        return float(prep.norm_returns[t] - values[t])
    if mode != "nstep":
        raise ValueError(f"unknown advantage mode {mode!r}")
    if n_ticks is None or n_ticks < 1:
        raise ValueError("nstep mode needs a positive lookahead")
    target_tick = prep.ticks[t] + n_ticks
    if target_tick > prep.ticks[-1]:
        return float(prep.norm_returns[t] - values[t])
    j = int(np.searchsorted(prep.ticks, target_tick, side="left"))
    partial = prep.reward_sum(prep.ticks[t], prep.ticks[j])
    return float(partial + values[j] - values[t])


def advantage_from_net(
    prep: PreparedEpisode, critic: ValueNet, mode: str, t: int, n_ticks: int | None = None
) -> float:
    return advantage(prep, critic.values_for_episode(prep), mode, t, n_ticks)


def episode_advantages(
    prep: PreparedEpisode, critic: ValueNet, mode: str, n_ticks: int | None = None
) -> np.ndarray:
    values = critic.values_for_episode(prep)
    return np.array([advantage(prep, values, mode, t, n_ticks) for t in range(prep.n_transitions)])


# -- thresholds and indicators ------------------------------------------------------


@dataclass
class ThresholdTable:
    eps: dict[str, float] = field(default_factory=dict)
    fraction: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"eps": dict(self.eps), "fraction": dict(self.fraction)}

    @staticmethod
    def from_dict(d: dict) -> "ThresholdTable":
        return ThresholdTable(eps=dict(d["eps"]), fraction=dict(d["fraction"]))


MAX_CALIBRATION_SAMPLES = 10_000


def calibrate_threshold(
    advantages: np.ndarray,
    target_positive_fraction: float,
    rng: np.random.Generator,
    max_samples: int = MAX_CALIBRATION_SAMPLES,
) -> float:
    """Empirical (1 - fraction)-quantile so that about ``fraction`` of the
    samples lie strictly above the threshold."""
    if not 0.0 < target_positive_fraction < 1.0:
        raise ValueError("target fraction must be in (0, 1)")
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.size < 100:
        raise CalibrationError(f"need >=100 advantage samples to calibrate, got {adv.size}")
    if adv.size > max_samples:
        adv = rng.choice(adv, size=max_samples, replace=False)
    n = adv.size
    k = math.ceil((1.0 - target_positive_fraction) * n)
    eps = float(np.sort(adv)[k - 1])
    above = int((adv > eps).sum())
    if above == 0:
        logger.warning("degenerate threshold calibration: no samples strictly above eps=%g", eps)
    return eps


def indicator(advantage_value: float, eps: float, forced: bool = False, sft: bool = False) -> int:
    """+1 / -1 improvement indicator; strict inequality, with intervention
    steps and SFT-stage data always positive."""
    if forced or sft:
        return 1
    return 1 if advantage_value > eps else -1
