"""Adaptive-moment optimizer over named parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Network


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        # Hyperparameters are quantized to float32 so checkpoints round-trip
        # exactly (block payloads are 32-bit).
        self.lr = float(np.float32(self.lr))
        self.beta1 = float(np.float32(self.beta1))
        self.beta2 = float(np.float32(self.beta2))
        self.eps = float(np.float32(self.eps))


def init_adam(
    params: dict[str, np.ndarray] | Network,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    if isinstance(params, Network):
        params = params.params
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = {k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()}
    state.v = {k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()}
    return state


def adam_step(
    params: dict[str, np.ndarray] | Network,
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray] | Network, AdamState]:
    """One bias-corrected update. Mutates ``params`` and ``state`` in place
    (single-writer training) and returns them for call-site chaining."""
    target = params.params if isinstance(params, Network) else params
    if set(grads) - set(target):
        raise ValueError(f"gradient blocks {sorted(set(grads) - set(target))} not in parameters")
    for k, g in grads.items():
        if g.shape != target[k].shape:
            raise ValueError(f"block '{k}': gradient shape {g.shape} != parameter shape {target[k].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, g in grads.items():
        g64 = np.asarray(g, dtype=np.float64)
        m = state.m[k].astype(np.float64) * b1 + (1.0 - b1) * g64
        v = state.v[k].astype(np.float64) * b2 + (1.0 - b2) * g64**2
        state.m[k] = m.astype(np.float32)
        state.v[k] = v.astype(np.float32)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        target[k][...] = (target[k].astype(np.float64) - update).astype(np.float32)
    return params, state
