"""Small feedforward networks with explicit reverse-mode gradients.

Parameters are stored float32; all matrix products and reductions run in
float64 so that gradient checks against central finite differences are clean
and results are reproducible across runs on the same platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np


class NumericFailure(RuntimeError):
    """A non-finite value appeared during a loss/gradient computation."""

    def __init__(self, block: str, message: str = ""):
        self.block = block
        super().__init__(message or f"non-finite values in block '{block}'")


class OutputLoss(Protocol):
    """A loss defined on the network's output vectors.

    Implementations live next to the training code that owns them (value,
    policy, baselines); the network layer only needs the loss value and its
    gradient with respect to the outputs.
    """

    def value_and_grad(self, outputs: np.ndarray) -> tuple[float, np.ndarray]:
        """outputs: (B, out) float64 -> (total loss, dloss/doutputs (B, out))."""
        ...


@dataclass
class Network:
    """A plain MLP: tanh hidden layers, linear output layer."""

    sizes: tuple[int, ...]
    params: dict[str, np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "Network":
        return Network(self.sizes, {k: v.copy() for k, v in self.params.items()})


def init_network(sizes: list[int] | tuple[int, ...], rng: np.random.Generator) -> Network:
    """Uniform init scaled by 1/sqrt(fan_in), seeded via ``rng``."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"need at least two positive layer sizes, got {sizes}")
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        params[f"b{i}"] = np.zeros(fan_out, dtype=np.float32)
    return Network(sizes, params)


def param_count(net: Network) -> int:
    return sum(int(p.size) for p in net.params.values())


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single vector or a (B, in) batch."""
    h, single = _as_batch(x)
    if h.shape[1] != net.sizes[0]:
        raise ValueError(f"input has {h.shape[1]} features, network expects {net.sizes[0]}")
    n = net.n_layers
    for i in range(n):
        h = h @ net.params[f"W{i}"].astype(np.float64) + net.params[f"b{i}"].astype(np.float64)
        if i < n - 1:
            h = np.tanh(h)
    return h[0] if single else h


@dataclass
class ForwardTrace:
    """Layer activations kept around for backprop. ``acts[i]`` is the input
    to layer i; ``acts[-1]`` is the network output."""

    acts: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def forward_trace(net: Network, x: np.ndarray) -> ForwardTrace:
    h, _ = _as_batch(x)
    if h.shape[1] != net.sizes[0]:
        raise ValueError(f"input has {h.shape[1]} features, network expects {net.sizes[0]}")
    acts = [h]
    n = net.n_layers
    for i in range(n):
        h = h @ net.params[f"W{i}"].astype(np.float64) + net.params[f"b{i}"].astype(np.float64)
        if i < n - 1:
            h = np.tanh(h)
        acts.append(h)
    return ForwardTrace(acts)


def backprop(
    net: Network, trace: ForwardTrace, d_out: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Propagate dloss/doutput back through the trace.

    Returns (gradient blocks shaped like the parameters, dloss/dinput).
    """
    n = net.n_layers
    delta = np.asarray(d_out, dtype=np.float64)
    if delta.ndim == 1:
        delta = delta[None, :]
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(n)):
        a_in = trace.acts[i]
        if i < n - 1:
            # acts[i+1] stores tanh(pre); d pre = d act * (1 - tanh^2)
            delta = delta * (1.0 - trace.acts[i + 1] ** 2)
        grads[f"W{i}"] = a_in.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        delta = delta @ net.params[f"W{i}"].astype(np.float64).T
    return grads, delta


def batch_loss_and_gradients(
    net: Network, inputs: np.ndarray, loss: OutputLoss
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one batch under one loss head."""
    trace = forward_trace(net, inputs)
    value, d_out = loss.value_and_grad(trace.output)
    if not np.isfinite(value):
        raise NumericFailure("loss", f"loss is {value!r}")
    grads, _ = backprop(net, trace, d_out)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(name)
    return float(value), grads


def loss_and_gradients(
    net: Network, batch: list[tuple[np.ndarray, OutputLoss]]
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed loss and gradients over (input, loss-spec) pairs.

    The generic per-example surface; training loops use
    :func:`batch_loss_and_gradients` with vectorized loss heads.
    """
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc: dict[str, np.ndarray] | None = None
    for x, spec in batch:
        value, grads = batch_loss_and_gradients(net, np.asarray(x, dtype=np.float64)[None, :], spec)
        total += value
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] += grads[k]
    assert acc is not None
    return total, acc
