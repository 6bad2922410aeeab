"""Advantage-conditioned policy with a flow-matching continuous head and
discretized-action heads.

The policy input is observation features, a task one-hot, and a numeric
improvement-indicator code (+1 positive, -1 negative, 0 absent). A shared
trunk feeds three heads: a categorical head for native discrete actions, a
per-dimension binned head for continuous chunks (trained as an auxiliary
likelihood), and a velocity-field head trained with flow matching. The
discrete heads never feed the continuous head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import approx
from .approx import checkpoint as ckpt

N_BINS_PER_DIM = 15
INDICATOR_CODES = (1, -1, 0)

# The velocity head emits two blocks [h, g] combined as
#   f = h + (interpolant - g) / (1 - eta + FLOW_EPS).
# The g block carries the late-time contraction toward the data action (a
# bounded, smooth regression target), while h covers the early-time field; a
# small MLP fits this far better than the raw late-time velocity. Training
# loss and sampler still see the plain field f.
FLOW_EPS = 0.05


def flow_weight(eta: float) -> float:
    return float(np.exp(-np.asarray(eta) / 2.0))


def discretize_chunk(chunk: np.ndarray) -> np.ndarray:
    """Uniform 15-bin discretization of commands in [-1, 1], per dimension."""
    arr = np.asarray(chunk, dtype=np.float64)
    bins = np.floor((arr + 1.0) / 2.0 * N_BINS_PER_DIM).astype(np.int64)
    return np.clip(bins, 0, N_BINS_PER_DIM - 1)


def undiscretize_bins(bins: np.ndarray) -> np.ndarray:
    return -1.0 + (np.asarray(bins, dtype=np.float64) + 0.5) * (2.0 / N_BINS_PER_DIM)


@dataclass
class FlowSample:
    """Interpolant between noise and a data action at flow time eta."""

    eta: float
    omega: np.ndarray
    action: np.ndarray

    @property
    def interpolant(self) -> np.ndarray:
        return self.eta * self.action + (1.0 - self.eta) * self.omega


@dataclass
class PolicyLayout:
    obs_dim: int
    tasks: list[str]
    n_actions: int  # discrete-head cardinality
    chunk_h: int
    action_dim: int  # per-command dimension of continuous chunks

    @property
    def input_dim(self) -> int:
        return self.obs_dim + len(self.tasks) + 1  # + indicator code

    @property
    def flat_action_dim(self) -> int:
        return self.chunk_h * self.action_dim

    def to_meta(self) -> dict[str, np.ndarray]:
        return {
            "meta/layout": np.array(
                [self.obs_dim, len(self.tasks), self.n_actions, self.chunk_h, self.action_dim],
                dtype=np.float32,
            ),
            "meta/tasks": np.frombuffer(",".join(self.tasks).encode(), dtype=np.uint8).astype(np.float32),
        }

    @staticmethod
    def from_meta(blocks: dict[str, np.ndarray]) -> "PolicyLayout":
        obs_dim, _, n_actions, chunk_h, action_dim = (int(x) for x in blocks["meta/layout"])
        tasks = bytes(blocks["meta/tasks"].astype(np.uint8)).decode().split(",")
        return PolicyLayout(obs_dim, tasks, n_actions, chunk_h, action_dim)


@dataclass
class PolicyNetConfig:
    trunk_hidden: tuple = (64,)
    trunk_out: int = 64
    dhead_hidden: tuple = (32,)
    bhead_hidden: tuple = (64,)
    fhead_hidden: tuple = (64, 64)


@dataclass
class PolicyNet:
    layout: PolicyLayout
    trunk: approx.Network
    dhead: approx.Network
    bhead: approx.Network
    fhead: approx.Network

    def blocks(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net in self.subnets().items():
            for k, v in net.params.items():
                out[f"{prefix}/{k}"] = v
        return out

    def subnets(self) -> dict[str, approx.Network]:
        return {"trunk": self.trunk, "dhead": self.dhead, "bhead": self.bhead, "fhead": self.fhead}

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.layout, self.trunk.copy(), self.dhead.copy(), self.bhead.copy(), self.fhead.copy())

    # -- inference ----------------------------------------------------------

    def trunk_features(self, x: np.ndarray) -> np.ndarray:
        return approx.forward(self.trunk, x)

    def discrete_logits(self, x: np.ndarray) -> np.ndarray:
        return approx.forward(self.dhead, self.trunk_features(x))

    def bin_logits(self, x: np.ndarray) -> np.ndarray:
        return approx.forward(self.bhead, self.trunk_features(x))

    def velocity(self, z: np.ndarray, interp: np.ndarray, eta: float) -> np.ndarray:
        """The learned field f on (trunk features ++ interpolant ++ eta)."""
        out = approx.forward(self.fhead, np.concatenate([z, interp, [eta]]))
        flat = self.layout.flat_action_dim
        return out[:flat] + (interp - out[flat:]) / (1.0 - eta + FLOW_EPS)


def init_policy(layout: PolicyLayout, cfg: PolicyNetConfig, rng: np.random.Generator) -> PolicyNet:
    trunk = approx.init_network([layout.input_dim, *cfg.trunk_hidden, cfg.trunk_out], rng)
    dhead = approx.init_network([cfg.trunk_out, *cfg.dhead_hidden, layout.n_actions], rng)
    bhead = approx.init_network(
        [cfg.trunk_out, *cfg.bhead_hidden, layout.flat_action_dim * N_BINS_PER_DIM], rng
    )
    fhead = approx.init_network(
        [cfg.trunk_out + layout.flat_action_dim + 1, *cfg.fhead_hidden, 2 * layout.flat_action_dim],
        rng,
    )
    return PolicyNet(layout, trunk, dhead, bhead, fhead)


# -- serialization -----------------------------------------------------------


def save_policy(pnet: PolicyNet, provenance: str, init_provenance: str) -> bytes:
    blocks = pnet.blocks()
    blocks.update(pnet.layout.to_meta())
    blocks["meta/init_provenance"] = np.frombuffer(init_provenance.encode(), dtype=np.uint8).astype(
        np.float32
    )
    return ckpt.write_blocks(blocks, provenance)


def _subnet_params(blocks: dict[str, np.ndarray], prefix: str) -> approx.Network:
    params = {k[len(prefix) + 1 :]: v for k, v in blocks.items() if k.startswith(prefix + "/")}
    return approx.Network(ckpt._sizes_from_params(params), params)


def load_policy(blob: bytes) -> tuple[PolicyNet, str, str]:
    blocks, provenance = ckpt.read_blocks(blob)
    layout = PolicyLayout.from_meta(blocks)
    pnet = PolicyNet(
        layout,
        _subnet_params(blocks, "trunk"),
        _subnet_params(blocks, "dhead"),
        _subnet_params(blocks, "bhead"),
        _subnet_params(blocks, "fhead"),
    )
    init_provenance = bytes(blocks["meta/init_provenance"].astype(np.uint8)).decode()
    return pnet, provenance, init_provenance


# -- losses -------------------------------------------------------------------


@dataclass
class TrainingExample:
    base: np.ndarray  # obs ++ task one-hot (indicator appended at train time)
    kind: str  # "discrete" | "continuous"
    indicator: int  # +1 | -1 (computed or forced)
    forced: bool = False
    action_index: int | None = None
    chunk: np.ndarray | None = None  # (H, d)
    bins: np.ndarray | None = None  # (H, d) ints
    weight: float = 1.0

    def __post_init__(self):
        if self.kind == "continuous" and self.bins is None and self.chunk is not None:
            self.bins = discretize_chunk(self.chunk)


class _GroupedCrossEntropy:
    """Cross-entropy summed over (position, dimension) groups per example."""

    def __init__(self, targets: np.ndarray, n_groups: int, n_classes: int, weights: np.ndarray):
        self.targets = targets.reshape(len(targets), n_groups)
        self.n_groups = n_groups
        self.n_classes = n_classes
        self.weights = weights

    def value_and_grad(self, outputs: np.ndarray) -> tuple[float, np.ndarray]:
        b = outputs.shape[0]
        logits = outputs.reshape(b, self.n_groups, self.n_classes)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=-1, keepdims=True)
        rows = np.arange(b)[:, None]
        groups = np.arange(self.n_groups)[None, :]
        logp = np.log(probs[rows, groups, self.targets])
        loss = float(-(self.weights * logp.sum(axis=1)).sum())
        grad = probs
        grad[rows, groups, self.targets] -= 1.0
        grad *= self.weights[:, None, None]
        return loss, grad.reshape(b, self.n_groups * self.n_classes)


class _FlowMatchLoss:
    """alpha_eta * ||omega - action - f||^2 with f = h + (interp - g) / denom,
    expressed as a loss on the stacked head output [h, g]."""

    def __init__(self, targets: np.ndarray, alphas: np.ndarray, weights: np.ndarray,
                 interps: np.ndarray, denoms: np.ndarray):
        self.targets = targets  # omega - action, (B, flat)
        self.alphas = alphas
        self.weights = weights
        self.interps = interps
        self.denoms = denoms  # (B, 1)

    def value_and_grad(self, outputs: np.ndarray) -> tuple[float, np.ndarray]:
        flat = self.targets.shape[1]
        h, g = outputs[:, :flat], outputs[:, flat:]
        f = h + (self.interps - g) / self.denoms
        diff = self.targets - f
        per_example = (diff**2).sum(axis=1) * self.alphas
        loss = float((self.weights * per_example).sum())
        d_f = -2.0 * diff * (self.alphas * self.weights)[:, None]
        return loss, np.concatenate([d_f, -d_f / self.denoms], axis=1)


def discrete_loss(pnet: PolicyNet, x: np.ndarray, action: int | np.ndarray) -> float:
    """Categorical NLL of the action under the matching discrete head."""
    if isinstance(action, (int, np.integer)):
        logits = pnet.discrete_logits(x)
        spec = _GroupedCrossEntropy(
            np.array([[action]]), 1, pnet.layout.n_actions, np.ones(1)
        )
        return spec.value_and_grad(logits[None, :])[0]
    bins = np.asarray(action, dtype=np.int64).reshape(1, -1)
    logits = pnet.bin_logits(x)
    spec = _GroupedCrossEntropy(bins, pnet.layout.flat_action_dim, N_BINS_PER_DIM, np.ones(1))
    return spec.value_and_grad(logits[None, :])[0]


def flow_loss(pnet: PolicyNet, x: np.ndarray, chunk: np.ndarray, eta: float, omega: np.ndarray) -> float:
    """Weighted squared error between the head output and omega - action."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("flow time must lie in [0, 1]")
    flat = np.asarray(chunk, dtype=np.float64).reshape(-1)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    interp = eta * flat + (1.0 - eta) * omega
    z = pnet.trunk_features(x)
    f = pnet.velocity(z, interp, eta)
    return flow_weight(eta) * float(((omega - flat - f) ** 2).sum())


# -- combined loss and gradients ------------------------------------------------


def policy_loss_and_grads(
    pnet: PolicyNet,
    xs: np.ndarray,
    examples: list[TrainingExample],
    etas: np.ndarray,
    omegas: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean combined loss (Eq.-style: discrete NLL + flow term) and gradients
    for all parameter blocks. eta/omega rows are consumed by continuous
    examples only."""
    b = len(examples)
    trunk_trace = approx.forward_trace(pnet.trunk, xs)
    z = trunk_trace.output
    dz = np.zeros_like(z)
    grads: dict[str, np.ndarray] = {
        f"{prefix}/{k}": np.zeros_like(v)
        for prefix, net in pnet.subnets().items()
        for k, v in net.params.items()
    }
    total = 0.0
    d_rows = [i for i, ex in enumerate(examples) if ex.kind == "discrete"]
    c_rows = [i for i, ex in enumerate(examples) if ex.kind == "continuous"]
    scale = 1.0 / b

    if d_rows:
        weights = np.array([examples[i].weight for i in d_rows]) * scale
        targets = np.array([[examples[i].action_index] for i in d_rows])
        trace = approx.forward_trace(pnet.dhead, z[d_rows])
        spec = _GroupedCrossEntropy(targets, 1, pnet.layout.n_actions, weights)
        loss, d_out = spec.value_and_grad(trace.output)
        g, d_in = approx.backprop(pnet.dhead, trace, d_out)
        total += loss
        for k, v in g.items():
            grads[f"dhead/{k}"] += v
        dz[d_rows] += d_in

    if c_rows:
        weights = np.array([examples[i].weight for i in c_rows]) * scale
        bins = np.stack([examples[i].bins.reshape(-1) for i in c_rows])
        trace = approx.forward_trace(pnet.bhead, z[c_rows])
        spec = _GroupedCrossEntropy(bins, pnet.layout.flat_action_dim, N_BINS_PER_DIM, weights)
        loss, d_out = spec.value_and_grad(trace.output)
        g, d_in = approx.backprop(pnet.bhead, trace, d_out)
        total += loss
        for k, v in g.items():
            grads[f"bhead/{k}"] += v
        dz[c_rows] += d_in

        flats = np.stack([examples[i].chunk.reshape(-1) for i in c_rows])
        eta_c = etas[c_rows]
        om_c = omegas[c_rows]
        interp = eta_c[:, None] * flats + (1.0 - eta_c[:, None]) * om_c
        f_in = np.concatenate([z[c_rows], interp, eta_c[:, None]], axis=1)
        trace = approx.forward_trace(pnet.fhead, f_in)
        denoms = 1.0 - eta_c[:, None] + FLOW_EPS
        spec = _FlowMatchLoss(om_c - flats, np.exp(-eta_c / 2.0), weights, interp, denoms)
        loss, d_out = spec.value_and_grad(trace.output)
        g, d_in = approx.backprop(pnet.fhead, trace, d_out)
        total += loss
        for k, v in g.items():
            grads[f"fhead/{k}"] += v
        dz[c_rows] += d_in[:, : z.shape[1]]  # interpolant/eta inputs carry no parameters

    g, _ = approx.backprop(pnet.trunk, trunk_trace, dz)
    for k, v in g.items():
        grads[f"trunk/{k}"] += v
    return total, grads


# -- training --------------------------------------------------------------------


@dataclass
class PolicyTrainConfig:
    net: PolicyNetConfig = field(default_factory=PolicyNetConfig)
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    indicator_dropout: float = 0.3
    euler_steps: int = 10


@dataclass
class PolicyTrainStats:
    loss_history: list[float]
    absent_fraction: list[float]  # realized dropout fraction per epoch


def train_policy(
    examples: list[TrainingExample],
    layout: PolicyLayout,
    cfg: PolicyTrainConfig,
    rng: np.random.Generator,
    init: PolicyNet | None = None,
) -> tuple[PolicyNet, PolicyTrainStats]:
    if not examples:
        raise ValueError("empty dataset")
    for ex in examples:
        if ex.indicator not in (1, -1):
            raise ValueError("every training example needs a computed or forced indicator")
    pnet = init.copy() if init is not None else init_policy(layout, cfg.net, rng)
    params = pnet.blocks()
    state = approx.init_adam(params, lr=cfg.lr)
    n = len(examples)
    flat_dim = layout.flat_action_dim
    bases = np.stack([ex.base for ex in examples])
    stats = PolicyTrainStats(loss_history=[], absent_fraction=[])
    for _ in range(cfg.epochs):
        dropout = rng.random(n) < cfg.indicator_dropout
        codes = np.where(dropout, 0.0, np.array([float(ex.indicator) for ex in examples]))
        xs = np.concatenate([bases, codes[:, None]], axis=1)
        etas = rng.uniform(0.0, 1.0, size=n)
        omegas = rng.standard_normal((n, flat_dim))
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss, grads = policy_loss_and_grads(
                pnet, xs[idx], [examples[i] for i in idx], etas[idx], omegas[idx]
            )
            approx.adam_step(params, grads, state)
            epoch_loss += loss
            n_batches += 1
        stats.loss_history.append(epoch_loss / n_batches)
        stats.absent_fraction.append(float(dropout.mean()))
    return pnet, stats


# -- sampling --------------------------------------------------------------------


def _check_code(code: float) -> float:
    if code not in INDICATOR_CODES:
        raise ValueError(f"indicator code must be one of {INDICATOR_CODES}, got {code}")
    return float(code)


def sample_discrete(pnet: PolicyNet, base: np.ndarray, indicator_code: int, rng: np.random.Generator) -> int:
    x = np.concatenate([base, [_check_code(indicator_code)]])
    probs = _softmax(pnet.discrete_logits(x))
    return int(rng.choice(len(probs), p=probs))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def sample_actions(
    pnet: PolicyNet,
    base: np.ndarray,
    indicator_code: int,
    k_steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Euler integration of da/deta = -f from a~N(0,I) at eta=0 to eta=1."""
    x = np.concatenate([base, [_check_code(indicator_code)]])
    z = pnet.trunk_features(x)
    a = rng.standard_normal(pnet.layout.flat_action_dim)
    step = 1.0 / k_steps
    for i in range(k_steps):
        eta = i * step
        a = a - step * pnet.velocity(z, a, eta)
    chunk = a.reshape(pnet.layout.chunk_h, pnet.layout.action_dim)
    return np.clip(chunk, -1.0, 1.0)


def sample_actions_cfg(
    pnet: PolicyNet,
    base: np.ndarray,
    beta: float,
    k_steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Classifier-free-guided sampling: v = v_uncond + beta (v_cond - v_uncond).

    beta = 1 reproduces conditional sampling bit-exactly under the same seed.
    """
    if beta < 1.0:
        raise ValueError("guidance weight must be >= 1")
    if beta == 1.0:
        return sample_actions(pnet, base, 1, k_steps, rng)
    z_cond = pnet.trunk_features(np.concatenate([base, [1.0]]))
    z_uncond = pnet.trunk_features(np.concatenate([base, [0.0]]))
    a = rng.standard_normal(pnet.layout.flat_action_dim)
    step = 1.0 / k_steps
    for i in range(k_steps):
        eta = i * step
        v_cond = -pnet.velocity(z_cond, a, eta)
        v_uncond = -pnet.velocity(z_uncond, a, eta)
        a = a + step * (v_uncond + beta * (v_cond - v_uncond))
    chunk = a.reshape(pnet.layout.chunk_h, pnet.layout.action_dim)
    return np.clip(chunk, -1.0, 1.0)
