"""Alternative policy-extraction objectives for the comparison harness:
advantage-weighted regression and an SPO-style trust-region surrogate.

Both train the unconditioned policy heads (indicator code fixed to absent)
on the same stored data as the advantage-conditioned run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import approx
from . import policy as pol

RATIO_CLIP = 20.0  # clip on log-ratio exponents


# -- AWR --------------------------------------------------------------------


def awr_weight(advantage: float, beta_awr: float, w_max: float) -> float:
    if beta_awr <= 0:
        raise ValueError("beta_awr must be positive")
    return float(min(math.exp(advantage / beta_awr), w_max))


def awr_loss(
    pnet: pol.PolicyNet,
    x: np.ndarray,
    action: int | np.ndarray,
    advantage: float,
    beta_awr: float,
    w_max: float,
    eta: float | None = None,
    omega: np.ndarray | None = None,
) -> float:
    """Clipped-exponential advantage weight times the action NLL under the
    unconditioned heads (plus the flow term for continuous actions)."""
    w = awr_weight(advantage, beta_awr, w_max)
    if isinstance(action, (int, np.integer)):
        return w * pol.discrete_loss(pnet, x, int(action))
    chunk = np.asarray(action, dtype=np.float64)
    nll = pol.discrete_loss(pnet, x, pol.discretize_chunk(chunk))
    if eta is not None and omega is not None:
        nll += pol.flow_loss(pnet, x, chunk, eta, omega)
    return w * nll


# -- SPO --------------------------------------------------------------------


@dataclass
class RatioRecord:
    logp_current: float
    logp_ref: float
    advantage: float
    flow_current: float | None = None  # one-step Gaussian log-likelihood bound
    flow_ref: float | None = None

    @property
    def ratio_ar(self) -> float:
        return math.exp(np.clip(self.logp_current - self.logp_ref, -RATIO_CLIP, RATIO_CLIP))

    @property
    def ratio_flow(self) -> float | None:
        if self.flow_current is None or self.flow_ref is None:
            return None
        return math.exp(np.clip(self.flow_current - self.flow_ref, -RATIO_CLIP, RATIO_CLIP))


def _spo_term(ratio: float, advantage: float, eps: float) -> float:
    return ratio * advantage - abs(advantage) / (2.0 * eps) * (ratio - 1.0) ** 2


def spo_loss(records: list[RatioRecord], eps_ar: float, eps_flow: float, alpha: float = 1.0) -> float:
    """Negated SPO objective (the objective itself is maximized)."""
    if eps_ar <= 0 or eps_flow <= 0:
        raise ValueError("trust-region widths must be positive")
    total = 0.0
    for rec in records:
        total += _spo_term(rec.ratio_ar, rec.advantage, eps_ar)
        r_flow = rec.ratio_flow
        if r_flow is not None:
            total += alpha * _spo_term(r_flow, rec.advantage, eps_flow)
    return -total


# -- training --------------------------------------------------------------------


@dataclass
class BaselineExample:
    base: np.ndarray  # obs ++ task one-hot
    kind: str  # "discrete" | "continuous"
    advantage: float
    action_index: int | None = None
    chunk: np.ndarray | None = None
    bins: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "continuous" and self.bins is None and self.chunk is not None:
            self.bins = pol.discretize_chunk(self.chunk)


@dataclass
class BaselineConfig:
    net: pol.PolicyNetConfig = field(default_factory=pol.PolicyNetConfig)
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    beta_awr: float = 0.5
    w_max: float = 20.0
    eps_ar: float = 0.01
    eps_flow: float = 0.01
    alpha: float = 1.0


def _with_code_zero(examples: list[BaselineExample]) -> np.ndarray:
    bases = np.stack([ex.base for ex in examples])
    return np.concatenate([bases, np.zeros((len(examples), 1))], axis=1)


def train_awr(
    examples: list[BaselineExample],
    layout: pol.PolicyLayout,
    cfg: BaselineConfig,
    rng: np.random.Generator,
    init: pol.PolicyNet | None = None,
) -> pol.PolicyNet:
    """Weighted imitation on the unconditioned heads."""
    if not examples:
        raise ValueError("empty dataset")
    weighted = [
        pol.TrainingExample(
            base=ex.base,
            kind=ex.kind,
            indicator=1,  # unused: the code is forced to absent below
            action_index=ex.action_index,
            chunk=ex.chunk,
            bins=ex.bins,
            weight=awr_weight(ex.advantage, cfg.beta_awr, cfg.w_max),
        )
        for ex in examples
    ]
    pnet = init.copy() if init is not None else pol.init_policy(layout, cfg.net, rng)
    params = pnet.blocks()
    state = approx.init_adam(params, lr=cfg.lr)
    xs = _with_code_zero(examples)
    n = len(examples)
    flat = layout.flat_action_dim
    for _ in range(cfg.epochs):
        etas = rng.uniform(0.0, 1.0, size=n)
        omegas = rng.standard_normal((n, flat))
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            _, grads = pol.policy_loss_and_grads(
                pnet, xs[idx], [weighted[i] for i in idx], etas[idx], omegas[idx]
            )
            approx.adam_step(params, grads, state)
    return pnet


def _group_logp_and_grad(logits: np.ndarray, targets: np.ndarray, n_classes: int):
    """Per-example summed log-likelihood over groups and its logits gradient."""
    b = logits.shape[0]
    n_groups = targets.shape[1]
    shaped = logits.reshape(b, n_groups, n_classes)
    z = shaped - shaped.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    rows = np.arange(b)[:, None]
    groups = np.arange(n_groups)[None, :]
    logp = np.log(probs[rows, groups, targets]).sum(axis=1)
    grad = -probs
    grad[rows, groups, targets] += 1.0
    return logp, grad.reshape(b, n_groups * n_classes)


def spo_batch_loss_and_grads(
    pnet: pol.PolicyNet,
    ref: pol.PolicyNet,
    xs: np.ndarray,
    examples: list[BaselineExample],
    etas: np.ndarray,
    omegas: np.ndarray,
    cfg: BaselineConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    b = len(examples)
    scale = 1.0 / b
    advantages = np.array([ex.advantage for ex in examples])
    trunk_trace = approx.forward_trace(pnet.trunk, xs)
    z = trunk_trace.output
    z_ref = approx.forward(ref.trunk, xs)
    dz = np.zeros_like(z)
    grads = {f"{p}/{k}": np.zeros_like(v) for p, net in pnet.subnets().items() for k, v in net.params.items()}
    total = 0.0

    def term_and_dlogp(ratio, adv, eps):
        term = ratio * adv - np.abs(adv) / (2.0 * eps) * (ratio - 1.0) ** 2
        d_dlogp = (adv - np.abs(adv) / eps * (ratio - 1.0)) * ratio
        return term, d_dlogp

    d_rows = [i for i, ex in enumerate(examples) if ex.kind == "discrete"]
    c_rows = [i for i, ex in enumerate(examples) if ex.kind == "continuous"]

    if d_rows:
        targets = np.array([[examples[i].action_index] for i in d_rows])
        trace = approx.forward_trace(pnet.dhead, z[d_rows])
        logp, dlogits = _group_logp_and_grad(trace.output, targets, pnet.layout.n_actions)
        logp_ref, _ = _group_logp_and_grad(
            approx.forward(ref.dhead, z_ref[d_rows]), targets, pnet.layout.n_actions
        )
        ratio = np.exp(np.clip(logp - logp_ref, -RATIO_CLIP, RATIO_CLIP))
        term, d_dlogp = term_and_dlogp(ratio, advantages[d_rows], cfg.eps_ar)
        total += term.sum() * scale
        # maximize: propagate -d(term)/dlogp into the minimized loss
        d_out = dlogits * (-d_dlogp * scale)[:, None]
        g, d_in = approx.backprop(pnet.dhead, trace, d_out)
        for k, v in g.items():
            grads[f"dhead/{k}"] += v
        dz[d_rows] += d_in

    if c_rows:
        bins = np.stack([examples[i].bins.reshape(-1) for i in c_rows])
        trace = approx.forward_trace(pnet.bhead, z[c_rows])
        logp, dlogits = _group_logp_and_grad(trace.output, bins, pol.N_BINS_PER_DIM)
        logp_ref, _ = _group_logp_and_grad(
            approx.forward(ref.bhead, z_ref[c_rows]), bins, pol.N_BINS_PER_DIM
        )
        ratio = np.exp(np.clip(logp - logp_ref, -RATIO_CLIP, RATIO_CLIP))
        term, d_dlogp = term_and_dlogp(ratio, advantages[c_rows], cfg.eps_ar)
        total += term.sum() * scale
        d_out = dlogits * (-d_dlogp * scale)[:, None]
        g, d_in = approx.backprop(pnet.bhead, trace, d_out)
        for k, v in g.items():
            grads[f"bhead/{k}"] += v
        dz[c_rows] += d_in

        # flow term: one-step Gaussian bound, same (eta, omega) for both nets
        flats = np.stack([examples[i].chunk.reshape(-1) for i in c_rows])
        eta_c = etas[c_rows][:, None]
        om_c = omegas[c_rows]
        interp = eta_c * flats + (1.0 - eta_c) * om_c
        alphas = np.exp(-eta_c / 2.0)
        denoms = 1.0 - eta_c + pol.FLOW_EPS
        u = om_c - flats
        flat = pnet.layout.flat_action_dim

        f_in = np.concatenate([z[c_rows], interp, eta_c], axis=1)
        trace = approx.forward_trace(pnet.fhead, f_in)
        h, gpart = trace.output[:, :flat], trace.output[:, flat:]
        f = h + (interp - gpart) / denoms
        ll = -(alphas * (u - f) ** 2).sum(axis=1)

        f_in_ref = np.concatenate([z_ref[c_rows], interp, eta_c], axis=1)
        out_ref = approx.forward(ref.fhead, f_in_ref)
        f_ref = out_ref[:, :flat] + (interp - out_ref[:, flat:]) / denoms
        ll_ref = -(alphas * (u - f_ref) ** 2).sum(axis=1)

        ratio_f = np.exp(np.clip(ll - ll_ref, -RATIO_CLIP, RATIO_CLIP))
        term_f, d_dll = term_and_dlogp(ratio_f, advantages[c_rows], cfg.eps_flow)
        total += cfg.alpha * term_f.sum() * scale
        d_ll = -cfg.alpha * d_dll * scale  # d(minimized loss)/d ll
        d_f = d_ll[:, None] * (2.0 * alphas * (u - f))
        d_out = np.concatenate([d_f, -d_f / denoms], axis=1)
        g, d_in = approx.backprop(pnet.fhead, trace, d_out)
        for k, v in g.items():
            grads[f"fhead/{k}"] += v
        dz[c_rows] += d_in[:, : z.shape[1]]

    g, _ = approx.backprop(pnet.trunk, trunk_trace, dz)
    for k, v in g.items():
        grads[f"trunk/{k}"] += v
    return -float(total), grads


def train_spo(
    examples: list[BaselineExample],
    layout: pol.PolicyLayout,
    cfg: BaselineConfig,
    rng: np.random.Generator,
    init: pol.PolicyNet | None = None,
) -> pol.PolicyNet:
    """SPO-constrained updates; the reference policy snapshots the pre-update
    policy at every epoch boundary."""
    if not examples:
        raise ValueError("empty dataset")
    pnet = init.copy() if init is not None else pol.init_policy(layout, cfg.net, rng)
    params = pnet.blocks()
    state = approx.init_adam(params, lr=cfg.lr)
    xs = _with_code_zero(examples)
    n = len(examples)
    flat = layout.flat_action_dim
    for _ in range(cfg.epochs):
        ref = pnet.copy()
        etas = rng.uniform(0.0, 1.0, size=n)
        omegas = rng.standard_normal((n, flat))
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            _, grads = spo_batch_loss_and_grads(
                pnet, ref, xs[idx], [examples[i] for i in idx], etas[idx], omegas[idx], cfg
            )
            approx.adam_step(params, grads, state)
    return pnet


def train_baseline(
    examples: list[BaselineExample],
    layout: pol.PolicyLayout,
    method: str,
    cfg: BaselineConfig,
    rng: np.random.Generator,
    init: pol.PolicyNet | None = None,
) -> pol.PolicyNet:
    if method == "awr":
        return train_awr(examples, layout, cfg, rng, init)
    if method == "spo":
        return train_spo(examples, layout, cfg, rng, init)
    raise ValueError(f"unknown baseline method {method!r}; expected 'awr' or 'spo'")
