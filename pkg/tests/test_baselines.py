import numpy as np
import pytest

from recap import baselines as bl
from recap import policy as pol
from recap.value import softmax

from oracles import assert_grads_close, finite_difference_grads

BASE = np.array([0.5, 1.0])


def toy_layout(chunk_h=1, action_dim=1):
    return pol.PolicyLayout(obs_dim=1, tasks=["toy"], n_actions=2, chunk_h=chunk_h, action_dim=action_dim)


def small_cfg(**kw):
    net = pol.PolicyNetConfig(trunk_hidden=(16,), trunk_out=16, dhead_hidden=(16,),
                              bhead_hidden=(16,), fhead_hidden=(32,))
    return bl.BaselineConfig(net=net, **kw)


# -- AWR weights -------------------------------------------------------------


def test_awr_weight_is_one_at_zero_advantage():
    assert bl.awr_weight(0.0, 0.5, 20.0) == 1.0


def test_awr_weight_clips_at_w_max():
    beta, w_max = 0.5, 20.0
    a = beta * np.log(w_max) + 1.0
    assert bl.awr_weight(a, beta, w_max) == w_max


def test_awr_weights_bounded():
    rng = np.random.default_rng(0)
    for a in rng.normal(0, 3, size=200):
        w = bl.awr_weight(float(a), 0.5, 20.0)
        assert 0.0 < w <= 20.0


def test_awr_loss_is_weighted_nll():
    layout = toy_layout()
    pnet = pol.init_policy(layout, pol.PolicyNetConfig(), np.random.default_rng(0))
    x = np.concatenate([BASE, [0.0]])
    nll = pol.discrete_loss(pnet, x, 1)
    loss = bl.awr_loss(pnet, x, 1, advantage=0.5, beta_awr=0.5, w_max=20.0)
    assert loss == pytest.approx(np.exp(1.0) * nll)


# -- AWR training: tabular bandit fixed point -----------------------------------


def test_awr_bandit_recovers_closed_form_fixed_point():
    layout = toy_layout()
    examples = [
        bl.BaselineExample(base=BASE.copy(), kind="discrete", advantage=1.0 if i % 2 == 0 else -1.0,
                           action_index=0 if i % 2 == 0 else 1)
        for i in range(400)
    ]
    cfg = small_cfg(epochs=300, batch_size=400, lr=1e-3, beta_awr=0.5, w_max=20.0)
    pnet = bl.train_awr(examples, layout, cfg, np.random.default_rng(0))
    probs = softmax(pnet.discrete_logits(np.concatenate([BASE, [0.0]])))
    target = np.exp(2) / (np.exp(2) + np.exp(-2))
    assert probs[0] >= target - 0.05


# -- SPO loss ---------------------------------------------------------------------


def _record(ratio, advantage, flow_ratio=None):
    rec = bl.RatioRecord(logp_current=np.log(ratio), logp_ref=0.0, advantage=advantage)
    if flow_ratio is not None:
        rec.flow_current = np.log(flow_ratio)
        rec.flow_ref = 0.0
    return rec


def test_spo_objective_reduces_to_advantage_sum_at_unit_ratio():
    records = [_record(1.0, a, flow_ratio=1.0) for a in (-0.5, 0.25, 1.5)]
    loss = bl.spo_loss(records, eps_ar=0.01, eps_flow=0.01, alpha=1.0)
    assert -loss == pytest.approx(2 * (-0.5 + 0.25 + 1.5))  # ar + flow terms


def test_spo_penalty_zero_at_unit_ratio_positive_otherwise():
    for a in (-1.0, 0.5):
        base = -bl.spo_loss([_record(1.0, a)], 0.01, 0.01)
        for rho in (0.95, 1.05, 1.2):
            shifted = -bl.spo_loss([_record(rho, a)], 0.01, 0.01)
            penalty = rho * a - shifted
            assert penalty > 0.0
        assert base == pytest.approx(a)


@pytest.mark.parametrize("advantage", [2.0, -1.5, 0.7])
@pytest.mark.parametrize("eps", [0.01, 0.05])
def test_spo_maximizing_ratio_is_one_plus_eps_sign_a(advantage, eps):
    # numeric 1-D optimization over the ratio, per record
    rhos = np.linspace(0.5, 1.5, 200001)
    values = rhos * advantage - abs(advantage) / (2 * eps) * (rhos - 1.0) ** 2
    best = rhos[np.argmax(values)]
    assert best == pytest.approx(1.0 + eps * np.sign(advantage), abs=1e-4)


def test_spo_loss_rejects_nonpositive_trust_region():
    with pytest.raises(ValueError, match="trust-region"):
        bl.spo_loss([], eps_ar=0.0, eps_flow=0.01)


# -- SPO gradients -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_spo_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layout = pol.PolicyLayout(obs_dim=2, tasks=["a"], n_actions=3, chunk_h=2, action_dim=1)
    cfg = small_cfg(eps_ar=0.05, eps_flow=0.05)
    net_cfg = pol.PolicyNetConfig(trunk_hidden=(5,), trunk_out=4, dhead_hidden=(4,),
                                  bhead_hidden=(4,), fhead_hidden=(5,))
    pnet = pol.init_policy(layout, net_cfg, rng)
    ref = pol.init_policy(layout, net_cfg, np.random.default_rng(seed + 100))
    examples = []
    for i in range(5):
        base = rng.normal(size=3)
        if i % 2 == 0:
            examples.append(bl.BaselineExample(base=base, kind="discrete",
                                               advantage=float(rng.normal()),
                                               action_index=int(rng.integers(3))))
        else:
            examples.append(bl.BaselineExample(base=base, kind="continuous",
                                               advantage=float(rng.normal()),
                                               chunk=rng.uniform(-1, 1, size=(2, 1))))
    xs = np.concatenate([np.stack([e.base for e in examples]), np.zeros((5, 1))], axis=1)
    etas = rng.uniform(0, 1, size=5)
    omegas = rng.standard_normal((5, layout.flat_action_dim))

    def loss_fn():
        return bl.spo_batch_loss_and_grads(pnet, ref, xs, examples, etas, omegas, cfg)[0]

    _, analytic = bl.spo_batch_loss_and_grads(pnet, ref, xs, examples, etas, omegas, cfg)
    numeric = finite_difference_grads(pnet.blocks(), loss_fn)
    assert_grads_close(analytic, numeric, rel_tol=1e-4)


# -- SPO training -----------------------------------------------------------------


def test_spo_vanishing_trust_region_pins_the_policy():
    layout = toy_layout()
    examples = [
        bl.BaselineExample(base=BASE.copy(), kind="discrete", advantage=1.0 if i % 2 == 0 else -1.0,
                           action_index=0 if i % 2 == 0 else 1)
        for i in range(200)
    ]
    cfg = small_cfg(epochs=20, batch_size=64, lr=1e-3, eps_ar=1e-4, eps_flow=1e-4)
    init = pol.init_policy(layout, cfg.net, np.random.default_rng(5))
    before = softmax(init.discrete_logits(np.concatenate([BASE, [0.0]])))
    pnet = bl.train_spo(examples, layout, cfg, np.random.default_rng(0), init=init)
    after = softmax(pnet.discrete_logits(np.concatenate([BASE, [0.0]])))
    assert 0.5 * np.abs(after - before).sum() <= 0.05


def test_spo_with_room_moves_toward_positive_advantage():
    layout = toy_layout()
    examples = [
        bl.BaselineExample(base=BASE.copy(), kind="discrete", advantage=1.0 if i % 2 == 0 else -1.0,
                           action_index=0 if i % 2 == 0 else 1)
        for i in range(200)
    ]
    cfg = small_cfg(epochs=60, batch_size=64, lr=1e-3, eps_ar=0.05, eps_flow=0.05)
    init = pol.init_policy(layout, cfg.net, np.random.default_rng(5))
    before = softmax(init.discrete_logits(np.concatenate([BASE, [0.0]])))[0]
    pnet = bl.train_spo(examples, layout, cfg, np.random.default_rng(0), init=init)
    after = softmax(pnet.discrete_logits(np.concatenate([BASE, [0.0]])))[0]
    assert after > before + 0.05


def test_train_baseline_rejects_unknown_method():
    with pytest.raises(ValueError, match="unknown baseline"):
        bl.train_baseline([], toy_layout(), "dpo", small_cfg(), np.random.default_rng(0))
