import logging

import numpy as np
import pytest

from recap import approx
from recap import value as val
from recap.data import prepare_episode
from recap.envs import GridFold
from recap.returns import discretize

from oracles import assert_grads_close, finite_difference_grads
from synth import make_episode

# The GridFold policy-evaluation check (expected values within 0.05 of exact
# tabular evaluation on >=90% of visited states) is acceptance criterion 1 and
# lives in test_acceptance.py.


# -- expected_value ---------------------------------------------------------------


def test_expected_value_one_hot_top_bin():
    dist = np.zeros(201)
    dist[200] = 1.0
    assert val.expected_value(dist) == 0.0


def test_expected_value_uniform_is_middle():
    assert val.expected_value(np.full(201, 1 / 201)) == pytest.approx(-0.5)


def test_expected_value_weighted_mean():
    dist = np.zeros(201)
    dist[0] = 0.25
    dist[200] = 0.75
    assert val.expected_value(dist) == pytest.approx(-0.25)


def test_expected_value_rejects_non_simplex():
    with pytest.raises(ValueError, match="simplex"):
        val.expected_value(np.full(201, 0.9 / 201))
    bad = np.zeros(201)
    bad[0], bad[1] = 1.5, -0.5
    with pytest.raises(ValueError, match="simplex"):
        val.expected_value(bad)


# -- loss kind --------------------------------------------------------------------


def test_cross_entropy_uniform_201_way_is_log_201():
    net = approx.init_network([3, 201], np.random.default_rng(0))
    for k in net.params:
        net.params[k][...] = 0.0  # uniform logits
    loss, _ = approx.loss_and_gradients(net, [(np.ones(3), val.BinCrossEntropy(7))])
    assert loss == pytest.approx(np.log(201), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = approx.init_network([4, 8, 9], rng)
    xs = rng.normal(size=(6, 4))
    targets = rng.integers(9, size=6)
    loss = val.BinCrossEntropy(targets)

    def loss_fn():
        return approx.batch_loss_and_gradients(net, xs, loss)[0]

    _, analytic = approx.batch_loss_and_gradients(net, xs, loss)
    assert_grads_close(analytic, finite_difference_grads(net.params, loss_fn), rel_tol=1e-4)


def test_distributions_are_simplex_valued():
    rng = np.random.default_rng(3)
    for _ in range(10):
        critic = val.ValueNet(approx.init_network([10 + 2, 16, 201], rng), ["a", "b"])
        obs = rng.normal(size=10)
        dist = critic.distribution(obs, "a")
        assert abs(dist.sum() - 1.0) < 1e-6
        assert np.all(dist >= 0)
        assert -1.0 <= critic.value(obs, "a") <= 0.0


# -- training ---------------------------------------------------------------------


def test_train_value_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        val.train_value([], ["toy"], val.ValueTrainConfig(), np.random.default_rng(0))


def _distinct_obs(rng, n, dim=6):
    return [rng.uniform(-1, 1, size=dim) for _ in range(n)]


def test_train_value_memorizes_single_deterministic_episode():
    rng = np.random.default_rng(0)
    ep = make_episode(_distinct_obs(rng, 4), outcome="success", l_max=10)
    prep = prepare_episode(ep, l_max=10)
    cfg = val.ValueTrainConfig(hidden=(32, 32), epochs=400, batch_size=8, lr=3e-3)
    critic, _ = val.train_value([prep], ["toy"], cfg, np.random.default_rng(1))
    for row, target_bin in zip(prep.obs, prep.bins):
        assert critic.distribution(row, "toy")[target_bin] >= 0.9


def test_train_value_splits_mass_on_ambiguous_state():
    rng = np.random.default_rng(5)
    shared = rng.uniform(-1, 1, size=6)
    # returns from the shared state: -0.4 (T=4) and -0.6 (T=6), equal frequency
    ep_a = make_episode([shared] + _distinct_obs(rng, 4), outcome="success", l_max=10)
    ep_b = make_episode([shared] + _distinct_obs(rng, 6), outcome="success", l_max=10)
    preps = [prepare_episode(ep_a, 10), prepare_episode(ep_b, 10)]
    assert preps[0].bins[0] == discretize(-0.4)
    assert preps[1].bins[0] == discretize(-0.6)
    cfg = val.ValueTrainConfig(hidden=(32, 32), epochs=600, batch_size=16, lr=3e-3)
    critic, _ = val.train_value(preps, ["toy"], cfg, np.random.default_rng(2))
    dist = critic.distribution(shared, "toy")
    assert dist[discretize(-0.4)] == pytest.approx(0.5, abs=0.1)
    assert dist[discretize(-0.6)] == pytest.approx(0.5, abs=0.1)


def test_training_loss_trend_never_increases_beyond_noise():
    rng = np.random.default_rng(9)
    preps = [
        prepare_episode(make_episode(_distinct_obs(rng, 5), l_max=12, seed=i), 12)
        for i in range(20)
    ]
    cfg = val.ValueTrainConfig(hidden=(32, 32), epochs=30, batch_size=32, lr=1e-3)
    _, history = val.train_value(preps, ["toy"], cfg, np.random.default_rng(3))
    smoothed = np.convolve(history, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smoothed) <= 0.02)


# -- advantages -------------------------------------------------------------------


def test_advantage_zero_under_exact_values_both_modes():
    env = GridFold()
    state, obs = env.reset(0)
    rows, actions = [obs.features], []
    while not state.terminal:
        a = env.expert_action(state)
        actions.append(a)
        state, result = env.step(state, a)
        rows.append(result.obs.features)
    ep = make_episode(rows, outcome="success", task_id="gridfold", actions=actions, l_max=60)
    prep = prepare_episode(ep, 60)
    exact = prep.norm_returns  # deterministic episode: V == empirical return
    for t in range(0, prep.n_transitions, 3):
        assert val.advantage(prep, exact, "montecarlo", t) == pytest.approx(0.0, abs=1e-12)
        assert val.advantage(prep, exact, "nstep", t, n_ticks=6) == pytest.approx(0.0, abs=1e-12)


def test_advantage_montecarlo_subtraction():
    rng = np.random.default_rng(0)
    prep = prepare_episode(make_episode(_distinct_obs(rng, 4), l_max=10), 10)
    values = np.full(len(prep.obs), -0.5)
    prep.norm_returns[0] = -0.3
    assert val.advantage(prep, values, "montecarlo", 0) == pytest.approx(0.2)


def test_advantage_nstep_matches_montecarlo_with_exact_table():
    # telescoping identity on a deterministic episode, all lookaheads
    rng = np.random.default_rng(1)
    prep = prepare_episode(make_episode(_distinct_obs(rng, 9), l_max=20, tick_stride=2), 20)
    exact = prep.norm_returns
    for t in range(prep.n_transitions):
        mc = val.advantage(prep, exact, "montecarlo", t)
        for n_ticks in (1, 2, 3, 5, 50):
            assert val.advantage(prep, exact, "nstep", t, n_ticks) == pytest.approx(mc, abs=1e-6)


def test_advantage_rejects_out_of_range_index():
    rng = np.random.default_rng(2)
    prep = prepare_episode(make_episode(_distinct_obs(rng, 3), l_max=10), 10)
    with pytest.raises(ValueError, match="out of range"):
        val.advantage(prep, prep.norm_returns, "montecarlo", 5)


# -- threshold calibration ----------------------------------------------------------


def test_calibrate_order_statistics_exact():
    adv = np.arange(1.0, 101.0)
    rng = np.random.default_rng(0)
    eps = val.calibrate_threshold(adv, 0.3, rng)
    assert eps == 70.0
    assert int((adv > eps).sum()) == 30


def test_calibrate_post_training_default_fraction():
    adv = np.arange(1.0, 101.0)
    eps = val.calibrate_threshold(adv, 0.4, np.random.default_rng(0))
    assert int((adv > eps).sum()) == 40


def test_calibrate_all_equal_warns_and_yields_no_positives(caplog):
    adv = np.ones(200)
    with caplog.at_level(logging.WARNING):
        eps = val.calibrate_threshold(adv, 0.3, np.random.default_rng(0))
    assert int((adv > eps).sum()) == 0
    assert any("degenerate" in r.message for r in caplog.records)


def test_calibrate_needs_100_samples():
    with pytest.raises(val.CalibrationError, match="100"):
        val.calibrate_threshold(np.arange(99.0), 0.3, np.random.default_rng(0))


def test_calibrate_monotone_in_fraction():
    rng = np.random.default_rng(7)
    adv = rng.normal(size=500)
    eps = [
        val.calibrate_threshold(adv, f, np.random.default_rng(0))
        for f in (0.1, 0.2, 0.3, 0.4, 0.6, 0.9)
    ]
    assert all(a >= b for a, b in zip(eps, eps[1:]))


def test_calibrate_subsamples_deterministically():
    rng_data = np.random.default_rng(11)
    adv = rng_data.normal(size=50_000)
    a = val.calibrate_threshold(adv, 0.3, np.random.default_rng(42))
    b = val.calibrate_threshold(adv, 0.3, np.random.default_rng(42))
    assert a == b


# -- indicators -------------------------------------------------------------------


def test_indicator_strict_at_boundary():
    assert val.indicator(0.5, 0.5) == -1
    assert val.indicator(0.5 + 1e-9, 0.5) == 1


def test_indicator_forced_positive_regardless_of_advantage():
    assert val.indicator(-0.5, 0.0, forced=True) == 1


def test_indicator_sft_stage_positive():
    assert val.indicator(-2.0, 0.0, sft=True) == 1
