import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dle.graph import EncoderBundle, build_regional_store, observe
from dle.mine import (
    STATE_DIM,
    EncodedPair,
    EncodedPairBuffer,
    MineEstimator,
    StatisticNet,
    TrajectoryWindow,
    anneal_beta,
    derangement,
    dv_estimate,
    dv_value_and_grads,
    encoder_objective,
    trajectory_dim,
)
from dle.regions import region_two
from dle.sim import HOLD, N_ACTIONS, sample_scenario, step


def gaussian_pairs(rho, n, rng):
    x = rng.normal(size=n)
    y = rho * x + math.sqrt(1 - rho**2) * rng.normal(size=n)
    return x[:, None], y[:, None]


def gaussian_mi(rho):
    return -0.5 * math.log(1 - rho**2)


def test_gaussian_mi_closed_form_values():
    assert gaussian_mi(0.5) == pytest.approx(0.1438, abs=1e-4)
    assert gaussian_mi(0.9) == pytest.approx(0.8304, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.integers(0, 2**31))
def test_derangement_has_no_fixed_points(n, seed):
    p = derangement(n, np.random.default_rng(seed))
    assert sorted(p.tolist()) == list(range(n))
    assert np.all(p != np.arange(n))


def test_anneal_beta_linear_and_zero_after():
    assert anneal_beta(0, 100, 1.0) == 1.0
    assert anneal_beta(50, 100, 2.0) == pytest.approx(1.0)
    assert anneal_beta(100, 100, 1.0) == 0.0
    assert anneal_beta(1000, 100, 1.0) == 0.0
    vals = [anneal_beta(t, 100, 1.0) for t in range(150)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        anneal_beta(0, 0, 1.0)


def test_dv_estimate_of_constant_critic_is_zero():
    T = StatisticNet(1, 1, hidden=(4,))
    a = np.ones((10, 1))
    assert dv_estimate(T, (a, a), (a, a)) == pytest.approx(0.0, abs=1e-12)


def test_dv_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    T = StatisticNet(2, 3, hidden=(5,), activation="tanh", rng=rng)
    a = rng.normal(size=(6, 2))
    b = rng.normal(size=(6, 3))
    perm = derangement(6, rng)

    def value():
        return dv_estimate(T, (a, b), (a, b[perm]))

    v, grads, ga, gb = dv_value_and_grads(T, a, b, perm, use_ema=False)
    assert v == pytest.approx(value(), abs=1e-12)
    eps = 1e-6
    for p, g in zip(T.params() + [a, b], grads + [ga, gb]):
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            up = value()
            p[i] = old - eps
            down = value()
            p[i] = old
            assert (up - down) / (2 * eps) == pytest.approx(g[i], abs=1e-6)


def test_ema_denominator_update():
    rng = np.random.default_rng(1)
    T = StatisticNet(1, 1, hidden=(4,), rng=rng, ema_decay=0.9)
    a, b = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
    perm = derangement(8, rng)
    dv_value_and_grads(T, a, b, perm)
    tm = T(a, b[perm])
    first = math.log(np.mean(np.exp(tm)))
    assert T.log_ema == pytest.approx(first, abs=1e-12)
    dv_value_and_grads(T, a, b, perm)
    assert T.ema == pytest.approx(0.9 * math.exp(first) + 0.1 * math.exp(first), rel=1e-12)
    frozen = T.log_ema
    dv_value_and_grads(T, a, b, perm, update_ema=False)
    assert T.log_ema == frozen


def test_non_finite_critic_output_skips():
    T = StatisticNet(1, 1, hidden=(2,), rng=np.random.default_rng(0))
    T.net.weights[0][...] = np.nan
    a = np.ones((4, 1))
    assert dv_value_and_grads(T, a, a, derangement(4, np.random.default_rng(0))) is None


def test_stale_moving_average_overflow_skips():
    T = StatisticNet(1, 1, hidden=(2,), rng=np.random.default_rng(0))
    T.log_ema = -1000.0
    a = np.ones((4, 1))
    perm = derangement(4, np.random.default_rng(0))
    assert dv_value_and_grads(T, a, a, perm, update_ema=False) is None
    assert dv_value_and_grads(T, a, a, perm, use_ema=False) is not None


def test_mine_recovers_gaussian_mi():
    rng = np.random.default_rng(0)
    a, b = gaussian_pairs(0.5, 20_000, rng)
    m = MineEstimator(1, 1, seed=0).fit(a, b, steps=2000, batch_size=256)
    ta, tb = gaussian_pairs(0.5, 20_000, rng)
    assert abs(m.estimate(ta, tb) - gaussian_mi(0.5)) < 0.10


def test_mine_independent_near_zero():
    rng = np.random.default_rng(1)
    a, b = gaussian_pairs(0.0, 20_000, rng)
    m = MineEstimator(1, 1, seed=1).fit(a, b, steps=1000, batch_size=256)
    ta, tb = gaussian_pairs(0.0, 20_000, rng)
    assert abs(m.estimate(ta, tb)) <= 0.05


# ---------------------------------------------------------------- trajectories


def test_trajectory_layout():
    h = 3
    w = TrajectoryWindow(h)
    s0 = np.full(STATE_DIM, 1.0)
    w.reset(s0)
    y, mask = w.vector()
    assert len(y) == trajectory_dim(h) == 3 * (STATE_DIM + N_ACTIONS) + STATE_DIM
    assert mask.tolist() == [False, False, False, True]
    assert np.all(y[-STATE_DIM:] == 1.0) and np.all(y[:-STATE_DIM] == 0.0)
    w.push(2, np.full(STATE_DIM, 2.0))
    y, mask = w.vector()
    block = STATE_DIM + N_ACTIONS
    assert mask.tolist() == [False, False, True, True]
    assert np.all(y[2 * block: 2 * block + STATE_DIM] == 1.0)
    onehot = y[2 * block + STATE_DIM: 3 * block]
    assert onehot.tolist() == [0, 0, 1, 0, 0]
    assert np.all(y[-STATE_DIM:] == 2.0)


def test_trajectory_window_rolls():
    w = TrajectoryWindow(2)
    w.reset(np.zeros(STATE_DIM))
    for k in range(1, 6):
        w.push(k % N_ACTIONS, np.full(STATE_DIM, float(k)))
    y, mask = w.vector()
    assert mask.all()
    assert y[0] == 3.0 and y[-1] == 5.0


def test_pair_buffer_fifo():
    buf = EncodedPairBuffer(3)
    for k in range(5):
        buf.add(EncodedPair(np.array([k]), None, None, np.array([k])))
    assert len(buf) == 3
    assert sorted(int(r.y[0]) for r in buf.items) == [2, 3, 4]
    with pytest.raises(ValueError):
        EncodedPairBuffer(0)


# ---------------------------------------------------------------- encoder objective


@pytest.fixture(scope="module")
def pair_batch():
    region = region_two()
    store = build_regional_store(region, 5)
    state = sample_scenario(region, 0)
    w = TrajectoryWindow(2)
    obs = observe(state, store)
    w.reset(obs.state_vec)
    batch = []
    for k in range(6):
        y, _ = w.vector()
        batch.append(EncodedPair(y, obs, None, obs.state_vec))
        state, _ = step(state, HOLD)
        obs = observe(state, store)
        w.push(HOLD, obs.state_vec)
    return batch


def _objective_parts(d=3, seed=0):
    rng = np.random.default_rng(seed)
    enc = EncoderBundle(d=d, hidden=4, rng=rng)
    for p in enc.params():
        if p.ndim == 1:
            p[...] = rng.uniform(0.05, 0.3, size=p.shape)
    stat_c = StatisticNet(STATE_DIM, enc.state_dim, (6,), "tanh", rng)
    stat_l = StatisticNet(trajectory_dim(2), enc.state_dim, (6,), "tanh", rng)
    return enc, stat_c, stat_l


def test_encoder_objective_gradients(pair_batch):
    enc, stat_c, stat_l = _objective_parts()

    def value():
        out = encoder_objective(pair_batch, stat_c, stat_l, enc, 0.5, np.random.default_rng(9),
                                update_ema=False)
        return out["value"]

    out = encoder_objective(pair_batch, stat_c, stat_l, enc, 0.5, np.random.default_rng(9),
                            update_ema=False)
    assert out["value"] == pytest.approx(out["i_common"] + 0.5 * out["i_local"])
    eps = 1e-6
    checks = [(enc.params(), out["grads_enc"]), (stat_c.params(), out["grads_c"]),
              (stat_l.params(), out["grads_l"])]
    rng = np.random.default_rng(3)
    for params, grads in checks:
        for p, g in zip(params, grads):
            for _ in range(3):
                i = tuple(int(rng.integers(0, s)) for s in p.shape)
                old = p[i]
                p[i] = old + eps
                up = value()
                p[i] = old - eps
                down = value()
                p[i] = old
                assert (up - down) / (2 * eps) == pytest.approx(g[i], abs=1e-6)


def test_alpha_zero_skips_local_path(pair_batch):
    enc, stat_c, stat_l = _objective_parts()
    out = encoder_objective(pair_batch, stat_c, stat_l, enc, 0.0, np.random.default_rng(0))
    assert math.isnan(out["i_local"])
    assert all(np.all(g == 0) for g in out["grads_l"])
    sl = enc.group_slices()
    assert all(np.all(g == 0) for g in out["grads_enc"][sl["road_enc"]])
    assert stat_l.log_ema is None


def test_empty_batch_returns_none():
    enc, stat_c, stat_l = _objective_parts()
    assert encoder_objective([], stat_c, stat_l, enc, 0.5, np.random.default_rng(0)) is None


def test_objective_ignores_state_scale(pair_batch):
    enc, stat_c, stat_l = _objective_parts()

    def value():
        return encoder_objective(pair_batch, stat_c, stat_l, enc, 0.5, np.random.default_rng(9),
                                 update_ema=False)["value"]

    base = value()
    enc.w0 *= 3.0
    enc.w1 *= 3.0
    assert value() == pytest.approx(base, abs=1e-9)
