import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dle.evaluation import (
    DEFAULT_WEIGHTS,
    EpisodeLog,
    MetricsReport,
    StepContext,
    apr,
    bootstrap_ci,
    build_report,
    collision_rate,
    discounted,
    format_table,
    mean_return,
    read_logs,
    reward,
    run_episode,
    run_episodes,
    value_gap,
    write_logs,
)
from dle.regions import empty_road, region_one
from dle.sim import FASTER, HOLD, N_ACTIONS, SLOWER


class Fixed:
    def __init__(self, action):
        self.action = action

    def act(self, state, stores=None):
        return self.action


class Random:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def act(self, state, stores=None):
        return int(self.rng.integers(N_ACTIONS))


# ---------------------------------------------------------------- reward fixtures


def test_collision_step_contributes_minus_one():
    r, terms = reward(StepContext(True, 0.0, 10.0, False))
    assert terms == {"r_c": 1.0, "r_v": 0.0, "r_l": 0.0, "r_p": 0.0}
    assert r == -1.0


def test_speed_limit_contributes_point_two():
    assert reward(StepContext(False, 10.0, 10.0, False))[0] == 0.2
    assert reward(StepContext(False, 15.0, 10.0, False))[0] == 0.2
    assert reward(StepContext(False, 5.0, 10.0, False))[0] == pytest.approx(0.1, abs=1e-15)


def test_lane_change_and_politeness_terms():
    assert reward(StepContext(False, 0.0, 10.0, True))[0] == -0.05
    # one follower forced from 10 to 8 m/s: (10-8)/10 = 0.2 -> -0.02
    r, terms = reward(StepContext(False, 0.0, 10.0, False, [(10.0, 8.0)]))
    assert terms["r_p"] == pytest.approx(0.2) and r == pytest.approx(-0.02)
    # speeding up is not a penalty; the term is capped at 1
    assert reward(StepContext(False, 0.0, 10.0, False, [(10.0, 12.0)]))[1]["r_p"] == 0.0
    assert reward(StepContext(False, 0.0, 10.0, False, [(10.0, 0.0)] * 3))[1]["r_p"] == 1.0


def test_weights():
    w = DEFAULT_WEIGHTS
    assert (w.w_c, w.w_v, w.w_l, w.w_p, w.gamma) == (-1.0, 0.2, -0.05, -0.1, 0.95)


# ---------------------------------------------------------------- metric arithmetic


def test_apr_fixture():
    assert apr((7, 2), (10, 10)) == 0.45
    assert apr((10, 10), (10, 10)) == 1.0
    with pytest.raises(ZeroDivisionError):
        apr((1,), (0,))
    with pytest.raises(ValueError):
        apr((1, 2), (1,))


def _log(collided):
    log = EpisodeLog(1, 0)
    log.terminal_cause = "collision" if collided else "horizon"
    return log


def test_collision_rate_fixtures():
    assert collision_rate([_log(k < 36) for k in range(100)]) == 0.36
    assert collision_rate([_log(k < 72) for k in range(100)]) == 0.72
    with pytest.raises(ValueError):
        collision_rate([])


def test_discounted_return():
    assert discounted([1.0, 1.0, 1.0], 0.5) == 1.75
    assert discounted([], 0.9) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=50), st.floats(0, 1))
def test_discounted_matches_power_sum(rs, gamma):
    expected = sum(r * gamma**k for k, r in enumerate(rs))
    assert discounted(rs, gamma) == pytest.approx(expected, abs=1e-9)


def test_bootstrap_ci_brackets_mean():
    vals = np.random.default_rng(0).normal(size=200)
    lo, hi = bootstrap_ci(vals)
    assert lo < vals.mean() < hi


# ---------------------------------------------------------------- episodes and logs


def test_empty_road_full_speed_return():
    # ego starts at the limit and holds it: 0.2 per step over the horizon
    log = run_episode(Fixed(HOLD), empty_road(horizon=40), 0)
    assert len(log.steps) == 40 and log.terminal_cause == "horizon"
    assert log.total_return == pytest.approx(8.0, abs=1e-9)


def test_greedy_full_speed_beats_random_on_empty_road():
    road = empty_road()
    best = mean_return(run_episodes(Fixed(FASTER), road, 5, 0, record=False))
    rand = mean_return(run_episodes(Random(0), road, 5, 0, record=False))
    slow = mean_return(run_episodes(Fixed(SLOWER), road, 5, 0, record=False))
    assert best == pytest.approx(8.0, abs=1e-9)
    assert slow < rand < best


def test_log_round_trip_recomputes_returns(tmp_path):
    logs = run_episodes(Fixed(HOLD), region_one(), 3, 7)
    path = tmp_path / "episodes.jsonl"
    write_logs(logs, path)
    back = read_logs(path)
    assert len(back) == 3
    for a, b in zip(logs, back):
        assert b.rewards() == a.rewards()
        assert b.total_return == a.total_return and b.terminal_cause == a.terminal_cause
        assert b.steps[0]["state"] == a.steps[0]["state"]


def test_tampered_log_is_rejected(tmp_path):
    path = tmp_path / "episodes.jsonl"
    write_logs(run_episodes(Fixed(HOLD), empty_road(horizon=3), 1, 0), path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["reward"] += 1.0
    lines[0] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="do not match"):
        read_logs(path)


def test_episodes_are_seed_deterministic():
    a = run_episodes(Random(3), region_one(), 2, 11)
    b = run_episodes(Random(3), region_one(), 2, 11)
    assert [l.to_lines() for l in a] == [l.to_lines() for l in b]


def test_value_gap_properties():
    road = empty_road(horizon=10)
    hold, slow = Fixed(HOLD), Fixed(SLOWER)
    assert value_gap(hold, hold, road, 2, 0) == 0.0
    ab = value_gap(hold, slow, road, 2, 0)
    assert ab > 0 and ab == value_gap(slow, hold, road, 2, 0)


# ---------------------------------------------------------------- reports


def test_report_round_trip_and_table():
    logs = {1: [_finished(1, 7.0, False), _finished(1, 5.0, True)],
            2: [_finished(2, 2.0, False)]}
    rep = build_report("LM1", [1], logs, {1: 8.0, 2: 4.0})
    assert rep.n_total == 3 and rep.n_collisions == 1
    assert rep.apr == pytest.approx((6.0 + 2.0) / 12.0)
    assert rep.regions[1].cross_region and not rep.regions[0].cross_region
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back.to_json() == rep.to_json()
    table = format_table(rep.table_rows())
    assert "LM1" in table and "0.67" in table and "33%" in table
    with pytest.raises(ValueError):
        MetricsReport("x", [1], [], None, 0.0, 1, 2)


def _finished(rid, total, collided):
    log = EpisodeLog(rid, 0)
    log.steps = [{"reward": total}]
    log.terminal_cause = "collision" if collided else "horizon"
    return log.finalize()
