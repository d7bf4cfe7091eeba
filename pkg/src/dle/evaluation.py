"""Rewards, episode runner, episode logs and the comparison metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sim import ACTIONS, RegionSpec, SimState, StepEvents, sample_scenario, step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardWeights:
    w_c: float = -1.0
    w_v: float = 0.2
    w_l: float = -0.05
    w_p: float = -0.1
    gamma: float = 0.95


DEFAULT_WEIGHTS = RewardWeights()


@dataclass
class StepContext:
    collision: bool
    ego_speed: float
    speed_limit: float
    lane_change_completed: bool
    impacted: list = field(default_factory=list)  # (v_target, v) pairs

    @classmethod
    def from_step(cls, state: SimState, events: StepEvents) -> "StepContext":
        return cls(events.ego_collision, state.ego.speed, state.geometry.max_speed_limit,
                   events.lane_change_completed, list(events.impacted))


def reward(ctx: StepContext, weights: RewardWeights = DEFAULT_WEIGHTS):
    """Weighted sum of collision, velocity, lane-change and politeness terms.

    Returns ``(r, terms)`` with ``terms = {"r_c", "r_v", "r_l", "r_p"}``.
    """
    r_c = 1.0 if ctx.collision else 0.0
    r_v = min(max(ctx.ego_speed / ctx.speed_limit, 0.0), 1.0)
    r_l = 1.0 if ctx.lane_change_completed else 0.0
    r_p = sum((vt - v) / vt for vt, v in ctx.impacted if vt > 0)
    r_p = min(max(r_p, 0.0), 1.0)
    terms = {"r_c": r_c, "r_v": r_v, "r_l": r_l, "r_p": r_p}
    r = weights.w_c * r_c + weights.w_v * r_v + weights.w_l * r_l + weights.w_p * r_p
    return r, terms


def weighted_total(terms: dict, weights: RewardWeights = DEFAULT_WEIGHTS) -> float:
    return (weights.w_c * terms["r_c"] + weights.w_v * terms["r_v"]
            + weights.w_l * terms["r_l"] + weights.w_p * terms["r_p"])


def discounted(rewards, gamma: float) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g


# ---------------------------------------------------------------- logs


def state_summary(state: SimState) -> dict:
    ego = state.ego
    agents = []
    for a in state.agents:
        x, y, h = state.pose(a)
        agents.append([a.id, round(x, 6), round(y, 6), round(h, 6), round(a.speed, 6), a.lane,
                       a.length, a.width])
    return {
        "time_s": round(state.time, 6),
        "ego_s_m": ego.s,
        "ego_d_m": ego.d,
        "ego_speed_mps": ego.speed,
        "ego_lane": ego.lane,
        "ego_heading_rad": ego.heading_offset,
        "ego_setpoint_mps": ego.setpoint,
        "agents": agents,
    }


@dataclass
class EpisodeLog:
    region_id: int
    seed: int
    steps: list = field(default_factory=list)
    terminal_cause: str | None = None
    total_return: float = 0.0
    discounted_return: float = 0.0
    gamma: float = DEFAULT_WEIGHTS.gamma
    policy: str = ""

    @property
    def collided(self) -> bool:
        return self.terminal_cause == "collision"

    def rewards(self) -> list:
        return [s["reward"] for s in self.steps]

    def finalize(self) -> "EpisodeLog":
        rs = self.rewards()
        self.total_return = float(sum(rs))
        self.discounted_return = discounted(rs, self.gamma)
        return self

    def check(self, tol: float = 1e-9) -> None:
        rs = self.rewards()
        if abs(sum(rs) - self.total_return) > tol or abs(discounted(rs, self.gamma) - self.discounted_return) > tol:
            raise ValueError("episode log returns do not match step rewards")

    def to_lines(self, episode_index: int = 0) -> list:
        lines = []
        for k, s in enumerate(self.steps):
            rec = {"episode": episode_index, "region_id": self.region_id, "seed": self.seed,
                   "policy": self.policy, "gamma": self.gamma, "step": k, **s}
            if k == len(self.steps) - 1:
                rec["terminal_cause"] = self.terminal_cause
                rec["total_return"] = self.total_return
                rec["discounted_return"] = self.discounted_return
            lines.append(json.dumps(rec))
        return lines


def write_logs(logs, path) -> None:
    with open(path, "a") as fh:
        for i, log in enumerate(logs):
            for line in log.to_lines(i):
                fh.write(line + "\n")


def read_logs(path) -> list:
    """Parse a step-lines file back into EpisodeLogs, verifying returns."""
    episodes = {}
    order = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        key = rec["episode"]
        if key not in episodes:
            episodes[key] = EpisodeLog(rec["region_id"], rec["seed"], gamma=rec["gamma"],
                                       policy=rec.get("policy", ""))
            order.append(key)
        log = episodes[key]
        step_rec = {k: v for k, v in rec.items()
                    if k not in ("episode", "region_id", "seed", "policy", "gamma", "step",
                                 "terminal_cause", "total_return", "discounted_return")}
        log.steps.append(step_rec)
        if "terminal_cause" in rec:
            log.terminal_cause = rec["terminal_cause"]
            log.total_return = rec["total_return"]
            log.discounted_return = rec["discounted_return"]
    out = [episodes[k] for k in order]
    for log in out:
        log.check()
    return out


# ---------------------------------------------------------------- runner


def run_episode(policy, region: RegionSpec, seed: int, stores=None,
                weights: RewardWeights = DEFAULT_WEIGHTS, record: bool = True) -> EpisodeLog:
    """One greedy episode of ``policy`` (anything with ``act(state, stores)``)."""
    state = sample_scenario(region, seed)
    log = EpisodeLog(region.region_id, seed, gamma=weights.gamma,
                     policy=getattr(getattr(policy, "kind", None), "value", ""))
    while True:
        summary = state_summary(state) if record else None
        action = int(policy.act(state, stores))
        state, events = step(state, action, copy_state=False)
        r, terms = reward(StepContext.from_step(state, events), weights)
        rec = {"action": action, "action_name": ACTIONS[action], "reward": r, "terms": terms,
               "events": {
                   "collisions": [list(p) for p in events.collisions],
                   "ego_collision": events.ego_collision,
                   "lane_change_completed": events.lane_change_completed,
                   "env_lane_changes": [list(c) for c in events.env_lane_changes],
                   "cause": events.terminal_cause,
               }}
        if record:
            rec["state"] = summary
            rec["next_state"] = state_summary(state) if events.done else None
        log.steps.append(rec)
        if events.done:
            log.terminal_cause = events.terminal_cause
            break
    return log.finalize()


def run_episodes(policy, region: RegionSpec, n: int, seed: int, stores=None,
                 weights: RewardWeights = DEFAULT_WEIGHTS, record: bool = True) -> list:
    """``n`` seeded episodes (seeds ``seed + i``); failed episodes are dropped and counted."""
    if n < 1:
        raise ValueError("need at least one episode")
    logs = []
    invalid = 0
    for i in range(n):
        try:
            logs.append(run_episode(policy, region, seed + i, stores, weights, record))
        except (ValueError, FloatingPointError) as exc:
            invalid += 1
            logger.warning("episode seed %d invalid: %s", seed + i, exc)
    if invalid:
        logger.warning("%d of %d episodes invalid and excluded", invalid, n)
    return logs


# ---------------------------------------------------------------- metrics


def apr(policy_returns, optimal_returns) -> float:
    """Ratio of summed per-region mean returns."""
    policy_returns = list(policy_returns)
    optimal_returns = list(optimal_returns)
    if len(policy_returns) != len(optimal_returns):
        raise ValueError("region lists must align")
    den = float(sum(optimal_returns))
    if den == 0.0:
        raise ZeroDivisionError("sum of optimal returns is zero")
    return float(sum(policy_returns)) / den


def collision_rate(logs) -> float:
    logs = list(logs)
    if not logs:
        raise ValueError("collision rate needs at least one episode")
    return sum(1 for log in logs if log.collided) / len(logs)


def mean_return(logs, discounted_returns: bool = False) -> float:
    vals = [log.discounted_return if discounted_returns else log.total_return for log in logs]
    return float(np.mean(vals))


def bootstrap_ci(values, n_boot: int = 1000, level: float = 0.9, seed: int = 0):
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, len(values), size=(n_boot, len(values)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def value_gap(policy, reference, region: RegionSpec, n: int, seed: int, stores=None,
              weights: RewardWeights = DEFAULT_WEIGHTS) -> float:
    """|mean discounted return(policy) - mean discounted return(reference)| on shared seeds."""
    a = run_episodes(policy, region, n, seed, stores, weights, record=False)
    b = a if reference is policy else run_episodes(reference, region, n, seed, stores, weights, record=False)
    return abs(mean_return(a, True) - mean_return(b, True))


@dataclass
class RegionResult:
    region_id: int
    n_episodes: int
    n_collisions: int
    mean_return: float
    ci_low: float
    ci_high: float
    optimal_return: float | None = None
    cross_region: bool = False


@dataclass
class MetricsReport:
    policy: str
    training_regions: list
    regions: list  # RegionResult
    apr: float | None
    collision_rate: float
    n_total: int
    n_collisions: int
    value_gap: float | None = None
    notes: list = field(default_factory=list)
    config_hash: str = ""

    def __post_init__(self):
        if self.n_collisions > self.n_total:
            raise ValueError("collision count exceeds episode count")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["regions"] = [RegionResult(**r) for r in d["regions"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table_rows(self) -> list:
        train = "&".join(str(r) for r in self.training_regions)
        test = "&".join(str(r.region_id) for r in self.regions)
        apr_txt = "-" if self.apr is None else f"{self.apr:.2f}"
        return [(self.policy, train, test, apr_txt, f"{100 * self.collision_rate:.0f}%")]


def build_report(policy_name: str, training_regions, logs_by_region: dict,
                 optimal_by_region: dict | None = None, notes=None, config_hash: str = "") -> MetricsReport:
    results = []
    all_logs = []
    for rid in sorted(logs_by_region):
        logs = logs_by_region[rid]
        all_logs.extend(logs)
        rets = [log.total_return for log in logs]
        lo, hi = bootstrap_ci(rets) if len(rets) > 1 else (rets[0], rets[0])
        results.append(RegionResult(
            rid, len(logs), sum(log.collided for log in logs), float(np.mean(rets)), lo, hi,
            None if optimal_by_region is None else optimal_by_region.get(rid),
            rid not in training_regions,
        ))
    ratio = None
    if optimal_by_region is not None and all(r.region_id in optimal_by_region for r in results):
        ratio = apr([r.mean_return for r in results], [optimal_by_region[r.region_id] for r in results])
    n_c = sum(r.n_collisions for r in results)
    n_t = sum(r.n_episodes for r in results)
    return MetricsReport(policy_name, list(training_regions), results, ratio,
                         n_c / n_t if n_t else math.nan, n_t, n_c, notes=list(notes or []),
                         config_hash=config_hash)


TABLE_HEADER = ("Driving Policy", "Training Scenario", "Test Scenario", "APR", "Collision Rate")


def format_table(rows) -> str:
    rows = [TABLE_HEADER] + [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_HEADER))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
