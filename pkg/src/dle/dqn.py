"""Deep Q-learning with the local-information coin flip and MINE encoder updates.

Each decision step stores the transition in the replay buffer and an
(y, x_l, x_c, s) record in the pair buffer, then performs one encoder-objective
update (weighted by an annealed beta) and one TD update. TD batches never mix
local and common transitions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import DEFAULT_WEIGHTS, RewardWeights, StepContext, reward
from .graph import (
    EncoderBundle,
    Observation,
    RegionalStore,
    batch_graphs,
    encode_observation,
    observe,
)
from .mine import (
    STATE_DIM,
    EncodedPair,
    EncodedPairBuffer,
    StatisticNet,
    TrajectoryWindow,
    anneal_beta,
    encoder_objective,
    trajectory_dim,
)
from .nn import Adam, DenseNet, arrays_from_json, arrays_to_json
from .sim import N_ACTIONS, RegionSpec, sample_scenario, step

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 300
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 30_000
    gamma: float = 0.95
    batch_size: int = 64
    mine_batch_size: int = 64
    buffer_capacity: int = 50_000
    pair_buffer_capacity: int = 20_000
    target_sync: int = 500
    local_prob: float = 0.5
    seed: int = 0
    alpha: float = 0.5
    beta0: float = 1.0
    anneal_fraction: float = 0.6
    lr_rl: float = 3e-4
    lr_enc: float = 1e-4
    d: int = 32
    enc_hidden: int = 32
    q_hidden: tuple = (64, 64)
    stat_hidden: tuple = (64,)
    sage_depth: int = 2
    traj_h: int = 8
    learning_starts: int = 64
    max_grad_norm: float = 10.0
    max_skip_fraction: float = 0.01
    mi_log_every: int = 20

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_end", "local_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")
        self.q_hidden = tuple(self.q_hidden)
        self.stat_hidden = tuple(self.stat_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_hidden"] = list(self.q_hidden)
        d["stat_hidden"] = list(self.stat_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def epsilon_at(step_count: int, config: TrainConfig) -> float:
    if step_count >= config.eps_decay_steps:
        return config.eps_end
    frac = step_count / config.eps_decay_steps
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def select_action(q_values, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q_values = np.asarray(q_values)
    if rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


# ---------------------------------------------------------------- buffers


@dataclass
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminal: bool
    variant: str  # "common" | "local"

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """FIFO transition rings, one per variant, each of ``capacity``.

    ``sample`` picks a variant with probability proportional to its fill and
    then samples uniformly inside it, so a batch is always variant-pure.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rings = {"common": [], "local": []}
        self.cursors = {"common": 0, "local": 0}

    def __len__(self) -> int:
        return sum(len(r) for r in self.rings.values())

    def add(self, t: Transition) -> None:
        ring = self.rings[t.variant]
        if len(ring) < self.capacity:
            ring.append(t)
        else:
            ring[self.cursors[t.variant]] = t
        self.cursors[t.variant] = (self.cursors[t.variant] + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        n_c = len(self.rings["common"])
        n_l = len(self.rings["local"])
        if n_c + n_l == 0:
            raise ValueError("cannot sample from an empty buffer")
        variant = "local" if rng.random() < n_l / (n_c + n_l) else "common"
        ring = self.rings[variant]
        idx = rng.integers(0, len(ring), size=batch_size)
        return [ring[i] for i in idx]


class QNet:
    """Online Q-network plus a frozen target copy synced every ``sync_period`` updates."""

    def __init__(self, in_dim: int, hidden=(64, 64), n_actions: int = N_ACTIONS,
                 rng: np.random.Generator | None = None, sync_period: int = 500):
        self.online = DenseNet([in_dim, *hidden, n_actions], rng=rng)
        self.target = self.online.copy()
        self.sync_period = sync_period
        self.updates = 0
        self.syncs = 0

    def update_target(self) -> None:
        self.target.load_params(self.online.params())
        self.syncs += 1

    def after_update(self) -> None:
        self.updates += 1
        if self.updates % self.sync_period == 0:
            self.update_target()


def _encode_batch(enc: EncoderBundle, obs_list, local: bool, keep_ctx: bool):
    vfeat = np.stack([o.vfeat for o in obs_list])
    graphs = batch_graphs([o.graph for o in obs_list]) if local else None
    x_c, x_l, ctx = enc.forward(vfeat, graphs)
    return (x_l if local else x_c), ctx


def td_loss(batch, q: QNet, enc: EncoderBundle, gamma: float):
    """Mean squared TD error with the target network's max bootstrap.

    Returns ``(loss, q_grads, enc_grads)``; gradients are of the loss and
    flow through the encoded state into every encoder parameter.
    """
    if not batch:
        raise ValueError("empty batch")
    variants = {t.variant for t in batch}
    if len(variants) != 1:
        raise ValueError("TD batch mixes local and common transitions")
    local = variants.pop() == "local"
    n = len(batch)
    x, ctx = _encode_batch(enc, [t.obs for t in batch], local, True)
    x_next, _ = _encode_batch(enc, [t.next_obs for t in batch], local, False)
    q_all, qctx = q.online.forward(x)
    q_next = q.target(x_next).max(axis=1)
    rewards = np.array([t.reward for t in batch])
    done = np.array([t.terminal for t in batch], dtype=np.float64)
    actions = np.array([t.action for t in batch])
    target = rewards + gamma * (1.0 - done) * q_next
    err = q_all[np.arange(n), actions] - target
    loss = float(np.mean(err ** 2))
    g_q = np.zeros_like(q_all)
    g_q[np.arange(n), actions] = 2.0 * err / n
    q_grads, g_x = q.online.backward(qctx, g_q)
    enc_grads = enc.backward(ctx, None if local else g_x, g_x if local else None)
    return loss, q_grads, enc_grads


def clip_by_global_norm(grads, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return grads, total


# ---------------------------------------------------------------- learner


class Learner:
    """One policy stack: encoders, Q-net, critics, optimizers and buffers."""

    def __init__(self, config: TrainConfig, rng: np.random.Generator, use_mine: bool):
        self.config = config
        self.enc = EncoderBundle(config.d, config.enc_hidden, config.sage_depth, rng)
        self.q = QNet(self.enc.state_dim, config.q_hidden, N_ACTIONS, rng, config.target_sync)
        self.use_mine = use_mine
        self.stat_c = StatisticNet(STATE_DIM, self.enc.state_dim, config.stat_hidden, rng=rng)
        self.stat_l = StatisticNet(trajectory_dim(config.traj_h), self.enc.state_dim,
                                   config.stat_hidden, rng=rng)
        self.opt_rl = Adam(self.q.online.params() + self.enc.params(), lr=config.lr_rl)
        # Adam ignores a constant gradient scale, so beta weights the encoder's
        # step size; the critics are estimators and train at a fixed rate
        self.opt_stat = Adam(self.stat_c.params() + self.stat_l.params(), lr=config.lr_enc)
        self.opt_enc = Adam(self.enc.params(), lr=config.lr_enc)
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.pairs = EncodedPairBuffer(config.pair_buffer_capacity) if use_mine else None

    def policy_params(self) -> list:
        """Parameters used when acting (critics are training-only)."""
        return self.enc.params() + self.q.online.params()

    def n_policy_params(self) -> int:
        return int(sum(p.size for p in self.policy_params()))

    def q_values(self, obs: Observation, local: bool) -> np.ndarray:
        x = encode_observation(self.enc, obs, local).x
        return self.q.online(x)

    def rl_update(self, rng: np.random.Generator) -> float | None:
        batch = self.buffer.sample(self.config.batch_size, rng)
        loss, q_grads, enc_grads = td_loss(batch, self.q, self.enc, self.config.gamma)
        if not math.isfinite(loss):
            logger.warning("non-finite TD loss, update skipped")
            return None
        grads, _ = clip_by_global_norm(q_grads + enc_grads, self.config.max_grad_norm)
        if not self.opt_rl.step(grads):
            return None
        self.q.after_update()
        return loss

    def mine_update(self, beta: float, rng: np.random.Generator, apply: bool = True):
        batch = self.pairs.sample(self.config.mine_batch_size, rng)
        out = encoder_objective(batch, self.stat_c, self.stat_l, self.enc, self.config.alpha, rng,
                                update_ema=apply)
        if out is None:
            return None
        if not apply:
            return out
        grads, _ = clip_by_global_norm([-g for g in out["grads_c"] + out["grads_l"]],
                                       self.config.max_grad_norm)
        if not self.opt_stat.step(grads):
            return None
        if beta > 0.0:
            # descend L_enb = -beta * objective
            grads, _ = clip_by_global_norm([-g for g in out["grads_enc"]], self.config.max_grad_norm)
            self.opt_enc.lr = self.config.lr_enc * beta
            if not self.opt_enc.step(grads):
                return None
        return out

    def to_arrays(self, prefix: str) -> dict:
        arrays = {}
        arrays.update(self.enc.to_arrays(f"{prefix}.enc"))
        for name, net in (("q", self.q.online), ("qt", self.q.target),
                          ("stat_c", self.stat_c.net), ("stat_l", self.stat_l.net)):
            for i, p in enumerate(net.params()):
                arrays[f"{prefix}.{name}.{i}"] = p
        return arrays

    def load_arrays(self, arrays: dict, prefix: str) -> None:
        self.enc.load_arrays(arrays, f"{prefix}.enc")
        for name, net in (("q", self.q.online), ("qt", self.q.target),
                          ("stat_c", self.stat_c.net), ("stat_l", self.stat_l.net)):
            net.load_params([arrays[f"{prefix}.{name}.{i}"] for i in range(len(net.params()))])


@dataclass
class TrainResult:
    kind: str
    config: TrainConfig
    learners: list
    router: dict  # region_id -> learner index (empty: single learner)
    training_regions: list
    curve: list = field(default_factory=list)
    total_steps: int = 0
    skipped_steps: int = 0
    stores: dict = field(default_factory=dict)

    def learner_for(self, region_id: int) -> Learner:
        if not self.router:
            return self.learners[0]
        return self.learners[self.router[region_id]]


CURVE_COLUMNS = ("episode", "region_id", "variant", "expert", "steps", "episode_return",
                 "mean_reward", "collision", "epsilon", "beta", "i_common", "i_local")


def _nanmean(xs) -> float:
    xs = [x for x in xs if x is not None and not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def train_dle(config: TrainConfig, regions: dict, kind, stores: dict | None = None,
              weights: RewardWeights = DEFAULT_WEIGHTS, progress=None) -> TrainResult:
    """Train a policy of ``kind`` (PolicyKind or its name) on ``regions``.

    Args:
        regions: region_id -> RegionSpec; must cover the kind's training regime.
        stores: region_id -> RegionalStore, required for DLE.
        progress: optional callable ``(episode, row)`` invoked per episode.
    """
    from .policies import PolicyKind, regime

    kind = PolicyKind(kind) if not isinstance(kind, PolicyKind) else kind
    reg = regime(kind)
    train_ids = [rid for rid in reg.training_regions(regions)]
    for rid in train_ids:
        if rid not in regions:
            raise ValueError(f"{kind.value} needs region {rid}")
    stores = dict(stores or {})
    if reg.local_info:
        missing = [rid for rid in train_ids if rid not in stores]
        if missing:
            raise ValueError(f"DLE training needs regional stores for regions {missing}")
    init_rng = np.random.default_rng([config.seed, 0])
    rng = np.random.default_rng([config.seed, 1])
    n_learners = len(train_ids) if reg.location_router else 1
    learners = [Learner(config, init_rng, use_mine=reg.local_info) for _ in range(n_learners)]
    router = {rid: i for i, rid in enumerate(train_ids)} if reg.location_router else {}
    result = TrainResult(kind.value, config, learners, router, train_ids,
                         stores={rid: stores[rid] for rid in train_ids if rid in stores} if reg.local_info else {})
    horizon = max(regions[r].episode_horizon for r in train_ids)
    anneal_steps = max(1, int(config.anneal_fraction * config.episodes * horizon))
    total_steps = 0
    learner_steps = [0] * n_learners
    updates_attempted = 0
    skipped = 0
    last_i = {"c": float("nan"), "l": float("nan")}
    # a GM expert sees as many episodes as a single model; regions alternate
    n_episodes = config.episodes * n_learners
    for episode in range(n_episodes):
        if reg.location_router:
            rid = train_ids[episode % len(train_ids)]
        else:
            rid = train_ids[int(rng.integers(len(train_ids)))]
        region = regions[rid]
        learner = result.learner_for(rid)
        li = router.get(rid, 0)
        store = stores.get(rid) if reg.local_info else None
        local = bool(reg.local_info and rng.random() < config.local_prob)
        variant = "local" if local else "common"
        state = sample_scenario(region, int(rng.integers(2**31 - 1)))
        obs = observe(state, store, config.sage_depth)
        traj = TrajectoryWindow(config.traj_h)
        traj.reset(obs.state_vec)
        ep_rewards = []
        ep_ic, ep_il = [], []
        beta = anneal_beta(learner_steps[li], anneal_steps, config.beta0)
        eps = epsilon_at(learner_steps[li], config)
        collided = False
        while True:
            eps = epsilon_at(learner_steps[li], config)
            action = select_action(learner.q_values(obs, local), eps, rng)
            state, events = step(state, action, copy_state=False)
            r, _ = reward(StepContext.from_step(state, events), weights)
            done = events.done
            next_obs = observe(state, store, config.sage_depth)
            # horizon cut-offs keep their bootstrap term
            terminal = events.ego_collision or events.off_road
            learner.buffer.add(Transition(obs, action, r, next_obs, terminal, variant))
            if learner.use_mine:
                y, _mask = traj.vector()
                learner.pairs.add(EncodedPair(y, obs, None, obs.state_vec))
            traj.push(action, next_obs.state_vec)
            ep_rewards.append(r)
            collided = collided or events.ego_collision
            total_steps += 1
            learner_steps[li] += 1
            beta = anneal_beta(learner_steps[li], anneal_steps, config.beta0)
            if learner.use_mine and len(learner.pairs) >= config.mine_batch_size:
                if beta > 0.0:
                    out = learner.mine_update(beta, rng)
                    updates_attempted += 1
                    if out is None:
                        skipped += 1
                elif learner_steps[li] % config.mi_log_every == 0:
                    # keep the critics tracking the frozen-beta encoder for logging
                    out = learner.mine_update(0.0, rng)
                else:
                    out = None
                if out is not None:
                    last_i = {"c": out["i_common"], "l": out["i_local"]}
                    ep_ic.append(out["i_common"])
                    ep_il.append(out["i_local"])
            if len(learner.buffer) >= max(config.learning_starts, config.batch_size):
                updates_attempted += 1
                if learner.rl_update(rng) is None:
                    skipped += 1
            obs = next_obs
            if done:
                break
        if updates_attempted >= 100 and skipped > config.max_skip_fraction * updates_attempted:
            raise TrainingDiverged(f"{skipped}/{updates_attempted} updates skipped")
        row = {
            "episode": episode, "region_id": rid, "variant": variant,
            "expert": router.get(rid, 0), "steps": len(ep_rewards),
            "episode_return": float(sum(ep_rewards)),
            "mean_reward": float(np.mean(ep_rewards)), "collision": int(collided),
            "epsilon": eps, "beta": beta,
            "i_common": _nanmean(ep_ic) if learner.use_mine else float("nan"),
            "i_local": _nanmean(ep_il) if learner.use_mine else float("nan"),
        }
        if learner.use_mine and not ep_ic:
            row["i_common"], row["i_local"] = last_i["c"], last_i["l"]
        result.curve.append(row)
        if progress is not None:
            progress(episode, row)
    result.total_steps = total_steps
    result.skipped_steps = skipped
    return result


# ---------------------------------------------------------------- checkpoints


def _net_group(learner: Learner) -> dict:
    return {
        "encoder": learner.enc.to_arrays("enc"),
        "qnet": {f"q.{i}": p for i, p in enumerate(learner.q.online.params())},
        "qnet_target": {f"qt.{i}": p for i, p in enumerate(learner.q.target.params())},
        "stat_common": {f"w.{i}": p for i, p in enumerate(learner.stat_c.params())},
        "stat_local": {f"w.{i}": p for i, p in enumerate(learner.stat_l.params())},
    }


def save_checkpoint(result: TrainResult, directory) -> Path:
    """Write one JSON file per parameter group plus config and manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, learner in enumerate(result.learners):
        for group, arrays in _net_group(learner).items():
            (directory / f"expert{i}_{group}.json").write_text(json.dumps(arrays_to_json(arrays)))
    (directory / "config.json").write_text(json.dumps(result.config.to_dict(), indent=1, sort_keys=True))
    manifest = {
        "format_version": 1,
        "kind": result.kind,
        "router": {str(k): v for k, v in result.router.items()},
        "training_regions": result.training_regions,
        "n_learners": len(result.learners),
        "policy_params_per_learner": [l.n_policy_params() for l in result.learners],
        "total_steps": result.total_steps,
        "skipped_steps": result.skipped_steps,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    for rid, store in result.stores.items():
        store.save(directory / f"region{rid}_store.json")
    return directory


def load_checkpoint(directory) -> TrainResult:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = TrainConfig.from_dict(json.loads((directory / "config.json").read_text()))
    learners = []
    for i in range(manifest["n_learners"]):
        learner = Learner(config, np.random.default_rng(0), use_mine=manifest["kind"] == "DLE")
        groups = {g: arrays_from_json(json.loads((directory / f"expert{i}_{g}.json").read_text()))
                  for g in ("encoder", "qnet", "qnet_target", "stat_common", "stat_local")}
        learner.enc.load_arrays(groups["encoder"], "enc")
        learner.q.online.load_params([groups["qnet"][f"q.{k}"] for k in range(len(learner.q.online.params()))])
        learner.q.target.load_params([groups["qnet_target"][f"qt.{k}"] for k in range(len(learner.q.target.params()))])
        learner.stat_c.net.load_params([groups["stat_common"][f"w.{k}"] for k in range(len(learner.stat_c.params()))])
        learner.stat_l.net.load_params([groups["stat_local"][f"w.{k}"] for k in range(len(learner.stat_l.params()))])
        learners.append(learner)
    stores = {}
    for rid in manifest["training_regions"]:
        p = directory / f"region{rid}_store.json"
        if p.exists():
            stores[rid] = RegionalStore.load(p)
    return TrainResult(manifest["kind"], config, learners,
                       {int(k): v for k, v in manifest["router"].items()},
                       manifest["training_regions"], total_steps=manifest["total_steps"],
                       skipped_steps=manifest["skipped_steps"], stores=stores)


def write_curve(curve, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in curve:
            fh.write(",".join(_fmt(row[c]) for c in CURVE_COLUMNS) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)
