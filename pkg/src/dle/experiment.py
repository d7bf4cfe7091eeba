"""Train every policy kind on the default regions and score them side by side.

The GM experts are the per-region optimal policies: their mean returns form
the APR denominators for every other kind.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .dqn import TrainConfig
from .evaluation import apr, collision_rate, mean_return, run_episodes
from .graph import build_regional_store
from .policies import PolicyKind, make_policy
from .regions import default_regions

logger = logging.getLogger(__name__)

KINDS = (PolicyKind.GM, PolicyKind.LM1, PolicyKind.LM2, PolicyKind.LM12, PolicyKind.DLE)


def desk_config(seed: int, episodes: int = 1000) -> TrainConfig:
    """Small-network settings that train all five kinds in well under an hour."""
    return TrainConfig(episodes=episodes, seed=seed, eps_decay_steps=episodes * 15,
                       d=16, enc_hidden=32, q_hidden=(64, 64), stat_hidden=(64,))


@dataclass
class SeedResult:
    seed: int
    returns: dict = field(default_factory=dict)  # kind -> {region: mean return}
    collisions: dict = field(default_factory=dict)  # kind -> {region: rate}
    apr: dict = field(default_factory=dict)  # kind -> APR over both regions
    train_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "returns": self.returns, "collisions": self.collisions,
                "apr": self.apr, "train_seconds": self.train_seconds}


def run_seed(seed: int, config: TrainConfig | None = None, n_eval: int = 100,
             eval_seed: int = 50_000, store_episodes: int = 100, kinds=KINDS) -> SeedResult:
    config = config or desk_config(seed)
    regions = default_regions()
    stores = {rid: build_regional_store(r, store_episodes, seed=10_000) for rid, r in regions.items()}
    out = SeedResult(seed)
    for kind in kinds:
        t0 = time.time()
        train_regions = {rid: r for rid, r in regions.items()
                         if kind not in (PolicyKind.LM1, PolicyKind.LM2) or rid == int(kind.value[-1])}
        handle = make_policy(kind, config, train_regions, stores if kind is PolicyKind.DLE else None)
        out.train_seconds[kind.value] = time.time() - t0
        out.returns[kind.value] = {}
        out.collisions[kind.value] = {}
        for rid, region in regions.items():
            logs = run_episodes(handle, region, n_eval, eval_seed, stores, record=False)
            out.returns[kind.value][rid] = mean_return(logs)
            out.collisions[kind.value][rid] = collision_rate(logs)
        logger.info("seed %d %s: %s %s", seed, kind.value, out.returns[kind.value], out.collisions[kind.value])
    if PolicyKind.GM.value in out.returns:
        opt = out.returns[PolicyKind.GM.value]
        for k, per_region in out.returns.items():
            out.apr[k] = apr([per_region[r] for r in sorted(opt)], [opt[r] for r in sorted(opt)])
    return out
