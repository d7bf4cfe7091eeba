"""A single local model learns to drive at the limit on an empty road.

On one lane with no traffic the best return is holding the speed limit for
the whole horizon: 0.2 per step for 40 steps. The script trains a local
model for a few hundred episodes and compares its greedy return with the
random and always-slower baselines.

    python demos/empty_road_sanity.py
"""

import numpy as np

from dle.dqn import TrainConfig
from dle.evaluation import mean_return, run_episodes
from dle.policies import PolicyKind, make_policy
from dle.regions import empty_road
from dle.sim import N_ACTIONS, SLOWER


class Fixed:
    def __init__(self, fn):
        self.fn = fn

    def act(self, state, stores=None):
        return self.fn(state)


def main():
    road = empty_road()
    optimum = 0.2 * road.episode_horizon
    rng = np.random.default_rng(0)
    baselines = {
        "random": Fixed(lambda s: int(rng.integers(N_ACTIONS))),
        "always slower": Fixed(lambda s: SLOWER),
    }
    for name, policy in baselines.items():
        print(f"{name:>14}: {mean_return(run_episodes(policy, road, 10, 777, record=False)):.2f}")

    cfg = TrainConfig(episodes=300, seed=0, eps_decay_steps=4000, d=16, q_hidden=(64, 64))
    handle = make_policy(PolicyKind.LM1, cfg, {1: road})
    learned = mean_return(run_episodes(handle, road, 10, 777, record=False))
    print(f"{'trained LM1':>14}: {learned:.2f}  (optimum {optimum:.2f})")


if __name__ == "__main__":
    main()
