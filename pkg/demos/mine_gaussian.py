"""Mutual information estimates on correlated Gaussians.

For unit-variance Gaussians with correlation rho the true value is
-0.5 log(1 - rho^2). The estimator is trained on one sample and evaluated
on a fresh one.

    python demos/mine_gaussian.py
"""

import math

import numpy as np

from dle.mine import MineEstimator


def pairs(rho, n, rng):
    x = rng.normal(size=n)
    y = rho * x + math.sqrt(1 - rho**2) * rng.normal(size=n)
    return x[:, None], y[:, None]


def main():
    print(f"{'rho':>5} {'true':>8} {'estimate':>9}")
    for rho in (0.0, 0.3, 0.5, 0.7, 0.9):
        rng = np.random.default_rng(int(rho * 10))
        m = MineEstimator(1, 1, seed=0).fit(*pairs(rho, 20_000, rng), steps=2000, batch_size=256)
        est = m.estimate(*pairs(rho, 20_000, rng))
        print(f"{rho:5.1f} {-0.5 * math.log(1 - rho**2) + 0.0:8.4f} {est:9.4f}")


if __name__ == "__main__":
    main()
