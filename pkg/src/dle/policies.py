"""Policy kinds, their data regimes, and frozen acting handles.

LM1 / LM2 train on one region, LM12 on both; GM keeps one expert per
region and routes by location; DLE trains one model on both regions and
adds regional road information when a store exists for the current region.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .dqn import TrainConfig, TrainResult, load_checkpoint, train_dle
from .graph import encode_observation, observe

logger = logging.getLogger(__name__)


class PolicyKind(str, enum.Enum):
    LM1 = "LM1"
    LM2 = "LM2"
    LM12 = "LM12"
    GM = "GM"
    DLE = "DLE"


@dataclass(frozen=True)
class Regime:
    regions: tuple | None  # None: every region handed to the trainer
    local_info: bool
    location_router: bool

    def training_regions(self, available) -> list:
        if self.regions is None:
            return sorted(available)
        return list(self.regions)


_REGIMES = {
    PolicyKind.LM1: Regime((1,), False, False),
    PolicyKind.LM2: Regime((2,), False, False),
    PolicyKind.LM12: Regime((1, 2), False, False),
    PolicyKind.GM: Regime((1, 2), False, True),
    PolicyKind.DLE: Regime((1, 2), True, False),
}


def regime(kind) -> Regime:
    return _REGIMES[PolicyKind(kind)]


class RoutingError(KeyError):
    """GM asked to act in a region it has no expert for."""


class PolicyHandle:
    """Greedy, read-only view of a trained checkpoint."""

    def __init__(self, result: TrainResult):
        self.kind = PolicyKind(result.kind)
        self.result = result
        self.regime = regime(self.kind)
        self.depth = result.config.sage_depth

    @property
    def learners(self) -> list:
        return self.result.learners

    def gm_route(self, region_id: int) -> int:
        if not self.result.router:
            return 0
        try:
            return self.result.router[region_id]
        except KeyError:
            logger.warning("GM has no expert for region %s", region_id)
            raise RoutingError(f"no expert trained for region {region_id}") from None

    def n_params(self) -> int:
        """Acting parameters over all experts."""
        return sum(l.n_policy_params() for l in self.learners)

    def q_values(self, state, stores=None) -> np.ndarray:
        region_id = state.region.region_id
        learner = self.learners[self.gm_route(region_id)]
        store = None
        if self.regime.local_info and stores:
            store = stores.get(region_id)
        obs = observe(state, store, self.depth)
        return learner.q.online(encode_observation(learner.enc, obs, store is not None).x)

    def act(self, state, stores=None) -> int:
        """Greedy action; DLE uses local information only where a store exists."""
        return int(np.argmax(self.q_values(state, stores)))

    def common_variant(self, state) -> int:
        """Action of the basic (no regional data) path of the same model."""
        return self.act(state, None)


def check_param_counts(handle: PolicyHandle, reference_count: int, tol: float = 0.01) -> None:
    n_experts = len(handle.learners)
    expected = n_experts * reference_count
    if abs(handle.n_params() - expected) > tol * expected:
        raise AssertionError(
            f"{handle.kind.value}: {handle.n_params()} parameters, expected {expected}")


def make_policy(kind, config: TrainConfig, regions: dict, stores: dict | None = None,
                progress=None) -> PolicyHandle:
    """Train ``kind`` under its data regime and return a frozen handle.

    Raises:
        ValueError: if ``regions`` holds regions outside the kind's regime
            or misses one it needs.
    """
    kind = PolicyKind(kind)
    reg = regime(kind)
    wanted = set(reg.training_regions(regions))
    extra = set(regions) - wanted
    if extra:
        raise ValueError(f"{kind.value} may not train on regions {sorted(extra)}")
    missing = wanted - set(regions)
    if missing:
        raise ValueError(f"{kind.value} needs regions {sorted(missing)}")
    result = train_dle(config, regions, kind, stores, progress=progress)
    handle = PolicyHandle(result)
    check_param_counts(handle, single_model_params(config))
    return handle


def single_model_params(config: TrainConfig) -> int:
    """Acting parameter count of one encoder + Q-net stack."""
    from .dqn import Learner

    return Learner(config, np.random.default_rng(0), use_mine=False).n_policy_params()


def load_policy(directory) -> PolicyHandle:
    return PolicyHandle(load_checkpoint(directory))
