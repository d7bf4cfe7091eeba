"""Built-in region definitions used by the demos, tests and default configs.

Both merge regions share one road layout (on-ramp on lane 0 feeding lane 1,
slower overtaking lane 2) and differ only in how ramp traffic merges. An
empty single-lane road serves as the sanity-check environment.
"""

from __future__ import annotations

from .sim import MergeSection, MobilParams, RegionSpec, straight_road

ROAD_LENGTH_M = 400.0
RAMP_LIMIT_MPS = 25.0 / 3.6
MAIN_LIMIT_MPS = 50.0 / 3.6
FAST_LANE_LIMIT_MPS = 40.0 / 3.6
HORIZON_STEPS = 40


def merge_geometry():
    return straight_road(
        n_lanes=3, length_m=ROAD_LENGTH_M,
        speed_limits_mps=[RAMP_LIMIT_MPS, MAIN_LIMIT_MPS, FAST_LANE_LIMIT_MPS],
        merge_sections=[MergeSection(ramp_lane=0, gore_s_m=60.0, length_m=160.0, target_lane=1)],
    )


def _merge_region(region_id: int, name: str, gate: float, merging: MobilParams) -> RegionSpec:
    return RegionSpec(
        region_id=region_id,
        name=name,
        geometry=merge_geometry(),
        merge_lane_change_probability=gate,
        merging_mobil=merging,
        spawn={
            0: {"s_range_m": [70.0, 130.0], "speed_range_mps": [5.0, 7.0], "count_range": [2, 3]},
            1: {"s_range_m": [80.0, 200.0], "speed_range_mps": [12.0, 13.5], "count_range": [1, 2]},
            2: {"s_range_m": [0.0, 200.0], "speed_range_mps": [9.0, 11.0], "count_range": [1, 2]},
        },
        ego_spawn={"lane": 1, "s_range_m": [10.0, 30.0], "speed_range_mps": [12.0, 13.5]},
        episode_horizon=HORIZON_STEPS,
        min_env_vehicles=4,
        max_env_vehicles=7,
    )


def region_one() -> RegionSpec:
    """Ramp traffic rarely merges and waits for a generous gap."""
    return _merge_region(1, "calm merge", 0.1,
                         MobilParams(politeness=0.5, lane_change_threshold_mps2=0.2, safe_braking_mps2=1.0))


def region_two() -> RegionSpec:
    """Ramp traffic merges almost always and forces its way in."""
    return _merge_region(2, "aggressive merge", 0.9,
                         MobilParams(politeness=0.0, lane_change_threshold_mps2=0.2, safe_braking_mps2=20.0))


def empty_road(region_id: int = 1, horizon: int = HORIZON_STEPS) -> RegionSpec:
    """One lane, no traffic; the ego starts at the speed limit."""
    geometry = straight_road(n_lanes=1, length_m=ROAD_LENGTH_M, speed_limits_mps=[MAIN_LIMIT_MPS])
    return RegionSpec(
        region_id=region_id, name="empty road", geometry=geometry,
        spawn={}, ego_spawn={"lane": 0, "s_range_m": [0.0, 10.0],
                             "speed_range_mps": [MAIN_LIMIT_MPS, MAIN_LIMIT_MPS]},
        episode_horizon=horizon, min_env_vehicles=0, max_env_vehicles=0,
    )


def default_regions() -> dict:
    return {1: region_one(), 2: region_two()}
