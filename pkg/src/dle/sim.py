"""Region-conditioned highway/merge micro-simulator.

Environment vehicles follow IDM longitudinally and MOBIL laterally. What
differs between regions is how merging vehicles behave: a MOBIL-approved
merge is additionally gated by a per-vehicle Bernoulli draw whose probability
comes from the region, so the same scene evolves differently depending on
where it happens.

Vehicles live in road coordinates ``(s, d)``: ``s`` is arclength along lane
0's centerline and ``d`` the signed lateral offset from it (left positive).
Global poses are derived from the geometry when needed.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PHYSICS_DT = 0.1
DECISION_DT = 0.5
LANE_CHANGE_DURATION = 2.0
SETPOINT_STEP = 2.0
SPEED_GAIN = 2.0

ACTIONS = ("lane_left", "hold", "lane_right", "faster", "slower")
LANE_LEFT, HOLD, LANE_RIGHT, FASTER, SLOWER = range(5)
N_ACTIONS = len(ACTIONS)

VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class IdmParams:
    desired_velocity_mps: float = 50.0 / 3.6
    time_gap_s: float = 1.5
    jam_distance_m: float = 5.0
    delta: float = 4.0
    max_accel_mps2: float = 3.0
    desired_decel_mps2: float = -5.0

    def __post_init__(self):
        if self.max_accel_mps2 <= 0:
            raise ValueError("max acceleration must be positive")
        if self.desired_decel_mps2 >= 0:
            raise ValueError("desired deceleration must be negative")
        if self.time_gap_s <= 0 or self.jam_distance_m <= 0:
            raise ValueError("time gap and jam distance must be positive")
        if not 3.4 <= self.delta <= 4.5:
            raise ValueError(f"velocity exponent {self.delta} outside [3.4, 4.5]")
        if self.desired_velocity_mps <= 0:
            raise ValueError("desired velocity must be positive")


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.2
    lane_change_threshold_mps2: float = 0.2
    safe_braking_mps2: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must lie in [0, 1]")
        if self.lane_change_threshold_mps2 <= 0:
            raise ValueError("lane change threshold must be positive")
        if self.safe_braking_mps2 <= 0:
            raise ValueError("safe braking limit must be positive")


def idm_acceleration(ego_speed: float, gap: float | None, leader_speed: float | None,
                     params: IdmParams, desired_velocity: float | None = None) -> float:
    """IDM acceleration clamped to ``[b, a]``.

    ``gap`` is bumper-to-bumper distance to the leader, ``None`` for free road.
    A non-positive gap returns the emergency value ``b``; callers flag it.
    """
    a = params.max_accel_mps2
    b = params.desired_decel_mps2
    v0 = params.desired_velocity_mps if desired_velocity is None else desired_velocity
    v = max(ego_speed, 0.0)
    acc = a * (1.0 - (v / v0) ** params.delta)
    if gap is not None:
        if gap <= 0.0:
            return b
        dv = v - leader_speed
        s_star = params.jam_distance_m + max(
            0.0, v * params.time_gap_s + v * dv / (2.0 * math.sqrt(a * abs(b)))
        )
        acc -= a * (s_star / gap) ** 2
    return min(max(acc, b), a)


def idm_equilibrium_gap(speed: float, params: IdmParams, desired_velocity: float | None = None) -> float:
    v0 = params.desired_velocity_mps if desired_velocity is None else desired_velocity
    s_star = params.jam_distance_m + speed * params.time_gap_s
    return s_star / math.sqrt(1.0 - (speed / v0) ** params.delta)


# ---------------------------------------------------------------- geometry


class Lane:
    """Lane centerline polyline with width and speed limit.

    ``arclength`` and ``headings`` default to chord sums and central
    differences; pass them explicitly when the polyline samples a known curve.
    """

    def __init__(self, points, width_m: float, speed_limit_mps: float,
                 arclength=None, headings=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("lane needs an (n>=2, 2) point array")
        if width_m <= 0:
            raise ValueError("lane width must be positive")
        seg = np.diff(pts, axis=0)
        if arclength is None:
            arclength = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
        arclength = np.asarray(arclength, dtype=np.float64)
        if np.any(np.diff(arclength) <= 0):
            raise ValueError("lane arclength must be strictly increasing")
        if headings is None:
            seg_h = np.arctan2(seg[:, 1], seg[:, 0])
            headings = np.empty(len(pts))
            headings[0] = seg_h[0]
            headings[-1] = seg_h[-1]
            # average of adjacent segment headings, unwrapped
            d = np.array([wrap_angle(x) for x in seg_h[1:] - seg_h[:-1]])
            headings[1:-1] = seg_h[:-1] + 0.5 * d
        self.points = pts
        self.width_m = float(width_m)
        self.speed_limit_mps = float(speed_limit_mps)
        self.arclength = arclength
        self.headings = np.asarray(headings, dtype=np.float64)
        self._seg = seg
        self._seg_len2 = np.einsum("ij,ij->i", seg, seg)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def project(self, x: float, y: float):
        """Closest-point projection: ``(s, l, tangent_heading, clamped)``."""
        p = np.array([x, y], dtype=np.float64)
        rel = p - self.points[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, self._seg) / self._seg_len2, 0.0, 1.0)
        proj = self.points[:-1] + t[:, None] * self._seg
        dist2 = np.einsum("ij,ij->i", p - proj, p - proj)
        i = int(np.argmin(dist2))
        ti = float(t[i])
        s = float(self.arclength[i] + ti * (self.arclength[i + 1] - self.arclength[i]))
        seg = self._seg[i]
        offset = p - proj[i]
        cross = seg[0] * offset[1] - seg[1] * offset[0]
        l = math.copysign(math.sqrt(float(dist2[i])), cross) if dist2[i] > 0 else 0.0
        h0, h1 = self.headings[i], self.headings[i + 1]
        heading = h0 + ti * wrap_angle(h1 - h0)
        clamped = (i == 0 and ti == 0.0 and np.dot(rel[0], seg) < 0) or (
            i == len(self._seg) - 1 and ti == 1.0 and np.dot(p - self.points[-1], seg) > 0
        )
        return s, l, float(heading), bool(clamped)

    def position(self, s: float, l: float = 0.0):
        """Global ``(x, y, heading)`` at arclength ``s`` and lateral offset ``l``."""
        s = min(max(s, self.arclength[0]), self.arclength[-1])
        i = int(np.searchsorted(self.arclength, s, side="right") - 1)
        i = min(max(i, 0), len(self.points) - 2)
        u = (s - self.arclength[i]) / (self.arclength[i + 1] - self.arclength[i])
        base = self.points[i] + u * self._seg[i]
        h = self.headings[i] + u * wrap_angle(self.headings[i + 1] - self.headings[i])
        return float(base[0] - l * math.sin(h)), float(base[1] + l * math.cos(h)), float(h)

    def to_dict(self) -> dict:
        return {
            "points_m": self.points.tolist(),
            "width_m": self.width_m,
            "speed_limit_mps": self.speed_limit_mps,
            "arclength_m": self.arclength.tolist(),
            "headings_rad": self.headings.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Lane":
        return cls(d["points_m"], d["width_m"], d["speed_limit_mps"],
                   d.get("arclength_m"), d.get("headings_rad"))


@dataclass(frozen=True)
class MergeSection:
    ramp_lane: int
    gore_s_m: float
    length_m: float
    target_lane: int

    def contains(self, s: float) -> bool:
        return self.gore_s_m <= s <= self.gore_s_m + self.length_m


class RoadGeometry:
    """Ordered lanes (index 0 rightmost) sharing lane 0's arclength."""

    def __init__(self, lanes, merge_sections=(), junction: dict | None = None):
        if not lanes:
            raise ValueError("geometry needs at least one lane")
        self.lanes = list(lanes)
        self.merge_sections = [m if isinstance(m, MergeSection) else MergeSection(**m)
                               for m in merge_sections]
        self.junction = junction
        ref = self.lanes[0]
        offsets = []
        for lane in self.lanes:
            mid = lane.points[len(lane.points) // 2]
            offsets.append(ref.project(*mid)[1])
        self.lane_offsets = np.array(offsets)
        for m in self.merge_sections:
            if not (0 <= m.ramp_lane < len(self.lanes) and 0 <= m.target_lane < len(self.lanes)):
                raise ValueError("merge section references a missing lane")
            if abs(m.ramp_lane - m.target_lane) != 1:
                raise ValueError("merge ramp must connect to exactly one adjacent main lane")

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    @property
    def length(self) -> float:
        return self.lanes[0].length

    @property
    def max_speed_limit(self) -> float:
        return max(l.speed_limit_mps for l in self.lanes)

    def lane_center(self, lane: int) -> float:
        return float(self.lane_offsets[lane])

    def lane_at(self, d: float) -> int:
        return int(np.argmin(np.abs(self.lane_offsets - d)))

    def pose(self, s: float, d: float, heading_offset: float = 0.0):
        x, y, h = self.lanes[0].position(s, d)
        return x, y, wrap_angle(h + heading_offset)

    def merge_section_at(self, lane: int, s: float) -> MergeSection | None:
        for m in self.merge_sections:
            if m.ramp_lane == lane and m.contains(s):
                return m
        return None

    def to_dict(self) -> dict:
        return {
            "lanes": [l.to_dict() for l in self.lanes],
            "merge_sections": [asdict(m) for m in self.merge_sections],
            "junction": self.junction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoadGeometry":
        return cls([Lane.from_dict(l) for l in d["lanes"]], d.get("merge_sections", ()),
                   d.get("junction"))


def straight_road(n_lanes=3, length_m=1000.0, width_m=3.5, speed_limits_mps=None,
                  merge_sections=(), origin=(0.0, 0.0), angle_rad=0.0, n_points=11,
                  junction=None) -> RoadGeometry:
    """Parallel straight lanes, lane 0 through ``origin`` along ``angle_rad``."""
    if speed_limits_mps is None:
        speed_limits_mps = [50.0 / 3.6] * n_lanes
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    u = np.linspace(0.0, length_m, n_points)
    lanes = []
    for i in range(n_lanes):
        off = i * width_m
        pts = np.stack([origin[0] + u * c - off * s, origin[1] + u * s + off * c], axis=1)
        lanes.append(Lane(pts, width_m, speed_limits_mps[i], arclength=u,
                          headings=np.full(n_points, angle_rad)))
    return RoadGeometry(lanes, merge_sections, junction)


def lane_coordinates(pose, geometry: RoadGeometry, lane_id: int):
    """Pose ``(x, y, heading)`` to ``(s, l, dtheta, clamped)`` in lane ``lane_id``."""
    x, y, heading = pose
    s, l, tangent, clamped = geometry.lanes[lane_id].project(x, y)
    return s, l, wrap_angle(heading - tangent), clamped


# ---------------------------------------------------------------- region


@dataclass
class RegionSpec:
    """Behaviour distribution for one region.

    ``spawn`` maps lane index (as str in JSON) to ``{"s_range_m", "speed_range_mps",
    "count_range"}``; ``ego_spawn`` holds ``lane``, ``s_range_m``,
    ``speed_range_mps``. ``idm_param_distribution`` maps IdmParams field names
    to ``[low, high]`` uniform ranges.
    """

    region_id: int
    geometry: RoadGeometry
    merge_lane_change_probability: float = 0.5
    idm_param_distribution: dict = field(default_factory=lambda: {"delta": [3.4, 4.5]})
    mobil: MobilParams = field(default_factory=MobilParams)
    merging_mobil: MobilParams = field(default_factory=MobilParams)
    spawn: dict = field(default_factory=dict)
    ego_spawn: dict = field(default_factory=lambda: {
        "lane": 1, "s_range_m": [20.0, 40.0], "speed_range_mps": [10.0, 13.0]})
    episode_horizon: int = 80
    min_env_vehicles: int = 4
    max_env_vehicles: int = 8
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.merge_lane_change_probability <= 1.0:
            raise ValueError("merge_lane_change_probability must lie in [0, 1]")
        self.spawn = {int(k): v for k, v in self.spawn.items()}
        length = self.geometry.length
        for lane, spec in list(self.spawn.items()) + [(self.ego_spawn["lane"], self.ego_spawn)]:
            if not 0 <= lane < self.geometry.n_lanes:
                raise ValueError(f"spawn lane {lane} not in geometry")
            lo, hi = spec["s_range_m"]
            if not 0.0 <= lo <= hi <= length:
                raise ValueError(f"spawn range {spec['s_range_m']} outside road [0, {length}]")
        if self.episode_horizon <= 0:
            raise ValueError("episode_horizon must be positive")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "region_id": self.region_id,
            "name": self.name,
            "geometry": self.geometry.to_dict(),
            "merge_lane_change_probability": self.merge_lane_change_probability,
            "idm_param_distribution": self.idm_param_distribution,
            "mobil": asdict(self.mobil),
            "merging_mobil": asdict(self.merging_mobil),
            "spawn": {str(k): v for k, v in self.spawn.items()},
            "ego_spawn": self.ego_spawn,
            "episode_horizon_steps": self.episode_horizon,
            "min_env_vehicles": self.min_env_vehicles,
            "max_env_vehicles": self.max_env_vehicles,
        }

    _KEYS = frozenset({"schema_version", "region_id", "name", "geometry", "merge_lane_change_probability",
                       "idm_param_distribution", "mobil", "merging_mobil", "spawn", "ego_spawn",
                       "episode_horizon_steps", "min_env_vehicles", "max_env_vehicles"})

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        unknown = set(d) - cls._KEYS
        if unknown:
            raise ValueError(f"unknown region fields: {sorted(unknown)}")
        return cls(
            region_id=int(d["region_id"]),
            name=d.get("name", ""),
            geometry=RoadGeometry.from_dict(d["geometry"]),
            merge_lane_change_probability=float(d["merge_lane_change_probability"]),
            idm_param_distribution=d.get("idm_param_distribution", {"delta": [3.4, 4.5]}),
            mobil=MobilParams(**d.get("mobil", {})),
            merging_mobil=MobilParams(**d.get("merging_mobil", {})),
            spawn=d.get("spawn", {}),
            ego_spawn=d["ego_spawn"],
            episode_horizon=int(d.get("episode_horizon_steps", 80)),
            min_env_vehicles=int(d.get("min_env_vehicles", 4)),
            max_env_vehicles=int(d.get("max_env_vehicles", 8)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RegionSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- agents


@dataclass
class VehicleAgent:
    id: int
    s: float
    d: float
    speed: float
    lane: int
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    is_ego: bool = False
    idm: IdmParams | None = None
    mobil: MobilParams | None = None
    merging: bool = False
    merge_gate: bool | None = None
    lc_from: int | None = None
    lc_elapsed: float = 0.0
    lc_start_d: float = 0.0
    lateral_speed: float = 0.0
    setpoint: float = 0.0
    accel: float = 0.0

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("vehicle dimensions must be positive")

    @property
    def changing_lane(self) -> bool:
        return self.lc_from is not None

    @property
    def heading_offset(self) -> float:
        return math.atan2(self.lateral_speed, max(self.speed, 1e-9)) if self.lateral_speed else 0.0

    def occupies(self, lane: int) -> bool:
        if self.lane == lane:
            return True
        return self.lc_from == lane and self.lc_elapsed < 0.5 * LANE_CHANGE_DURATION


@dataclass
class SimState:
    time: float
    agents: list
    ego_id: int
    rng: np.random.Generator
    region: RegionSpec
    step_count: int = 0
    terminal: bool = False
    terminal_cause: str | None = None

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if sum(a.is_ego for a in self.agents) != 1 or self.agent(self.ego_id) is None:
            raise ValueError("exactly one ego agent required")

    @property
    def region_id(self) -> int:
        return self.region.region_id

    @property
    def geometry(self) -> RoadGeometry:
        return self.region.geometry

    @property
    def ego(self) -> VehicleAgent:
        return self.agent(self.ego_id)

    def agent(self, agent_id: int) -> VehicleAgent | None:
        for a in self.agents:
            if a.id == agent_id:
                return a
        return None

    def pose(self, agent: VehicleAgent):
        return self.geometry.pose(agent.s, agent.d, agent.heading_offset)

    def copy(self) -> "SimState":
        return SimState(
            time=self.time,
            agents=[copy.copy(a) for a in self.agents],
            ego_id=self.ego_id,
            rng=copy.deepcopy(self.rng),
            region=self.region,
            step_count=self.step_count,
            terminal=self.terminal,
            terminal_cause=self.terminal_cause,
        )


@dataclass
class StepEvents:
    collisions: list = field(default_factory=list)
    ego_collision: bool = False
    off_road: bool = False
    horizon: bool = False
    lane_change_completed: bool = False
    lane_change_started: bool = False
    near_collisions: list = field(default_factory=list)
    env_lane_changes: list = field(default_factory=list)
    gate_draws: list = field(default_factory=list)
    impacted: list = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.ego_collision or self.off_road or self.horizon

    @property
    def terminal_cause(self) -> str | None:
        if self.ego_collision:
            return "collision"
        if self.off_road:
            return "off_road"
        if self.horizon:
            return "horizon"
        return None


# ---------------------------------------------------------------- collisions


def vehicle_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rectangles_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corners."""
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def detect_collisions(state: SimState) -> list:
    """Sorted ``(id_a, id_b)`` pairs (``id_a < id_b``) of overlapping vehicles."""
    boxes = []
    for a in state.agents:
        x, y, h = state.pose(a)
        boxes.append((a.id, x, y, h, a))
    pairs = []
    for i in range(len(boxes)):
        ida, xa, ya, ha, a = boxes[i]
        for j in range(i + 1, len(boxes)):
            idb, xb, yb, hb, b = boxes[j]
            reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
            if (xa - xb) ** 2 + (ya - yb) ** 2 > reach * reach:
                continue
            if rectangles_overlap(vehicle_corners(xa, ya, ha, a.length, a.width),
                                  vehicle_corners(xb, yb, hb, b.length, b.width)):
                pairs.append((min(ida, idb), max(ida, idb)))
    return sorted(pairs)


# ---------------------------------------------------------------- neighbours


def _gap(follower: VehicleAgent, leader: VehicleAgent) -> float:
    return leader.s - follower.s - 0.5 * (leader.length + follower.length)


def neighbours(agents, vehicle: VehicleAgent, lane: int):
    """Nearest leader and follower of ``vehicle`` among agents occupying ``lane``."""
    leader = follower = None
    for other in agents:
        if other is vehicle or not other.occupies(lane):
            continue
        if other.s >= vehicle.s:
            if leader is None or other.s < leader.s:
                leader = other
        elif follower is None or other.s > follower.s:
            follower = other
    return leader, follower


_EGO_MODEL = IdmParams()


def _model_accel(vehicle: VehicleAgent, leader: VehicleAgent | None, geometry: RoadGeometry,
                 lane: int | None = None) -> float:
    """IDM acceleration of ``vehicle`` behind ``leader`` (ego uses a reference IDM)."""
    params = vehicle.idm if vehicle.idm is not None else _EGO_MODEL
    lane = vehicle.lane if lane is None else lane
    v0 = min(params.desired_velocity_mps, geometry.lanes[lane].speed_limit_mps)
    if leader is None:
        return idm_acceleration(vehicle.speed, None, None, params, v0)
    return idm_acceleration(vehicle.speed, _gap(vehicle, leader), leader.speed, params, v0)


def mobil_decision(vehicle: VehicleAgent, agents, mobil: MobilParams, region: RegionSpec,
                   rng: np.random.Generator) -> str:
    """MOBIL lane choice: ``"left"``, ``"right"`` or ``"stay"``.

    A merging vehicle inside a merge section only ever moves toward the main
    lane, and only if its one-off gate draw (probability from ``region``)
    passed. The draw happens at the first MOBIL approval and is cached on the
    vehicle. Vehicles flagged ``merging`` never change lane elsewhere.
    """
    geometry = region.geometry
    if vehicle.changing_lane:
        return "stay"
    merge = None
    if vehicle.merging:
        merge = geometry.merge_section_at(vehicle.lane, vehicle.s)
        if merge is None or vehicle.merge_gate is False:
            return "stay"
    leader, follower = neighbours(agents, vehicle, vehicle.lane)
    a_self_old = _model_accel(vehicle, leader, geometry)
    best, best_gain = "stay", -math.inf
    for direction, target in (("left", vehicle.lane + 1), ("right", vehicle.lane - 1)):
        if not 0 <= target < geometry.n_lanes:
            continue
        if merge is not None and target != merge.target_lane:
            continue
        new_leader, new_follower = neighbours(agents, vehicle, target)
        if new_leader is not None and _gap(vehicle, new_leader) <= 0:
            continue
        if new_follower is not None and _gap(new_follower, vehicle) <= 0:
            continue
        a_self_new = _model_accel(vehicle, new_leader, geometry, target)
        if a_self_new < -mobil.safe_braking_mps2:
            continue
        gain_others = 0.0
        if new_follower is not None:
            nf_new = _model_accel(new_follower, vehicle, geometry, target)
            if nf_new < -mobil.safe_braking_mps2:
                continue
            nf_old = _model_accel(new_follower, new_leader, geometry, target)
            gain_others += nf_new - nf_old
        if follower is not None:
            of_old = _model_accel(follower, vehicle, geometry)
            of_new = _model_accel(follower, leader, geometry)
            gain_others += of_new - of_old
        incentive = a_self_new - a_self_old + mobil.politeness * gain_others
        if incentive > mobil.lane_change_threshold_mps2 and incentive > best_gain:
            best, best_gain = direction, incentive
    if best != "stay" and merge is not None:
        if vehicle.merge_gate is None:
            vehicle.merge_gate = bool(rng.random() < region.merge_lane_change_probability)
        if not vehicle.merge_gate:
            return "stay"
    return best


# ---------------------------------------------------------------- scenario


def sample_idm(region: RegionSpec, rng: np.random.Generator) -> IdmParams:
    kwargs = {}
    for name in ("desired_velocity_mps", "time_gap_s", "jam_distance_m", "delta",
                 "max_accel_mps2", "desired_decel_mps2"):
        rng_range = region.idm_param_distribution.get(name)
        if rng_range is not None:
            kwargs[name] = float(rng.uniform(rng_range[0], rng_range[1]))
    return IdmParams(**kwargs)


def _fits(agents, lane: int, s: float, length: float, min_gap: float) -> bool:
    for a in agents:
        if a.occupies(lane) and abs(a.s - s) - 0.5 * (a.length + length) < min_gap:
            return False
    return True


def sample_scenario(region: RegionSpec, seed: int) -> SimState:
    """Seeded initial state: ego plus environment vehicles per the region's spawn spec."""
    rng = np.random.default_rng(seed)
    geometry = region.geometry
    es = region.ego_spawn
    ego_lane = int(es["lane"])
    ego_speed = float(rng.uniform(*es["speed_range_mps"]))
    ego = VehicleAgent(
        id=0, s=float(rng.uniform(*es["s_range_m"])), d=geometry.lane_center(ego_lane),
        speed=ego_speed, lane=ego_lane, is_ego=True, setpoint=ego_speed,
    )
    agents = [ego]
    jam = min(region.idm_param_distribution.get("jam_distance_m", [IdmParams().jam_distance_m])[0],
              IdmParams().jam_distance_m)
    # how many vehicles each lane gets, total clipped to the region limits
    plan = []
    for lane in sorted(region.spawn):
        lo, hi = region.spawn[lane]["count_range"]
        plan.extend([lane] * int(rng.integers(lo, hi + 1)))
    rng.shuffle(plan)
    plan = plan[: region.max_env_vehicles]
    next_id = 1
    for lane in plan:
        spec = region.spawn[lane]
        placed = False
        for _attempt in range(100):
            s = float(rng.uniform(*spec["s_range_m"]))
            if _fits(agents, lane, s, VEHICLE_LENGTH, jam):
                placed = True
                break
        if not placed:
            logger.info("spawn space exhausted in lane %d, vehicle dropped", lane)
            continue
        idm = sample_idm(region, rng)
        speed = float(rng.uniform(*spec["speed_range_mps"]))
        merging = geometry.merge_sections and any(m.ramp_lane == lane for m in geometry.merge_sections)
        agents.append(VehicleAgent(
            id=next_id, s=s, d=geometry.lane_center(lane), speed=speed, lane=lane,
            idm=idm, mobil=region.merging_mobil if merging else region.mobil,
            merging=bool(merging),
        ))
        next_id += 1
    n_env = len(agents) - 1
    if n_env < region.min_env_vehicles and region.spawn:
        logger.info("only %d environment vehicles placed (min %d)", n_env, region.min_env_vehicles)
    return SimState(time=0.0, agents=agents, ego_id=0, rng=rng, region=region)


# ---------------------------------------------------------------- dynamics


def _start_lane_change(vehicle: VehicleAgent, target: int) -> None:
    vehicle.lc_from = vehicle.lane
    vehicle.lc_start_d = vehicle.d
    vehicle.lc_elapsed = 0.0
    vehicle.lane = target


def _advance_lateral(vehicle: VehicleAgent, geometry: RoadGeometry, h: float) -> bool:
    """Smoothstep lateral interpolation; returns True when a change completes."""
    if not vehicle.changing_lane:
        vehicle.lateral_speed = 0.0
        return False
    vehicle.lc_elapsed = min(vehicle.lc_elapsed + h, LANE_CHANGE_DURATION)
    u = vehicle.lc_elapsed / LANE_CHANGE_DURATION
    delta = geometry.lane_center(vehicle.lane) - vehicle.lc_start_d
    vehicle.d = vehicle.lc_start_d + delta * (3.0 * u * u - 2.0 * u ** 3)
    vehicle.lateral_speed = delta * 6.0 * u * (1.0 - u) / LANE_CHANGE_DURATION
    if u >= 1.0:
        vehicle.d = geometry.lane_center(vehicle.lane)
        vehicle.lc_from = None
        vehicle.lc_elapsed = 0.0
        vehicle.lateral_speed = 0.0
        return True
    return False


def apply_ego_action(state: SimState, action: int) -> bool:
    """Update the ego's setpoint or start a lane change. Returns True if a change started."""
    ego = state.ego
    geometry = state.geometry
    limit = geometry.lanes[ego.lane].speed_limit_mps
    if action == FASTER:
        ego.setpoint = min(ego.setpoint + SETPOINT_STEP, limit)
    elif action == SLOWER:
        ego.setpoint = max(ego.setpoint - SETPOINT_STEP, 0.0)
    elif action in (LANE_LEFT, LANE_RIGHT) and not ego.changing_lane:
        target = ego.lane + (1 if action == LANE_LEFT else -1)
        if 0 <= target < geometry.n_lanes:
            _start_lane_change(ego, target)
            ego.setpoint = min(ego.setpoint, geometry.lanes[target].speed_limit_mps)
            return True
    return False


def _impacted(state: SimState) -> list:
    """(target speed, speed) of env vehicles braking with the ego as IDM leader."""
    out = []
    ego = state.ego
    geometry = state.geometry
    for a in state.agents:
        if a.is_ego or a.accel >= 0.0:
            continue
        lanes = {a.lane} | ({a.lc_from} if a.changing_lane else set())
        for lane in lanes:
            leader, _ = neighbours(state.agents, a, lane)
            if leader is ego:
                v_target = min(a.idm.desired_velocity_mps, geometry.lanes[a.lane].speed_limit_mps)
                out.append((v_target, a.speed))
                break
    return out


def physics_step(state: SimState, h: float, events: StepEvents) -> None:
    geometry = state.geometry
    accels = []
    for a in state.agents:
        if a.is_ego:
            limit = geometry.lanes[a.lane].speed_limit_mps
            a.setpoint = min(a.setpoint, limit)
            acc = SPEED_GAIN * (a.setpoint - a.speed)
            acc = min(max(acc, _EGO_MODEL.desired_decel_mps2), _EGO_MODEL.max_accel_mps2)
        else:
            lanes = {a.lane} | ({a.lc_from} if a.changing_lane and a.occupies(a.lc_from) else set())
            acc = math.inf
            for lane in lanes:
                leader, _ = neighbours(state.agents, a, lane)
                if leader is not None and _gap(a, leader) <= 0.0:
                    events.near_collisions.append((a.id, leader.id))
                acc = min(acc, _model_accel(a, leader, geometry, lane))
        accels.append(acc)
    for a, acc in zip(state.agents, accels):
        a.accel = acc
        new_speed = max(a.speed + acc * h, 0.0)
        a.s += 0.5 * (a.speed + new_speed) * h
        a.speed = new_speed
        done = _advance_lateral(a, geometry, h)
        if done and a.is_ego:
            events.lane_change_completed = True
    state.time += h


def step(state: SimState, ego_action: int, dt: float = DECISION_DT, copy_state: bool = True):
    """Advance one decision period.

    The ego action is applied once, environment vehicles re-evaluate MOBIL,
    then kinematics integrate at ``PHYSICS_DT`` until ``dt`` has elapsed.

    Returns:
        ``(new_state, StepEvents)``.
    """
    if state.terminal:
        raise RuntimeError("cannot step a terminal state")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if ego_action not in range(N_ACTIONS):
        raise ValueError(f"action {ego_action!r} not in 0..{N_ACTIONS - 1}")
    if copy_state:
        state = state.copy()
    events = StepEvents()
    region = state.region
    geometry = state.geometry
    events.lane_change_started = apply_ego_action(state, ego_action)
    for a in state.agents:
        if a.is_ego or a.changing_lane:
            continue
        gate_before = a.merge_gate
        decision = mobil_decision(a, state.agents, a.mobil or region.mobil, region, state.rng)
        if gate_before is None and a.merge_gate is not None:
            events.gate_draws.append((a.id, a.merge_gate))
        if decision != "stay":
            _start_lane_change(a, a.lane + (1 if decision == "left" else -1))
            events.env_lane_changes.append((a.id, a.lc_from, a.lane))
    n_sub = max(1, int(round(dt / PHYSICS_DT)))
    h = dt / n_sub
    for _ in range(n_sub):
        physics_step(state, h, events)
        pairs = detect_collisions(state)
        for p in pairs:
            if p not in events.collisions:
                events.collisions.append(p)
        if any(state.ego_id in p for p in pairs):
            events.ego_collision = True
            break
    state.agents = [a for a in state.agents if a.is_ego or a.s <= geometry.length]
    ego = state.ego
    half_road = abs(ego.d - geometry.lane_center(ego.lane)) > geometry.lanes[ego.lane].width_m
    if ego.s > geometry.length or half_road:
        events.off_road = True
    state.step_count += 1
    if state.step_count >= region.episode_horizon:
        events.horizon = True
    events.impacted = _impacted(state)
    if events.done:
        state.terminal = True
        state.terminal_cause = events.terminal_cause
    return state, events
