"""Observation graph: vehicle nodes, regional road-node store, encoders, fusion.

Decision state per vehicle slot::

    x_slot = MLP_v(n_v) W0 + sum_j tanh(x_r[j]) W1

where ``x_r`` are GraphSAGE embeddings of the road nodes associated with the
slot, computed from ``MLP_r(n_r - n_ref)``. Without local information the sum
is dropped (common variant ``x_c``); with it we get the local variant ``x_l``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .nn import DenseNet, arrays_from_json, arrays_to_json, glorot_uniform
from .sim import (
    RegionSpec,
    RoadGeometry,
    SimState,
    lane_coordinates,
    sample_scenario,
    step,
    HOLD,
)

logger = logging.getLogger(__name__)

N_SLOTS = 7
VEHICLE_FEATURES = 6
MAX_LANES = 3
ROAD_FEATURES = 2 + MAX_LANES + 2
DEFAULT_AHEAD_M = 100.0
DEFAULT_BEHIND_M = 50.0

# feature scaling for (s, l, s_dot, l_dot, dtheta, present)
_VEHICLE_SCALE = np.array([50.0, 3.5, 15.0, 2.0, 0.3, 1.0])
# (ds, dl, lane one-hot x3, lane-change rate, speed ratio)
_ROAD_SCALE = np.array([50.0, 3.5, 1.0, 1.0, 1.0, 1.0, 1.0])


@dataclass
class VehicleNode:
    s: float = 0.0
    l: float = 0.0
    s_dot: float = 0.0
    l_dot: float = 0.0
    dtheta: float = 0.0
    present: bool = False
    agent_id: int | None = None
    lane: int | None = None
    abs_s: float = 0.0

    def features(self) -> np.ndarray:
        raw = np.array([self.s, self.l, self.s_dot, self.l_dot, self.dtheta, float(self.present)])
        return raw / _VEHICLE_SCALE


def build_vehicle_nodes(state: SimState) -> list:
    """Ego in slot 0, then the six others nearest in arclength (ties by id).

    ``s`` is relative to the ego; ``l`` and ``dtheta`` come from lane 0's
    coordinate system so lane identity survives.
    """
    geometry = state.geometry
    ego = state.ego
    coords = {}
    for a in state.agents:
        s, l, dth, _ = lane_coordinates(state.pose(a), geometry, 0)
        coords[a.id] = (s, l, dth)
    s_ego = coords[ego.id][0]
    others = sorted((a for a in state.agents if not a.is_ego),
                    key=lambda a: (abs(coords[a.id][0] - s_ego), a.id))
    nodes = []
    for a in [ego] + others[: N_SLOTS - 1]:
        s, l, dth = coords[a.id]
        nodes.append(VehicleNode(s - s_ego, l, a.speed, a.lateral_speed, dth, True,
                                 a.id, a.lane, s))
    while len(nodes) < N_SLOTS:
        nodes.append(VehicleNode())
    return nodes


def vehicle_features(nodes) -> np.ndarray:
    return np.stack([n.features() for n in nodes])


# ---------------------------------------------------------------- regional store


@dataclass
class RoadNode:
    id: int
    lane: int
    s: float
    l: float
    lane_change_rate: float = 0.0
    speed_ratio: float = 1.0
    predecessor: int | None = None

    def attributes(self) -> np.ndarray:
        onehot = np.zeros(MAX_LANES)
        onehot[min(self.lane, MAX_LANES - 1)] = 1.0
        return np.concatenate([[self.s, self.l], onehot, [self.lane_change_rate, self.speed_ratio]])


def node_spacing(speed_limit_mps: float) -> float:
    """Half the distance covered in one second at the speed limit."""
    return 0.5 * speed_limit_mps * 1.0


class RegionalStore:
    """Road nodes of one region with historical behaviour statistics.

    Nodes sit on each lane centerline every ``node_spacing(limit)`` metres and
    link to their same-lane predecessor. Optionally carries trained road
    encoder parameters.
    """

    def __init__(self, region_id: int, nodes, road_encoder: dict | None = None):
        self.region_id = region_id
        self.nodes = list(nodes)
        self.road_encoder = road_encoder
        self._index()

    def _index(self):
        self.by_id = {n.id: i for i, n in enumerate(self.nodes)}
        self.attrs = np.stack([n.attributes() for n in self.nodes]) if self.nodes else np.zeros((0, ROAD_FEATURES))
        self.lane_ids = {}
        for n in self.nodes:
            self.lane_ids.setdefault(n.lane, []).append(n.id)
        self.lane_s = {lane: np.array([self.nodes[self.by_id[i]].s for i in ids])
                       for lane, ids in self.lane_ids.items()}
        self.successor = {}
        for n in self.nodes:
            if n.predecessor is not None:
                self.successor[n.predecessor] = n.id

    @classmethod
    def from_geometry(cls, geometry: RoadGeometry, region_id: int) -> "RegionalStore":
        nodes = []
        for lane_idx, lane in enumerate(geometry.lanes):
            spacing = node_spacing(lane.speed_limit_mps)
            count = int(math.floor(geometry.length / spacing + 1e-9)) + 1
            prev = None
            for k in range(count):
                s = k * spacing
                x, y, _ = lane.position(s)
                s0, l0, _, _ = lane_coordinates((x, y, 0.0), geometry, 0)
                node = RoadNode(len(nodes), lane_idx, s0, l0, predecessor=prev)
                nodes.append(node)
                prev = node.id
        return cls(region_id, nodes)

    def set_statistics(self, lane_change_rate: np.ndarray, speed_ratio: np.ndarray) -> None:
        for n, r, v in zip(self.nodes, lane_change_rate, speed_ratio):
            n.lane_change_rate = float(r)
            n.speed_ratio = float(v)
        self._index()

    def nearest_in_lane(self, lane: int, s: float) -> int | None:
        arr = self.lane_s.get(lane)
        if arr is None or len(arr) == 0:
            return None
        return self.lane_ids[lane][int(np.argmin(np.abs(arr - s)))]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "region_id": self.region_id,
            "nodes": [
                {"id": n.id, "lane": n.lane, "s_m": n.s, "l_m": n.l,
                 "lane_change_rate": n.lane_change_rate, "speed_ratio": n.speed_ratio,
                 "predecessor": n.predecessor}
                for n in self.nodes
            ],
            "road_encoder": self.road_encoder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionalStore":
        nodes = [RoadNode(n["id"], n["lane"], n["s_m"], n["l_m"], n["lane_change_rate"],
                          n["speed_ratio"], n["predecessor"]) for n in d["nodes"]]
        return cls(int(d["region_id"]), nodes, d.get("road_encoder"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RegionalStore":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_region_statistics(region: RegionSpec, store: RegionalStore, n_episodes: int = 100,
                              seed: int = 10_000) -> RegionalStore:
    """Fill per-node statistics from logged episodes driven by a holding ego.

    ``lane_change_rate``: fraction of distinct vehicles seen at the node that
    later start a lane change out of that lane. ``speed_ratio``: mean observed
    speed over the lane speed limit.
    """
    n = len(store.nodes)
    seen = np.zeros(n)
    changed = np.zeros(n)
    speed_sum = np.zeros(n)
    speed_cnt = np.zeros(n)
    geometry = region.geometry
    for ep in range(n_episodes):
        state = sample_scenario(region, seed + ep)
        visits = {}  # agent id -> set of node ids seen in its current lane
        while True:
            for a in state.agents:
                if a.is_ego or a.changing_lane:
                    continue
                nid = store.nearest_in_lane(a.lane, a.s)
                if nid is None:
                    continue
                i = store.by_id[nid]
                visits.setdefault(a.id, set()).add(i)
                speed_sum[i] += a.speed / geometry.lanes[a.lane].speed_limit_mps
                speed_cnt[i] += 1
            state, events = step(state, HOLD, copy_state=False)
            for agent_id, _from, _to in events.env_lane_changes:
                for i in visits.pop(agent_id, ()):
                    seen[i] += 1
                    changed[i] += 1
            if events.done:
                break
        for nodes_seen in visits.values():
            for i in nodes_seen:
                seen[i] += 1
    rate = np.divide(changed, seen, out=np.zeros(n), where=seen > 0)
    ratio = np.divide(speed_sum, speed_cnt, out=np.ones(n), where=speed_cnt > 0)
    store.set_statistics(rate, ratio)
    return store


def build_regional_store(region: RegionSpec, n_episodes: int = 100, seed: int = 10_000) -> RegionalStore:
    store = RegionalStore.from_geometry(region.geometry, region.region_id)
    return collect_region_statistics(region, store, n_episodes, seed)


# ---------------------------------------------------------------- road graph


@dataclass
class RoadGraph:
    """Windowed road graph around the ego.

    ``nodes`` are store node ids; ``edges`` are (node, predecessor) pairs
    using positions in ``nodes``; ``associations`` are (slot, node position).
    """

    region_id: int
    nodes: list
    attrs: np.ndarray
    edges: list
    reference: int | None
    associations: list = field(default_factory=list)
    outside: bool = False

    def relative_attrs(self) -> np.ndarray:
        if self.reference is None:
            return np.zeros((0, ROAD_FEATURES))
        return self.attrs - self.attrs[self.reference]

    def mean_matrix(self) -> sp.csr_matrix:
        """Row-normalised undirected adjacency (neighbour mean operator)."""
        n = len(self.nodes)
        if not self.edges:
            return sp.csr_matrix((n, n))
        e = np.array(self.edges)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        return sp.csr_matrix((1.0 / deg[rows], (rows, cols)), shape=(n, n))


def build_road_graph(geometry: RoadGeometry, ego_pose, store: RegionalStore,
                     ahead_m: float = DEFAULT_AHEAD_M, behind_m: float = DEFAULT_BEHIND_M,
                     vehicles=None) -> RoadGraph:
    """Road nodes within ``[s_ego - behind_m, s_ego + ahead_m]``.

    ``vehicles`` (optional VehicleNode list) adds associations: for each
    present slot the node just behind and the two just ahead in its lane.
    """
    if ahead_m + behind_m <= 0:
        raise ValueError("window must be positive")
    s_ego, l_ego, _, clamped = lane_coordinates(ego_pose, geometry, 0)
    road_width = sum(l.width_m for l in geometry.lanes)
    if clamped or l_ego < -geometry.lanes[0].width_m or l_ego > road_width:
        return RoadGraph(store.region_id, [], np.zeros((0, ROAD_FEATURES)), [], None, outside=True)
    eps = 1e-9
    keep = [i for i, n in enumerate(store.nodes)
            if s_ego - behind_m - eps <= n.s <= s_ego + ahead_m + eps]
    if not keep:
        return RoadGraph(store.region_id, [], np.zeros((0, ROAD_FEATURES)), [], None, outside=True)
    pos = {store.nodes[i].id: k for k, i in enumerate(keep)}
    edges = []
    for k, i in enumerate(keep):
        pred = store.nodes[i].predecessor
        if pred is not None and pred in pos:
            edges.append((k, pos[pred]))
    attrs = store.attrs[keep]
    d2 = (attrs[:, 0] - s_ego) ** 2 + (attrs[:, 1] - l_ego) ** 2
    reference = int(np.argmin(d2))
    associations = []
    if vehicles is not None:
        for slot, v in enumerate(vehicles):
            if not v.present or v.lane is None:
                continue
            for nid in _associated(store, v.lane, v.abs_s):
                if nid in pos:
                    associations.append((slot, pos[nid]))
    return RoadGraph(store.region_id, [store.nodes[i].id for i in keep], attrs, edges, reference,
                     associations)


def _associated(store: RegionalStore, lane: int, s: float) -> list:
    arr = store.lane_s.get(lane)
    if arr is None:
        return []
    ids = store.lane_ids[lane]
    k = int(np.searchsorted(arr, s, side="right"))  # first node strictly ahead
    out = []
    if k - 1 >= 0:
        out.append(ids[k - 1])
    out.extend(ids[k: k + 2])
    return out


@dataclass
class GraphObs:
    """Per-sample graph input trimmed to what the associated nodes can see.

    ``mean_rows/cols/vals`` encode the neighbour-mean operator (degrees from
    the full window graph); ``assoc`` is an (m, 2) array of (slot, node).
    """

    rel_attrs: np.ndarray
    mean_rows: np.ndarray
    mean_cols: np.ndarray
    mean_vals: np.ndarray
    assoc: np.ndarray


def observe_graph(graph: RoadGraph, depth: int = 2, prune: bool = True) -> GraphObs:
    n = len(graph.nodes)
    m = graph.mean_matrix().tocoo()
    assoc = np.array(graph.associations, dtype=np.int64).reshape(-1, 2)
    rel = graph.relative_attrs()
    if not prune or n == 0:
        return GraphObs(rel, m.row.astype(np.int64), m.col.astype(np.int64), m.data, assoc)
    # k-hop closure of associated nodes
    adj = [[] for _ in range(n)]
    for r, c in zip(m.row, m.col):
        adj[r].append(c)
    frontier = set(int(j) for j in assoc[:, 1])
    keep = set(frontier)
    for _ in range(depth):
        frontier = {c for r in frontier for c in adj[r]} - keep
        keep |= frontier
    keep = sorted(keep)
    remap = -np.ones(n, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = (remap[m.row] >= 0) & (remap[m.col] >= 0)
    new_assoc = assoc.copy()
    if len(assoc):
        new_assoc[:, 1] = remap[assoc[:, 1]]
    return GraphObs(rel[keep], remap[m.row[mask]], remap[m.col[mask]], m.data[mask], new_assoc)


@dataclass
class GraphBatch:
    rel_attrs: np.ndarray
    mean: sp.csr_matrix
    assoc: sp.csr_matrix  # (batch * N_SLOTS, total nodes)


def batch_graphs(obs_list) -> GraphBatch:
    attrs, rows, cols, vals, a_rows, a_cols = [], [], [], [], [], []
    offset = 0
    for b, g in enumerate(obs_list):
        attrs.append(g.rel_attrs)
        rows.append(g.mean_rows + offset)
        cols.append(g.mean_cols + offset)
        vals.append(g.mean_vals)
        if len(g.assoc):
            a_rows.append(g.assoc[:, 0] + b * N_SLOTS)
            a_cols.append(g.assoc[:, 1] + offset)
        offset += len(g.rel_attrs)
    total = offset
    rel = np.concatenate(attrs) if attrs else np.zeros((0, ROAD_FEATURES))
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    mean = sp.csr_matrix((cat(vals, np.float64), (cat(rows, np.int64), cat(cols, np.int64))),
                         shape=(total, total))
    ar, ac = cat(a_rows, np.int64), cat(a_cols, np.int64)
    assoc = sp.csr_matrix((np.ones(len(ar)), (ar, ac)), shape=(len(obs_list) * N_SLOTS, total))
    return GraphBatch(rel, mean, assoc)


# ---------------------------------------------------------------- encoders


class EncoderBundle:
    """Vehicle encoder, road encoder, GraphSAGE weights and fusion matrices."""

    def __init__(self, d: int = 32, hidden: int = 32, depth: int = 2,
                 rng: np.random.Generator | None = None):
        self.d = d
        self.depth = depth
        self.vehicle_enc = DenseNet([VEHICLE_FEATURES, hidden, d], ["relu", "identity"], rng)
        self.road_enc = DenseNet([ROAD_FEATURES, hidden, d], ["relu", "identity"], rng)
        if rng is None:
            self.w0 = np.zeros((d, d))
            self.w1 = np.zeros((d, d))
            self.sage = [np.zeros((2 * d, d)) for _ in range(depth)]
        else:
            self.w0 = glorot_uniform(rng, d, d)
            self.w1 = glorot_uniform(rng, d, d)
            self.sage = [glorot_uniform(rng, 2 * d, d) for _ in range(depth)]

    @property
    def state_dim(self) -> int:
        return N_SLOTS * self.d

    def params(self) -> list:
        return self.vehicle_enc.params() + self.road_enc.params() + [self.w0, self.w1] + self.sage

    def group_slices(self) -> dict:
        nv = len(self.vehicle_enc.params())
        nr = len(self.road_enc.params())
        return {
            "vehicle_enc": slice(0, nv),
            "road_enc": slice(nv, nv + nr),
            "w0": slice(nv + nr, nv + nr + 1),
            "w1": slice(nv + nr + 1, nv + nr + 2),
            "sage": slice(nv + nr + 2, nv + nr + 2 + self.depth),
        }

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def copy(self) -> "EncoderBundle":
        enc = EncoderBundle(self.d, self.vehicle_enc.layer_sizes[1], self.depth)
        for dst, src in zip(enc.params(), self.params()):
            dst[...] = src
        return enc

    def road_params(self) -> list:
        return self.road_enc.params() + self.sage

    # -- single-item operations

    def encode_vehicle(self, node: VehicleNode) -> np.ndarray:
        return self.vehicle_enc(node.features())

    def encode_road(self, node_attrs: np.ndarray, reference_attrs: np.ndarray) -> np.ndarray:
        return self.road_enc((np.asarray(node_attrs) - np.asarray(reference_attrs)) / _ROAD_SCALE)

    # -- batched forward/backward

    def forward(self, vfeat: np.ndarray, graphs: GraphBatch | None):
        """Encode a batch.

        Args:
            vfeat: ``(B, 7, 6)`` scaled vehicle features.
            graphs: batched road graphs, or ``None`` for the common variant only.

        Returns:
            ``(x_c, x_l, ctx)`` with ``x_c``/``x_l`` of shape ``(B, 7*d)``;
            ``x_l`` is ``None`` when ``graphs`` is ``None``.
        """
        B = vfeat.shape[0]
        xv, vctx = self.vehicle_enc.forward(vfeat.reshape(B * N_SLOTS, VEHICLE_FEATURES))
        base = xv @ self.w0
        ctx = {"B": B, "xv": xv, "vctx": vctx}
        x_c = base.reshape(B, -1)
        if graphs is None:
            return x_c, None, ctx
        h0, rctx = self.road_enc.forward(graphs.rel_attrs / _ROAD_SCALE)
        hs, sage_ctx = sage_forward(graphs.mean, h0, self.sage)
        sig = np.tanh(hs[-1])
        pooled = graphs.assoc @ sig
        local = pooled @ self.w1
        ctx.update(rctx=rctx, sage_ctx=sage_ctx, sig=sig, pooled=pooled, graphs=graphs)
        return x_c, (base + local).reshape(B, -1), ctx

    def backward(self, ctx, g_xc=None, g_xl=None) -> list:
        """Gradients aligned with :meth:`params` given dL/dx_c and dL/dx_l."""
        B = ctx["B"]
        d = self.d
        grads = [np.zeros_like(p) for p in self.params()]
        sl = self.group_slices()
        g_base = np.zeros((B * N_SLOTS, d))
        if g_xc is not None:
            g_base += g_xc.reshape(B * N_SLOTS, d)
        if g_xl is not None:
            if "graphs" not in ctx:
                raise RuntimeError("x_l gradient given but forward ran without graphs")
            g_l = g_xl.reshape(B * N_SLOTS, d)
            g_base += g_l
            grads[sl["w1"]][0][...] = ctx["pooled"].T @ g_l
            g_pooled = g_l @ self.w1.T
            g_sig = ctx["graphs"].assoc.T @ g_pooled
            g_h = g_sig * (1.0 - ctx["sig"] ** 2)
            g_sage, g_h0 = sage_backward(ctx["graphs"].mean, self.sage, ctx["sage_ctx"], g_h)
            for dst, src in zip(grads[sl["sage"]], g_sage):
                dst[...] = src
            rgrads, _ = self.road_enc.backward(ctx["rctx"], g_h0)
            for dst, src in zip(grads[sl["road_enc"]], rgrads):
                dst[...] = src
        grads[sl["w0"]][0][...] = ctx["xv"].T @ g_base
        g_xv = g_base @ self.w0.T
        vgrads, _ = self.vehicle_enc.backward(ctx["vctx"], g_xv)
        for dst, src in zip(grads[sl["vehicle_enc"]], vgrads):
            dst[...] = src
        return grads

    def to_arrays(self, prefix="enc") -> dict:
        return {f"{prefix}.{i}": p for i, p in enumerate(self.params())}

    def load_arrays(self, arrays: dict, prefix="enc") -> None:
        for i, p in enumerate(self.params()):
            p[...] = arrays[f"{prefix}.{i}"]

    def road_encoder_dict(self) -> dict:
        return arrays_to_json({f"road.{i}": p for i, p in enumerate(self.road_params())})

    def load_road_encoder_dict(self, data: dict) -> None:
        arrays = arrays_from_json(data)
        for i, p in enumerate(self.road_params()):
            p[...] = arrays[f"road.{i}"]


def sage_forward(mean, h0: np.ndarray, weights):
    """GraphSAGE mean/concat aggregation with tanh nonlinearities.

    ``mean`` is the row-normalised neighbour operator (rows of isolated nodes
    are empty, giving a zero neighbour mean). Returns ``(hs, ctx)`` with
    ``hs[0] = h0`` and ``hs[k]`` the depth-k embeddings.
    """
    hs = [h0]
    ctx = []
    h = h0
    for w in weights:
        nb = np.tanh(mean @ h)
        cat = np.concatenate([h, nb], axis=1)
        h = np.tanh(cat @ w)
        ctx.append((nb, cat, h))
        hs.append(h)
    return hs, ctx


def sage_backward(mean, weights, ctx, g_out: np.ndarray):
    d = g_out.shape[1]
    g_ws = [None] * len(weights)
    g = g_out
    for k in range(len(weights) - 1, -1, -1):
        nb, cat, h = ctx[k]
        gz = g * (1.0 - h * h)
        g_ws[k] = cat.T @ gz
        g_cat = gz @ weights[k].T
        g_prev = g_cat[:, :d].copy()
        g_nb = g_cat[:, d:] * (1.0 - nb * nb)
        g_prev += mean.T @ g_nb
        g = g_prev
    return g_ws, g


def sage_aggregate(graph: RoadGraph, embeddings: np.ndarray, enc: EncoderBundle,
                   depth: int | None = None) -> np.ndarray:
    """Per-node embeddings after ``depth`` aggregation rounds (default: all)."""
    depth = enc.depth if depth is None else depth
    if depth < 1 or depth > len(enc.sage):
        raise ValueError(f"depth must lie in [1, {len(enc.sage)}]")
    hs, _ = sage_forward(graph.mean_matrix(), np.asarray(embeddings, dtype=np.float64),
                         enc.sage[:depth])
    return hs[-1]


@dataclass
class EncodedState:
    x: np.ndarray
    variant: str  # "common" or "local"

    def __post_init__(self):
        if self.variant not in ("common", "local"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("encoded state must be finite")


def fuse(x_v: np.ndarray, x_r: list | None, enc: EncoderBundle) -> EncodedState:
    """Fuse per-slot vehicle encodings with associated road embeddings.

    Args:
        x_v: ``(7, d)`` vehicle encodings.
        x_r: per-slot list of ``(m_i, d)`` road embeddings, or ``None`` to
            disable local information.
    """
    x_v = np.asarray(x_v)
    base = x_v @ enc.w0
    if x_r is None:
        return EncodedState(base.ravel(), "common")
    out = base.copy()
    for i, rows in enumerate(x_r):
        if rows is not None and len(rows):
            out[i] += np.tanh(np.asarray(rows)).sum(axis=0) @ enc.w1
    return EncodedState(out.ravel(), "local")


@dataclass
class Observation:
    """Raw observation kept in replay buffers; encoders re-run on it."""

    vfeat: np.ndarray  # (7, 6)
    graph: GraphObs | None

    @property
    def state_vec(self) -> np.ndarray:
        """Flat 35-dim vehicle attribute vector (scaled, presence dropped)."""
        return self.vfeat[:, :5].ravel()


def observe(state: SimState, store: RegionalStore | None, depth: int = 2,
            ahead_m: float = DEFAULT_AHEAD_M, behind_m: float = DEFAULT_BEHIND_M) -> Observation:
    nodes = build_vehicle_nodes(state)
    vfeat = vehicle_features(nodes)
    graph = None
    if store is not None:
        rg = build_road_graph(state.geometry, state.pose(state.ego), store, ahead_m, behind_m, nodes)
        graph = observe_graph(rg, depth)
    return Observation(vfeat, graph)


def encode_observation(enc: EncoderBundle, obs: Observation, local: bool) -> EncodedState:
    graphs = batch_graphs([obs.graph]) if (local and obs.graph is not None) else None
    x_c, x_l, _ = enc.forward(obs.vfeat[None], graphs)
    if graphs is None:
        return EncodedState(x_c[0], "common")
    return EncodedState(x_l[0], "local")
