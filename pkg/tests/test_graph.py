import math

import numpy as np
import pytest

from dle.graph import (
    N_SLOTS,
    ROAD_FEATURES,
    EncoderBundle,
    RegionalStore,
    RoadGraph,
    batch_graphs,
    build_road_graph,
    build_regional_store,
    build_vehicle_nodes,
    encode_observation,
    fuse,
    node_spacing,
    observe,
    observe_graph,
    sage_aggregate,
)
from dle.regions import region_one, region_two
from dle.sim import HOLD, MergeSection, RegionSpec, sample_scenario, step, straight_road


@pytest.fixture(scope="module")
def stores():
    return {1: build_regional_store(region_one(), 20), 2: build_regional_store(region_two(), 20)}


def dense_sage_oracle(n, edges, h0, weights):
    """Loop-based GraphSAGE over an explicit neighbour list."""
    nbrs = [set() for _ in range(n)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    h = np.array(h0, dtype=np.float64)
    for w in weights:
        new = np.zeros((n, w.shape[1]))
        for i in range(n):
            mean = np.zeros(h.shape[1])
            if nbrs[i]:
                mean = sum(h[j] for j in nbrs[i]) / len(nbrs[i])
            new[i] = np.tanh(np.concatenate([h[i], np.tanh(mean)]) @ w)
        h = new
    return h


def test_sage_matches_dense_oracle():
    rng = np.random.default_rng(0)
    enc = EncoderBundle(d=4, hidden=4, depth=2, rng=rng)
    for _ in range(500):
        n = int(rng.integers(1, 6))
        edges = [(i, int(rng.integers(0, i))) for i in range(1, n) if rng.random() < 0.7]
        g = RoadGraph(1, list(range(n)), np.zeros((n, ROAD_FEATURES)), edges, 0)
        h0 = rng.normal(size=(n, 4))
        k = int(rng.integers(1, 3))
        got = sage_aggregate(g, h0, enc, depth=k)
        want = dense_sage_oracle(n, edges, h0, enc.sage[:k])
        assert np.max(np.abs(got - want)) <= 1e-6


def test_sage_depth_out_of_range():
    enc = EncoderBundle(d=4, hidden=4, depth=2, rng=np.random.default_rng(0))
    g = RoadGraph(1, [0], np.zeros((1, ROAD_FEATURES)), [], 0)
    with pytest.raises(ValueError):
        sage_aggregate(g, np.zeros((1, 4)), enc, depth=3)


# ---------------------------------------------------------------- vehicle nodes


def test_vehicle_slots_sorted_by_distance_then_id():
    state = sample_scenario(region_two(), 1)
    nodes = build_vehicle_nodes(state)
    assert len(nodes) == N_SLOTS
    assert nodes[0].agent_id == state.ego_id and nodes[0].s == 0.0
    others = [a for a in state.agents if not a.is_ego]
    brute = sorted(others, key=lambda a: (abs(a.s - state.ego.s), a.id))[: N_SLOTS - 1]
    present = [n for n in nodes[1:] if n.present]
    assert [n.agent_id for n in present] == [a.id for a in brute]
    for n in nodes[1 + len(present):]:
        assert not n.present and np.all(n.features() == 0)


def test_vehicle_features_scaled():
    state = sample_scenario(region_one(), 0)
    f = build_vehicle_nodes(state)[0].features()
    assert f[0] == 0.0 and f[5] == 1.0
    assert f[2] == pytest.approx(state.ego.speed / 15.0)


# ---------------------------------------------------------------- store


def test_store_node_spacing_and_predecessors():
    geo = straight_road(n_lanes=2, length_m=100.0, speed_limits_mps=[10.0, 20.0])
    store = RegionalStore.from_geometry(geo, 1)
    assert node_spacing(10.0) == 5.0
    lane0 = [n for n in store.nodes if n.lane == 0]
    lane1 = [n for n in store.nodes if n.lane == 1]
    assert len(lane0) == 21 and len(lane1) == 11
    assert lane0[0].predecessor is None
    for prev, cur in zip(lane0, lane0[1:]):
        assert cur.predecessor == prev.id and cur.s - prev.s == pytest.approx(5.0)
    assert lane1[0].l == pytest.approx(3.5)


def test_store_round_trip(tmp_path, stores):
    stores[2].save(tmp_path / "s.json")
    back = RegionalStore.load(tmp_path / "s.json")
    assert back.to_dict() == stores[2].to_dict()
    assert np.array_equal(back.attrs, stores[2].attrs)


def test_statistics_separate_regions(stores):
    # the merge lane carries the region's behaviour in its lane-change rate
    def merge_rate(store):
        rates = [n.lane_change_rate for n in store.nodes if n.lane == 0 and 60 <= n.s <= 220]
        return float(np.mean(rates))

    assert merge_rate(stores[2]) > 2 * merge_rate(stores[1])
    for s in stores.values():
        assert all(0.0 <= n.lane_change_rate <= 1.0 for n in s.nodes)


def test_association_one_behind_two_ahead(stores):
    store = stores[1]
    state = sample_scenario(region_one(), 0)
    nodes = build_vehicle_nodes(state)
    g = build_road_graph(state.geometry, state.pose(state.ego), store, vehicles=nodes)
    ego_nodes = [store.nodes[store.by_id[g.nodes[p]]] for slot, p in g.associations if slot == 0]
    assert len(ego_nodes) == 3
    ss = sorted(n.s for n in ego_nodes)
    assert ss[0] <= state.ego.s < ss[1] < ss[2]
    assert all(n.lane == state.ego.lane for n in ego_nodes)


def test_graph_window_and_reference(stores):
    store = stores[1]
    state = sample_scenario(region_one(), 0)
    g = build_road_graph(state.geometry, state.pose(state.ego), store, ahead_m=40, behind_m=10)
    s = [store.nodes[store.by_id[i]].s for i in g.nodes]
    assert min(s) >= state.ego.s - 10 - 1e-9 and max(s) <= state.ego.s + 40 + 1e-9
    assert np.all(g.relative_attrs()[g.reference] == 0)


def test_graph_outside_road_is_empty(stores):
    state = sample_scenario(region_one(), 0)
    g = build_road_graph(state.geometry, (0.0, 500.0, 0.0), stores[1])
    assert g.outside and g.nodes == []


# ---------------------------------------------------------------- encoding


def _obs_batch(stores, n=4, region=None, seed=0, prune=True):
    region = region or region_two()
    out = []
    state = sample_scenario(region, seed)
    for _ in range(n):
        obs = observe(state, stores[region.region_id])
        if not prune:
            nodes = build_vehicle_nodes(state)
            rg = build_road_graph(state.geometry, state.pose(state.ego), stores[region.region_id],
                                  vehicles=nodes)
            obs.graph = observe_graph(rg, 2, prune=False)
        out.append(obs)
        state, _ = step(state, HOLD)
    return out


def test_pruned_graph_gives_same_embedding(stores):
    enc = EncoderBundle(d=8, hidden=8, rng=np.random.default_rng(1))
    full = _obs_batch(stores, prune=False)
    pruned = _obs_batch(stores, prune=True)
    for a, b in zip(full, pruned):
        assert len(b.graph.rel_attrs) <= len(a.graph.rel_attrs)
        xa = encode_observation(enc, a, True).x
        xb = encode_observation(enc, b, True).x
        assert np.max(np.abs(xa - xb)) < 1e-12


def test_batched_forward_matches_single(stores):
    enc = EncoderBundle(d=8, hidden=8, rng=np.random.default_rng(2))
    obs = _obs_batch(stores, 5)
    vfeat = np.stack([o.vfeat for o in obs])
    x_c, x_l, _ = enc.forward(vfeat, batch_graphs([o.graph for o in obs]))
    for i, o in enumerate(obs):
        np.testing.assert_allclose(x_l[i], encode_observation(enc, o, True).x, atol=1e-12)
        np.testing.assert_allclose(x_c[i], encode_observation(enc, o, False).x, atol=1e-12)


def test_fuse_matches_batched_forward(stores):
    enc = EncoderBundle(d=8, hidden=8, depth=2, rng=np.random.default_rng(3))
    o = _obs_batch(stores, 1)[0]
    x_v = enc.vehicle_enc(o.vfeat)
    gb = batch_graphs([o.graph])
    from dle.graph import sage_forward

    h0 = enc.road_enc(gb.rel_attrs / np.array([50.0, 3.5, 1, 1, 1, 1, 1]))
    h = sage_forward(gb.mean, h0, enc.sage)[0][-1]
    x_r = [h[o.graph.assoc[o.graph.assoc[:, 0] == i, 1]] for i in range(N_SLOTS)]
    np.testing.assert_allclose(fuse(x_v, x_r, enc).x, encode_observation(enc, o, True).x, atol=1e-12)
    assert fuse(x_v, None, enc).variant == "common"


def test_zero_w1_makes_local_equal_common(stores):
    enc = EncoderBundle(d=8, hidden=8, rng=np.random.default_rng(4))
    enc.w1[...] = 0.0
    for o in _obs_batch(stores, 4):
        assert np.array_equal(encode_observation(enc, o, True).x, encode_observation(enc, o, False).x)


def test_missing_store_falls_back_to_common(stores):
    enc = EncoderBundle(d=8, hidden=8, rng=np.random.default_rng(5))
    state = sample_scenario(region_two(), 0)
    obs = observe(state, None)
    assert obs.graph is None
    e = encode_observation(enc, obs, local=True)
    assert e.variant == "common"
    assert np.array_equal(e.x, encode_observation(enc, observe(state, stores[2]), False).x)


def _shifted_region(base: RegionSpec, origin, angle) -> RegionSpec:
    d = base.to_dict()
    geo = base.geometry
    shifted = straight_road(n_lanes=geo.n_lanes, length_m=geo.length,
                            speed_limits_mps=[l.speed_limit_mps for l in geo.lanes],
                            merge_sections=geo.merge_sections, origin=origin, angle_rad=angle)
    d["geometry"] = shifted.to_dict()
    return RegionSpec.from_dict(d)


def test_scene_translation_invariance():
    base = region_two()
    moved = _shifted_region(base, (1234.5, -987.0), 0.7)
    enc = EncoderBundle(d=8, hidden=8, rng=np.random.default_rng(6))
    sa = build_regional_store(base, 5)
    sb = build_regional_store(moved, 5)
    a = sample_scenario(base, 3)
    b = sample_scenario(moved, 3)
    for _ in range(10):
        oa, ob = observe(a, sa), observe(b, sb)
        for local in (False, True):
            xa = encode_observation(enc, oa, local).x
            xb = encode_observation(enc, ob, local).x
            assert np.max(np.abs(xa - xb)) <= 1e-9
        a, _ = step(a, HOLD)
        b, _ = step(b, HOLD)


def _numeric(f, arrays, eps=1e-6):
    out = []
    for p in arrays:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            up = f()
            p[i] = old - eps
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def test_encoder_gradients_match_finite_differences(stores):
    rng = np.random.default_rng(7)
    enc = EncoderBundle(d=3, hidden=4, depth=2, rng=rng)
    for p in enc.params():
        if p.ndim == 1:
            p[...] = rng.uniform(0.05, 0.3, size=p.shape)
    obs = _obs_batch(stores, 2)
    vfeat = np.stack([o.vfeat for o in obs])
    gb = batch_graphs([o.graph for o in obs])
    wc = rng.normal(size=(2, N_SLOTS * 3))
    wl = rng.normal(size=(2, N_SLOTS * 3))

    def loss():
        x_c, x_l, _ = enc.forward(vfeat, gb)
        return float(np.sum(x_c * wc) + np.sum(x_l * wl))

    _, _, ctx = enc.forward(vfeat, gb)
    grads = enc.backward(ctx, wc, wl)
    num = _numeric(loss, enc.params())
    for a, b in zip(grads, num):
        denom = max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))
        assert np.max(np.abs(a - b)) / denom < 1e-4


def test_backward_local_without_graph_raises():
    enc = EncoderBundle(d=3, hidden=4, rng=np.random.default_rng(0))
    _, _, ctx = enc.forward(np.zeros((1, N_SLOTS, 6)), None)
    with pytest.raises(RuntimeError):
        enc.backward(ctx, None, np.zeros((1, N_SLOTS * 3)))


def test_encoder_serialisation_round_trip():
    enc = EncoderBundle(d=4, hidden=4, rng=np.random.default_rng(0))
    other = EncoderBundle(d=4, hidden=4)
    other.load_arrays(enc.to_arrays())
    assert all(np.array_equal(a, b) for a, b in zip(enc.params(), other.params()))
    third = EncoderBundle(d=4, hidden=4)
    third.load_road_encoder_dict(enc.road_encoder_dict())
    assert all(np.array_equal(a, b) for a, b in zip(enc.road_params(), third.road_params()))
