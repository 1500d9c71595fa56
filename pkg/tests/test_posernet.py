from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from helpers import finite_difference_check

from viewgraph_refine import graph as vg
from viewgraph_refine import synth
from viewgraph_refine.posernet import autodiff as ad
from viewgraph_refine.posernet.loss import loss, loss_tensor, norm_terms
from viewgraph_refine.posernet.model import (
    InvalidOutputError,
    Mlp,
    NumericOverflowError,
    PoserNetParams,
    collate,
    edge_message,
    forward,
    init_embeddings,
    node_embedding,
    node_message,
    readout,
    refine_graph,
)
from viewgraph_refine.posernet.train import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingDivergedError,
    checkpoint_dumps,
    checkpoint_loads,
    history_csv,
    loss_and_grads,
    train,
)
from viewgraph_refine.se3 import IDENTITY_QUAT, InvalidInputError, RelativePose, invert_relative, random_quat, random_unit_vector


def oracle_forward(params, graph, depth, pixel_scale=1000.0):
    """Nested loops over edges, tracks and neighbors."""
    tracks = {t.track_id: t for t in graph.tracks}
    h_n = {n.node_id: node_embedding(n, pixel_scale) for n in graph.nodes}
    h_e = {(e.src, e.dst): np.concatenate([e.pose.translation_dir, e.pose.rotation]) for e in graph.edges}

    def bb(nid, tid):
        return graph.node(nid).detections[tracks[tid].observations[nid]].as_array()

    for _ in range(depth):
        new_e, new_n = {}, {}
        for e in graph.edges:
            msgs = [edge_message(params.edge, h_n[e.src], h_n[e.dst], h_e[(e.src, e.dst)], bb(e.src, t), bb(e.dst, t)) for t in e.shared_tracks]
            new_e[(e.src, e.dst)] = np.mean(msgs, axis=0)
        for v in graph.node_ids:
            per_neighbor = []
            for e in graph.edges:
                if v not in (e.src, e.dst):
                    continue
                other = e.dst if v == e.src else e.src
                msgs = [node_message(params.node, h_n[v], h_n[other], h_e[(e.src, e.dst)], bb(v, t), bb(other, t)) for t in e.shared_tracks]
                per_neighbor.append(np.mean(msgs, axis=0))
            new_n[v] = np.mean(per_neighbor, axis=0) if per_neighbor else h_n[v]
        h_e, h_n = new_e, new_n
    return np.array([h_e[(e.src, e.dst)] for e in graph.edges])


@pytest.fixture(scope="module")
def noisy_graph():
    g = synth.generate_graph(synth.SceneConfig(rng_seed=21))
    return synth.corrupt_edges(g, synth.NOISE_PRESETS["kp-like"], 21)


class TestEmbeddings:
    def test_node_embedding(self):
        n = vg.CameraNode(0, 640.0, 480.0, 585.0, -0.1)
        assert np.allclose(node_embedding(n), [0.48, 0.64, 0.585, -0.1])

    def test_edges_read_back_exactly(self, noisy_graph):
        arr = init_embeddings(noisy_graph)
        for row, e in zip(arr.edge_feats, noisy_graph.edges):
            assert np.array_equal(row[:3], e.pose.translation_dir)
            assert np.array_equal(row[3:], e.pose.rotation)
        out = readout(arr.edge_feats)
        assert all(p == e.pose for p, e in zip(out, noisy_graph.edges))

    def test_missing_pose(self, noisy_graph):
        e = noisy_graph.edges[0]
        bad = noisy_graph.with_edges([replace(e, pose=None)] + list(noisy_graph.edges[1:]))
        with pytest.raises(InvalidInputError):
            init_embeddings(bad)

    def test_box_pairs(self, noisy_graph):
        arr = init_embeddings(noisy_graph)
        assert len(arr.pair_edge) == sum(len(e.shared_tracks) for e in noisy_graph.edges)


class TestMessages:
    def test_zero_params(self):
        p = PoserNetParams.zeros_like(PoserNetParams.init(0))
        x = np.random.default_rng(0).normal(size=4)
        assert np.all(edge_message(p.edge, x, x, np.ones(7), x, x) == 0.0)

    def test_matmul_oracle(self):
        rng = np.random.default_rng(1)
        p = PoserNetParams.init(3)
        parts = [rng.normal(size=4), rng.normal(size=4), rng.normal(size=7), rng.uniform(size=4), rng.uniform(size=4)]
        x = np.concatenate(parts)
        W, b = p.edge.weights, p.edge.biases
        h1 = x @ W[0] + b[0]
        h1 = np.where(h1 > 0, h1, 0.01 * h1)
        h2 = h1 @ W[1] + b[1]
        h2 = np.where(h2 > 0, h2, 0.01 * h2)
        assert np.allclose(edge_message(p.edge, *parts), h2 @ W[2] + b[2], atol=1e-9)

    def test_leaky_slope(self):
        mlp = Mlp([np.array([[1.0]])], [np.zeros(1)], output_activation=True)
        assert mlp.forward(np.array([-3.0]))[0] == pytest.approx(-0.03)
        t = ad.leaky_relu(ad.Tensor(np.array([-2.0, 5.0])))
        assert np.allclose(t.value, [-0.02, 5.0])

    def test_shapes(self):
        p = PoserNetParams.init(0)
        assert [w.shape for w in p.edge.weights] == [(23, 32), (32, 32), (32, 7)]
        assert [w.shape for w in p.node.weights] == [(23, 32), (32, 32), (32, 4)]


class TestAggregation:
    def test_segment_mean_cases(self):
        one = ad.segment_mean(ad.Tensor(np.array([[1.0, 2.0]])), np.array([0]), 1)
        assert np.array_equal(one.value, [[1.0, 2.0]])
        same = ad.segment_mean(ad.Tensor(np.array([[3.0], [3.0]])), np.array([0, 0]), 1)
        assert np.array_equal(same.value, [[3.0]])
        rng = np.random.default_rng(0)
        msgs = rng.normal(size=(5, 7))
        assert np.allclose(ad.segment_mean(ad.Tensor(msgs), np.zeros(5, dtype=int), 1).value[0], msgs.mean(axis=0), atol=1e-12)

    def test_empty_segment_is_zero(self):
        out = ad.segment_mean(ad.Tensor(np.ones((2, 3))), np.array([0, 0]), 2)
        assert np.array_equal(out.value[1], np.zeros(3))

    def test_nested_mean_of_constant(self):
        # 2 neighbors with 2 and 3 layers, all messages m
        m = np.array([0.3, -1.0, 2.0, 0.5])
        rows = np.tile(m, (5, 1))
        groups = np.array([0, 0, 1, 1, 1])
        inner = ad.segment_mean(ad.Tensor(rows), groups, 2)
        outer = ad.segment_mean(inner, np.array([0, 0]), 1)
        assert np.allclose(outer.value[0], m, atol=1e-15)

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_forward_matches_oracle(self, noisy_graph, depth):
        p = PoserNetParams.init(7)
        fast = forward(p, init_embeddings(noisy_graph), depth).edges.value
        assert np.allclose(fast, oracle_forward(p, noisy_graph, depth), atol=1e-12)

    def test_isolated_node_unchanged(self, noisy_graph):
        arr = init_embeddings(noisy_graph)
        lonely = np.array([[0.1, 0.2, 0.3, 0.4]])
        arr = replace(arr, node_feats=np.vstack([arr.node_feats, lonely]))
        out = forward(PoserNetParams.init(0), arr, 2)
        assert np.array_equal(out.nodes.value[-1], lonely[0])


class TestForward:
    def test_depth_zero(self, noisy_graph):
        p = PoserNetParams.init(0)
        assert vg.graphs_equal(refine_graph(p, noisy_graph, 0), noisy_graph)
        arr = init_embeddings(noisy_graph)
        assert np.array_equal(forward(p, arr, 0).edges.value, arr.edge_feats)

    def test_zero_params_invalid_output(self, noisy_graph):
        p = PoserNetParams.zeros_like(PoserNetParams.init(0))
        out = forward(p, init_embeddings(noisy_graph), 1).edges.value
        assert np.all(out == 0.0)
        with pytest.raises(InvalidOutputError):
            readout(out)
        with pytest.raises(InvalidOutputError):
            refine_graph(p, noisy_graph, 1)

    def test_overflow_round_index(self, noisy_graph):
        p = PoserNetParams.init(0)
        for W in p.edge.weights + p.node.weights:
            W *= 1e120
        with pytest.raises(NumericOverflowError) as info:
            with np.errstate(over="ignore", invalid="ignore"):
                forward(p, init_embeddings(noisy_graph), 3)
        assert info.value.round_index in (0, 1, 2)

    def test_batch_equals_individual(self):
        graphs = [synth.corrupt_edges(synth.generate_graph(synth.SceneConfig(rng_seed=s)), synth.NOISE_PRESETS["kp-like"], s) for s in range(3)]
        p = PoserNetParams.init(1)
        batch = forward(p, collate([init_embeddings(g) for g in graphs]), 2).edges.value
        single = np.vstack([forward(p, init_embeddings(g), 2).edges.value for g in graphs])
        assert np.allclose(batch, single, atol=1e-13)

    @pytest.mark.invariant
    def test_reverse_read_is_inverse(self, noisy_graph):
        out = refine_graph(PoserNetParams.init(2), noisy_graph, 2)
        for e in out.edges:
            back = e.pose_between(e.dst, e.src)
            inv = invert_relative(e.pose)
            assert np.array_equal(back.rotation, inv.rotation) and np.array_equal(back.translation_dir, inv.translation_dir)


@pytest.mark.invariant
class TestInvariance:
    def test_list_order(self, noisy_graph):
        rng = np.random.default_rng(0)
        g = noisy_graph
        shuffled = replace(
            g,
            nodes=tuple(g.nodes[k] for k in rng.permutation(len(g.nodes))),
            tracks=tuple(g.tracks[k] for k in rng.permutation(len(g.tracks))),
            edges=tuple(g.edges[k] for k in rng.permutation(len(g.edges))),
        )
        p = PoserNetParams.init(4)
        a = {(e.src, e.dst): e.pose for e in refine_graph(p, g, 2).edges}
        b = {(e.src, e.dst): e.pose for e in refine_graph(p, shuffled, 2).edges}
        for key in a:
            assert np.allclose(a[key].rotation, b[key].rotation, atol=1e-9)
            assert np.allclose(a[key].translation_dir, b[key].translation_dir, atol=1e-9)

    def test_order_preserving_relabel(self, noisy_graph):
        g = noisy_graph
        new_id = {nid: 10 * nid + 3 for nid in g.node_ids}
        relabeled = vg.ViewGraph(
            tuple(replace(n, node_id=new_id[n.node_id]) for n in g.nodes),
            tuple(vg.DetectionTrack(t.track_id, {new_id[k]: v for k, v in t.observations.items()}) for t in g.tracks),
            tuple(replace(e, src=new_id[e.src], dst=new_id[e.dst]) for e in g.edges),
            {new_id[k]: p for k, p in g.ground_truth.items()},
        )
        p = PoserNetParams.init(5)
        a = refine_graph(p, g, 2).edges
        b = refine_graph(p, relabeled, 2).edges
        for x, y in zip(a, b):
            assert np.allclose(x.pose.rotation, y.pose.rotation, atol=1e-9)

    def test_layer_order(self, noisy_graph):
        rng = np.random.default_rng(1)
        g = noisy_graph
        permuted = g.with_edges(replace(e, shared_tracks=tuple(rng.permutation(e.shared_tracks).tolist())) for e in g.edges)
        p = PoserNetParams.init(6)
        a = forward(p, init_embeddings(g), 1).edges.value
        b = forward(p, init_embeddings(permuted), 1).edges.value
        assert np.allclose(a, b, atol=1e-12)


class TestLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.q = np.array([random_quat(rng) for _ in range(6)])
        self.t = np.array([random_unit_vector(rng) for _ in range(6)])

    def raw(self, t, q):
        return np.hstack([t, q])

    def test_exact(self):
        parts = loss(self.raw(self.t, self.q), self.q, self.t)
        assert parts.total == pytest.approx(0.0, abs=1e-12)

    def test_sign_flip(self):
        parts = loss(self.raw(self.t, -self.q), self.q, self.t)
        assert parts.orient == pytest.approx(0.0, abs=1e-12)

    def test_doubled_quaternion(self):
        parts = loss(self.raw(self.t, 2 * self.q), self.q, self.t)
        assert parts.orient == pytest.approx(0.0, abs=1e-12)
        assert parts.q_norm == pytest.approx(1.0)

    @pytest.mark.invariant
    def test_total_formula(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(6, 7))
        p = loss(raw, self.q, self.t, alpha=0.3)
        assert p.total == pytest.approx(p.orient + p.tr_dir + 0.3 * (p.q_norm + p.tr_norm))
        assert min(p.orient, p.tr_dir, p.q_norm, p.tr_norm) >= 0

    def test_missing_ground_truth(self):
        with pytest.raises(InvalidInputError):
            loss_tensor(ad.Tensor(np.ones((2, 7))), None, None, np.ones(2), 0.1)

    def test_zero_loss_zero_gradient(self):
        edges = ad.Tensor(self.raw(self.t, self.q))
        total, _ = loss_tensor(edges, self.q, self.t, np.full(6, 1 / 6), 0.1)
        total.backward()
        assert np.all(edges.grad == 0.0)

    def test_norm_subgradient_at_one(self):
        _, g = norm_terms(np.array([[1.0, 0.0, 0.0, 0.0]]))
        assert np.all(g == 0.0)

    @pytest.mark.invariant
    @given(st.floats(0.01, 100.0), st.integers(0, 10_000))
    def test_invariances(self, c, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(4, 7))
        q_gt = np.array([random_quat(rng) for _ in range(4)])
        t_gt = np.array([random_unit_vector(rng) for _ in range(4)])
        base = loss(raw, q_gt, t_gt)
        flipped = raw.copy()
        flipped[:, 3:] *= -1
        scaled = raw.copy()
        scaled[:, :3] *= c
        assert loss(flipped, q_gt, t_gt).orient == pytest.approx(base.orient, abs=1e-12)
        assert loss(scaled, q_gt, t_gt).tr_dir == pytest.approx(base.tr_dir, abs=1e-12)


@pytest.mark.invariant
def test_gradient_depth_one(probe_graph):
    params = PoserNetParams.init(3, hidden=4)
    assert finite_difference_check(params, init_embeddings(probe_graph), 1) < 1e-4


class TestTraining:
    def test_zero_lr_keeps_params(self, noisy_graph):
        init = PoserNetParams.init(0, hidden=8)
        res = train([noisy_graph], [noisy_graph], TrainConfig(learning_rate=0.0, epochs=3, hidden=8), init_params=init)
        assert all(np.array_equal(a, b) for a, b in zip(res.params.arrays(), init.arrays()))

    def test_loss_never_above_initial(self, small_graph):
        cfg = TrainConfig(epochs=200, hidden=8)
        res = train([small_graph], [small_graph], cfg)
        first = res.history[0]["val_loss"]
        assert all(row["val_loss"] <= first for row in res.history)
        assert res.history[res.best_epoch]["val_loss"] < first

    def test_deterministic(self, noisy_graph):
        cfg = TrainConfig(epochs=2, hidden=8)
        a = train([noisy_graph], [noisy_graph], cfg)
        b = train([noisy_graph], [noisy_graph], cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
        assert history_csv(a.history) == history_csv(b.history)

    def test_divergence(self, noisy_graph):
        cfg = TrainConfig(epochs=20, learning_rate=1e3, hidden=8, scheduler_patience=100)
        with pytest.raises(TrainingDivergedError) as info:
            train([noisy_graph], [noisy_graph], cfg)
        assert len(info.value.history) >= 4

    def test_history_csv(self, noisy_graph):
        res = train([noisy_graph], [noisy_graph], TrainConfig(epochs=1, hidden=8))
        lines = history_csv(res.history).splitlines()
        assert lines[0] == ",".join(HISTORY_COLUMNS)
        assert len(lines) == 3

    def test_requires_depth_and_data(self, noisy_graph):
        with pytest.raises(ValueError):
            train([noisy_graph], [noisy_graph], TrainConfig(depth=0))
        with pytest.raises(ValueError):
            train([], [noisy_graph], TrainConfig())
        with pytest.raises(ValueError):
            TrainConfig(alpha=-1.0)


class TestCheckpoint:
    def test_round_trip_exact(self):
        p = PoserNetParams.init(9)
        cfg = TrainConfig(depth=3, rng_seed=9)
        back, back_cfg = checkpoint_loads(checkpoint_dumps(p, cfg))
        assert back_cfg == cfg
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), back.arrays()))
        assert checkpoint_dumps(back, back_cfg) == checkpoint_dumps(p, cfg)

    def test_version_mismatch(self):
        text = checkpoint_dumps(PoserNetParams.init(0), TrainConfig()).replace('"version": 1', '"version": 2')
        with pytest.raises(ValueError, match="version"):
            checkpoint_loads(text)
