"""PoserNet: message passing over detection tracks to refine relative poses.

Nodes carry normalized intrinsics, edges carry ``(translation_dir, quaternion)``
in the canonical ``src < dst`` direction, and every track shared by an edge
contributes one message per round (a "layer").  Updates replace the previous
embedding with the mean of the incoming messages; rounds are synchronous.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import graph as vg
from ..se3 import InvalidInputError, RelativePose, relative_pose
from . import autodiff as ad

NODE_DIM = 4
EDGE_DIM = 7
BOX_DIM = 4
MESSAGE_INPUT_DIM = 2 * NODE_DIM + EDGE_DIM + 2 * BOX_DIM  # 23
LEAKY_SLOPE = 0.01


class InvalidOutputError(ValueError):
    pass


class NumericOverflowError(FloatingPointError):
    def __init__(self, round_index: int):
        super().__init__(f"non-finite embedding produced in message-passing round {round_index}")
        self.round_index = round_index


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Mlp:
    """Fully connected layers; leaky ReLU after every hidden layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: bool = False

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, output_activation: bool = False) -> "Mlp":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, output_activation)

    def forward(self, x: np.ndarray) -> np.ndarray:
        n = len(self.weights)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ W + b
            if k < n - 1 or self.output_activation:
                x = np.where(x > 0, x, LEAKY_SLOPE * x)
        return x


@dataclass
class PoserNetParams:
    edge: Mlp
    node: Mlp

    @classmethod
    def init(cls, rng_seed: int = 0, hidden: int = 32, output_activation: bool = False) -> "PoserNetParams":
        rng = np.random.default_rng(rng_seed)
        edge = Mlp.init([MESSAGE_INPUT_DIM, hidden, hidden, EDGE_DIM], rng, output_activation)
        node = Mlp.init([MESSAGE_INPUT_DIM, hidden, hidden, NODE_DIM], rng, output_activation)
        return cls(edge, node)

    def arrays(self) -> list[np.ndarray]:
        """Every parameter array, in a fixed order (edge then node, W then b per layer)."""
        out = []
        for mlp in (self.edge, self.node):
            for W, b in zip(mlp.weights, mlp.biases):
                out += [W, b]
        return out

    def names(self) -> list[str]:
        out = []
        for tag, mlp in (("edge", self.edge), ("node", self.node)):
            for k in range(len(mlp.weights)):
                out += [f"{tag}.W{k}", f"{tag}.b{k}"]
        return out

    def copy(self) -> "PoserNetParams":
        return PoserNetParams(
            Mlp([w.copy() for w in self.edge.weights], [b.copy() for b in self.edge.biases], self.edge.output_activation),
            Mlp([w.copy() for w in self.node.weights], [b.copy() for b in self.node.biases], self.node.output_activation),
        )

    @classmethod
    def zeros_like(cls, other: "PoserNetParams") -> "PoserNetParams":
        p = other.copy()
        for a in p.arrays():
            a[...] = 0.0
        return p


# ---------------------------------------------------------------------------
# graph -> arrays


def node_embedding(node: vg.CameraNode, pixel_scale: float = 1000.0) -> np.ndarray:
    return np.array(
        [node.image_height / pixel_scale, node.image_width / pixel_scale, node.focal_length / pixel_scale, node.radial_k1]
    )


def edge_embedding(pose: RelativePose) -> np.ndarray:
    return np.concatenate([pose.translation_dir, pose.rotation])


@dataclass
class GraphArrays:
    """Index arrays for one graph, or for a disjoint union of several."""

    node_feats: np.ndarray  # (N, 4)
    edge_feats: np.ndarray  # (E, 7)
    edge_graph: np.ndarray  # (E,) graph index of each edge
    edge_src: np.ndarray  # (E,) node index of each endpoint
    edge_dst: np.ndarray
    # one row per (edge, shared track)
    pair_edge: np.ndarray
    pair_src: np.ndarray
    pair_dst: np.ndarray
    box_src: np.ndarray
    box_dst: np.ndarray
    num_graphs: int = 1
    gt_quat: np.ndarray | None = None  # (E, 4)
    gt_dir: np.ndarray | None = None  # (E, 3)

    @property
    def num_nodes(self) -> int:
        return len(self.node_feats)

    @property
    def num_edges(self) -> int:
        return len(self.edge_feats)


def init_embeddings(graph: vg.ViewGraph, pixel_scale: float = 1000.0, with_ground_truth: bool = True) -> GraphArrays:
    """Embeddings for nodes, edges and the constant per-track box features."""
    index = {nid: k for k, nid in enumerate(graph.node_ids)}
    node_feats = np.array([node_embedding(n, pixel_scale) for n in graph.nodes]).reshape(-1, NODE_DIM)
    tracks = {t.track_id: t for t in graph.tracks}

    edge_feats, edge_src, edge_dst = [], [], []
    pair_edge, pair_src, pair_dst, box_src, box_dst = [], [], [], [], []
    for k, e in enumerate(graph.edges):
        if e.pose is None:
            raise InvalidInputError(f"edge ({e.src}, {e.dst}) has no initial pose")
        edge_feats.append(edge_embedding(e.pose))
        edge_src.append(index[e.src])
        edge_dst.append(index[e.dst])
        ns, nd = graph.nodes[index[e.src]], graph.nodes[index[e.dst]]
        for tid in e.shared_tracks:
            obs = tracks[tid].observations
            pair_edge.append(k)
            pair_src.append(index[e.src])
            pair_dst.append(index[e.dst])
            box_src.append(ns.detections[obs[e.src]].as_array())
            box_dst.append(nd.detections[obs[e.dst]].as_array())

    gt_quat = gt_dir = None
    if with_ground_truth and graph.ground_truth is not None:
        rel = [relative_pose(graph.ground_truth[e.src], graph.ground_truth[e.dst]) for e in graph.edges]
        gt_quat = np.array([r.rotation for r in rel]).reshape(-1, 4)
        gt_dir = np.array([r.translation_dir for r in rel]).reshape(-1, 3)

    return GraphArrays(
        node_feats=node_feats,
        edge_feats=np.array(edge_feats).reshape(-1, EDGE_DIM),
        edge_graph=np.zeros(len(graph.edges), dtype=int),
        edge_src=np.array(edge_src, dtype=int),
        edge_dst=np.array(edge_dst, dtype=int),
        pair_edge=np.array(pair_edge, dtype=int),
        pair_src=np.array(pair_src, dtype=int),
        pair_dst=np.array(pair_dst, dtype=int),
        box_src=np.array(box_src).reshape(-1, BOX_DIM),
        box_dst=np.array(box_dst).reshape(-1, BOX_DIM),
        gt_quat=gt_quat,
        gt_dir=gt_dir,
    )


def collate(items: list[GraphArrays]) -> GraphArrays:
    """Disjoint union of several graphs, so one pass processes a whole batch."""
    node_off = np.cumsum([0] + [g.num_nodes for g in items])
    edge_off = np.cumsum([0] + [g.num_edges for g in items])
    has_gt = all(g.gt_quat is not None for g in items)
    return GraphArrays(
        node_feats=np.concatenate([g.node_feats for g in items]),
        edge_feats=np.concatenate([g.edge_feats for g in items]),
        edge_graph=np.concatenate([np.full(g.num_edges, k) for k, g in enumerate(items)]).astype(int),
        edge_src=np.concatenate([g.edge_src + o for g, o in zip(items, node_off)]),
        edge_dst=np.concatenate([g.edge_dst + o for g, o in zip(items, node_off)]),
        pair_edge=np.concatenate([g.pair_edge + o for g, o in zip(items, edge_off)]),
        pair_src=np.concatenate([g.pair_src + o for g, o in zip(items, node_off)]),
        pair_dst=np.concatenate([g.pair_dst + o for g, o in zip(items, node_off)]),
        box_src=np.concatenate([g.box_src for g in items]),
        box_dst=np.concatenate([g.box_dst for g in items]),
        num_graphs=len(items),
        gt_quat=np.concatenate([g.gt_quat for g in items]) if has_gt else None,
        gt_dir=np.concatenate([g.gt_dir for g in items]) if has_gt else None,
    )


# ---------------------------------------------------------------------------
# message passing


def _mlp(mlp: Mlp, tensors: list[ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    n = len(mlp.weights)
    for k in range(n):
        x = ad.add_bias(ad.matmul(x, tensors[2 * k]), tensors[2 * k + 1])
        if k < n - 1 or mlp.output_activation:
            x = ad.leaky_relu(x, LEAKY_SLOPE)
    return x


def edge_message(mlp: Mlp, h_i, h_j, h_e, bb_i, bb_j) -> np.ndarray:
    """Message of one layer (shared track) to the edge ``i -> j``."""
    return mlp.forward(np.concatenate([h_i, h_j, h_e, bb_i, bb_j], axis=-1))


def node_message(mlp: Mlp, h_self, h_other, h_e, bb_self, bb_other) -> np.ndarray:
    """Message of one layer from neighbor ``other`` to node ``self``."""
    return mlp.forward(np.concatenate([h_self, h_other, h_e, bb_self, bb_other], axis=-1))


@dataclass
class ForwardResult:
    edges: ad.Tensor  # raw final edge embeddings (E, 7)
    nodes: ad.Tensor
    param_tensors: list[ad.Tensor]


def forward(params: PoserNetParams, arrays: GraphArrays, depth: int) -> ForwardResult:
    """``depth`` synchronous rounds of edge and node updates."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    tensors = [ad.Tensor(a) for a in params.arrays()]
    n_edge_params = 2 * len(params.edge.weights)
    edge_t, node_t = tensors[:n_edge_params], tensors[n_edge_params:]

    E, N = arrays.num_edges, arrays.num_nodes
    # node-message rows: each (edge, track) pair speaks to both endpoints
    self_idx = np.concatenate([arrays.pair_src, arrays.pair_dst])
    other_idx = np.concatenate([arrays.pair_dst, arrays.pair_src])
    row_edge = np.concatenate([arrays.pair_edge, arrays.pair_edge])
    box_self = ad.constant(np.concatenate([arrays.box_src, arrays.box_dst]))
    box_other = ad.constant(np.concatenate([arrays.box_dst, arrays.box_src]))
    # group = (receiving node, edge): 2e for the src side, 2e+1 for the dst side
    row_group = np.concatenate([2 * arrays.pair_edge, 2 * arrays.pair_edge + 1])
    group_node = np.stack([arrays.edge_src, arrays.edge_dst], axis=1).reshape(-1)
    has_neighbor = np.bincount(group_node, minlength=N) > 0
    box_src = ad.constant(arrays.box_src)
    box_dst = ad.constant(arrays.box_dst)

    h_n = ad.constant(arrays.node_feats)
    h_e = ad.constant(arrays.edge_feats)
    for k in range(depth):
        x_e = ad.concat(
            [ad.gather(h_n, arrays.pair_src), ad.gather(h_n, arrays.pair_dst), ad.gather(h_e, arrays.pair_edge), box_src, box_dst]
        )
        new_e = ad.segment_mean(_mlp(params.edge, edge_t, x_e), arrays.pair_edge, E)

        x_n = ad.concat([ad.gather(h_n, self_idx), ad.gather(h_n, other_idx), ad.gather(h_e, row_edge), box_self, box_other])
        per_neighbor = ad.segment_mean(_mlp(params.node, node_t, x_n), row_group, 2 * E)
        new_n = ad.where_rows(has_neighbor, ad.segment_mean(per_neighbor, group_node, N), h_n)

        if not (np.all(np.isfinite(new_e.value)) and np.all(np.isfinite(new_n.value))):
            raise NumericOverflowError(k)
        h_n, h_e = new_n, new_e
    return ForwardResult(h_e, h_n, tensors)


def readout(raw_edges: np.ndarray) -> list[RelativePose]:
    """Renormalize each raw 7-vector into a relative pose."""
    out = []
    for k, h in enumerate(np.asarray(raw_edges)):
        try:
            out.append(RelativePose(h[3:], h[:3]))
        except InvalidInputError as exc:
            raise InvalidOutputError(f"edge {k}: {exc}") from exc
    return out


def refine_graph(params: PoserNetParams, graph: vg.ViewGraph, depth: int, pixel_scale: float = 1000.0) -> vg.ViewGraph:
    """Graph with every edge pose replaced by the network's readout."""
    if depth == 0:
        return graph
    arrays = init_embeddings(graph, pixel_scale, with_ground_truth=False)
    poses = readout(forward(params, arrays, depth).edges.value)
    return graph.with_edges(replace(e, pose=p) for e, p in zip(graph.edges, poses))
