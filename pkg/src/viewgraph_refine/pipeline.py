"""Pure per-graph stages shared by the CLI and the experiment scripts."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import graph as vg
from . import metrics
from .eig import IrlsConfig, irls_motion_average
from .epipolar import (
    AmbiguousDecompositionError,
    DegenerateConfigurationError,
    InsufficientDataError,
    NoModelError,
    RansacConfig,
    estimate_relative_pose,
    pixels_to_normalized,
)
from .synth import NoiseModel, SceneConfig, corrupt_edges, dataset_seed, generate_graph, ground_truth_edges

SPLITS = ("train", "val", "test")


def graph_seed(rng_seed: int, split: str, index: int) -> int:
    return dataset_seed(rng_seed, split, index)


def noise_seed(rng_seed: int, split: str, index: int) -> int:
    return dataset_seed(rng_seed, split + "/noise", index)


def make_graph(scene: SceneConfig, rng_seed: int, split: str, index: int) -> vg.ViewGraph:
    return generate_graph(replace(scene, rng_seed=graph_seed(rng_seed, split, index)))


def make_dataset(scene: SceneConfig, noise: NoiseModel, rng_seed: int, split: str, count: int) -> list[vg.ViewGraph]:
    """Synthetic graphs with noisy initial edges (no files involved)."""
    return [
        corrupt_edges(make_graph(scene, rng_seed, split, i), noise, noise_seed(rng_seed, split, i))
        for i in range(count)
    ]


def box_correspondences(graph: vg.ViewGraph, edge: vg.RelativePoseEdge) -> tuple[np.ndarray, np.ndarray]:
    """Normalized image coordinates of box centers on the edge's shared tracks."""
    tracks = {t.track_id: t for t in graph.tracks}
    pts = []
    for nid in (edge.src, edge.dst):
        node = graph.node(nid)
        px = [
            (node.detections[tracks[tid].observations[nid]].center_x * node.image_width,
             node.detections[tracks[tid].observations[nid]].center_y * node.image_height)
            for tid in edge.shared_tracks
        ]
        pts.append(pixels_to_normalized(np.array(px), node.intrinsics()))
    return pts[0], pts[1]


@dataclass(frozen=True)
class EpipolarReport:
    dropped: tuple[tuple[int, int, str], ...]
    connected: bool


def epipolar_init(graph: vg.ViewGraph, ransac: RansacConfig) -> tuple[vg.ViewGraph, EpipolarReport]:
    """Edge poses from box-center correspondences; edges without a model are dropped."""
    edges, dropped = [], []
    for k, e in enumerate(graph.edges):
        x_src, x_dst = box_correspondences(graph, e)
        cfg = replace(ransac, rng_seed=dataset_seed(ransac.rng_seed, "ransac", k))
        try:
            pose, _ = estimate_relative_pose(x_src, x_dst, cfg)
        except (InsufficientDataError, DegenerateConfigurationError, AmbiguousDecompositionError, NoModelError) as exc:
            dropped.append((e.src, e.dst, f"{type(exc).__name__}: {exc}"))
            continue
        edges.append(replace(e, pose=pose, outlier=False, scale=None))
    out = graph.with_edges(edges)
    return out, EpipolarReport(tuple(dropped), vg.validate_connectivity(out) is None)


def initialize(graph: vg.ViewGraph, mode: str, noise: NoiseModel, ransac: RansacConfig, seed: int):
    """Initial edges for one graph; returns the graph and an epipolar report (or ``None``)."""
    if mode == "epipolar":
        base = corrupt_edges(graph, noise, seed) if noise != NoiseModel() else graph
        return epipolar_init(base, ransac)
    return corrupt_edges(graph, noise, seed), None


def average(graph: vg.ViewGraph, irls: IrlsConfig):
    result = irls_motion_average(graph, irls)
    poses = {nid: p for nid, p in zip(graph.node_ids, result.poses)}
    return replace(graph, estimated_poses=poses), result


def relative_graph_errors(graph: vg.ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge rotation and direction errors against the graph's own ground truth."""
    return metrics.relative_errors(graph.edges, ground_truth_edges(graph).edges)


def absolute_graph_errors(graph: vg.ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    """Per-camera rotation error (rotation-aligned) and center error (similarity-aligned)."""
    if graph.estimated_poses is None or graph.ground_truth is None:
        raise vg.GraphValidationError("graph needs estimated poses and ground truth")
    ids = graph.node_ids
    est = [graph.estimated_poses[n] for n in ids]
    gt = [graph.ground_truth[n] for n in ids]
    rot, _ = metrics.absolute_errors(metrics.align_rotations(est, gt), gt)
    _, dist = metrics.absolute_errors(metrics.align_poses(est, gt), gt)
    return rot, dist
