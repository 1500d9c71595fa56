"""Pose-only graphs with chosen topology, for solver tests."""

from itertools import combinations

import numpy as np

from viewgraph_refine import graph as vg
from viewgraph_refine.posernet.train import loss_and_grads
from viewgraph_refine.se3 import AbsolutePose, random_quat, relative_pose, relative_transform


def random_poses(n: int, rng: np.random.Generator, spread: float = 2.0) -> list[AbsolutePose]:
    return [AbsolutePose.from_center(random_quat(rng), spread * rng.normal(size=3)) for _ in range(n)]


def complete_pairs(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def chain_pairs(n: int) -> list[tuple[int, int]]:
    return [(k, k + 1) for k in range(n - 1)]


def pose_graph(poses, pairs, scaled: bool = True) -> vg.ViewGraph:
    """Graph with exact relative poses on ``pairs`` and no detections."""
    nodes = tuple(vg.CameraNode(k, 640.0, 480.0, 585.0) for k in range(len(poses)))
    edges = []
    for a, b in pairs:
        _, t = relative_transform(poses[a], poses[b])
        scale = float(np.linalg.norm(t)) if scaled else None
        edges.append(vg.RelativePoseEdge(a, b, relative_pose(poses[a], poses[b]), (), scale=scale))
    return vg.ViewGraph(nodes, (), tuple(edges), {k: p for k, p in enumerate(poses)})


def stack(poses) -> np.ndarray:
    return np.vstack([p.matrix() for p in poses])


def finite_difference_check(params, arrays, depth, h=1e-5):
    """Worst relative gap between analytic and central-difference gradients.

    Entries below 1e-6 in both are compared absolutely, so round-off on
    vanishing gradients does not dominate.
    """
    _, grads = loss_and_grads(params, arrays, depth, 0.1)
    worst = 0.0
    for a, g in zip(params.arrays(), grads):
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss_and_grads(params, arrays, depth, 0.1)[0].total
            flat[k] = old - h
            down = loss_and_grads(params, arrays, depth, 0.1)[0].total
            flat[k] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - gflat[k]) / max(abs(num), abs(gflat[k]), 1e-6))
    return worst
