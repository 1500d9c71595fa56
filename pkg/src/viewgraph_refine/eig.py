"""Spectral motion averaging (EIG-SE3) with iteratively reweighted edges.

Block convention: block ``(i, j)`` of the synchronization matrix is
``M_i M_j^{-1}``.  Stored edges hold ``M_dst M_src^{-1}`` (the view-graph
convention), so the stored transform lands in block ``(dst, src)`` and its
inverse in ``(src, dst)``.

Two modes:

* ``scaled`` - every edge carries a metric translation length; the full 4x4
  SE(3) problem is solved and translations come out in meters.
* ``direction`` - edges only carry translation directions (epipolar or
  network output).  Rotations are synchronized spectrally on the 3x3 blocks,
  then camera centers are solved from the direction constraints by linear
  least squares, with unit mean baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as vg
from .se3 import (
    AbsolutePose,
    InvalidInputError,
    matrix_to_quat,
    project_matrix_to_so3,
    quat_to_matrix,
    rotation_angle_deg,
    vector_angle_deg,
)


class IllConditionedSpectrumError(ValueError):
    pass


class GaugeFixError(ValueError):
    pass


@dataclass(frozen=True)
class IrlsConfig:
    max_outer_iterations: int = 20
    # convergence threshold on the largest per-edge weight change
    tolerance: float = 1e-6
    # Cauchy scale = scale_factor * median absolute residual (deg), floored
    scale_factor: float = 1.4826
    min_scale_deg: float = 1e-3
    translation_weight: float = 1.0
    eigen_tolerance: float = 1e-10
    mode: str = "auto"  # "auto" | "scaled" | "direction"

    def __post_init__(self):
        if self.tolerance <= 0 or self.eigen_tolerance <= 0 or self.min_scale_deg <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.mode not in ("auto", "scaled", "direction"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class IrlsResult:
    poses: list[AbsolutePose]
    weights: np.ndarray
    converged: bool
    iterations: int
    residuals: np.ndarray
    weight_history: list[np.ndarray] = field(default_factory=list)


def _index(graph: vg.ViewGraph) -> dict[int, int]:
    return {nid: k for k, nid in enumerate(graph.node_ids)}


def _check(graph: vg.ViewGraph) -> None:
    if vg.validate_connectivity(graph) is not None:
        raise InvalidInputError("motion averaging needs a connected graph")
    if any(e.pose is None for e in graph.edges):
        raise InvalidInputError("every edge needs a relative pose")


def edge_transform(edge: vg.RelativePoseEdge, scale: float) -> np.ndarray:
    """4x4 ``M_dst M_src^{-1}`` of a stored edge with the given translation length."""
    T = np.eye(4)
    T[:3, :3] = edge.pose.R
    T[:3, 3] = scale * edge.pose.translation_dir
    return T


def _rigid_inverse(T: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = T[:3, :3].T
    out[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return out


def build_block_matrix(graph: vg.ViewGraph, scales=None, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """``(X, degrees)`` for the 4x4 SE(3) problem; ``degrees`` includes the diagonal 1."""
    _check(graph)
    n, idx = len(graph.nodes), _index(graph)
    if scales is None:
        scales = [e.scale for e in graph.edges]
    if any(s is None for s in scales):
        raise InvalidInputError("scaled synchronization needs a translation length on every edge")
    w = np.ones(len(graph.edges)) if weights is None else np.asarray(weights, dtype=float)
    X = np.kron(np.eye(n), np.eye(4))
    deg = np.ones(n)
    for e, s, we in zip(graph.edges, scales, w):
        i, j = idx[e.dst], idx[e.src]
        T = edge_transform(e, s)
        X[4 * i : 4 * i + 4, 4 * j : 4 * j + 4] = we * T
        X[4 * j : 4 * j + 4, 4 * i : 4 * i + 4] = we * _rigid_inverse(T)
        deg[i] += we
        deg[j] += we
    return X, deg


def build_rotation_block_matrix(graph: vg.ViewGraph, weights=None) -> tuple[np.ndarray, np.ndarray]:
    _check(graph)
    n, idx = len(graph.nodes), _index(graph)
    w = np.ones(len(graph.edges)) if weights is None else np.asarray(weights, dtype=float)
    X = np.eye(3 * n)
    deg = np.ones(n)
    for e, we in zip(graph.edges, w):
        i, j = idx[e.dst], idx[e.src]
        R = e.pose.R
        X[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] = we * R
        X[3 * j : 3 * j + 3, 3 * i : 3 * i + 3] = we * R.T
        deg[i] += we
        deg[j] += we
    return X, deg


def spectral_solve(X: np.ndarray, degrees: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Basis of the least-squares null space of ``D - X`` (4n x 4).

    For exact relative transforms these are eigenvectors of ``X v = lambda D v``
    with ``lambda = 1`` (``= n`` before normalization on complete graphs).
    """
    n = len(degrees)
    L = np.kron(np.diag(degrees), np.eye(4)) - X
    _, s, Vt = np.linalg.svd(L)
    s = s[::-1]
    if n > 1 and s[4] - s[3] < tol * max(1.0, s[-1]):
        raise IllConditionedSpectrumError(f"no spectral gap after the 4th singular value ({s[3]:.3g}, {s[4]:.3g})")
    return Vt[::-1][:4].T


def spectral_solve_rotations(X: np.ndarray, degrees: np.ndarray, tol: float = 1e-10) -> list[np.ndarray]:
    """Rotation matrices from the top-3 eigenvectors of ``D^-1 X`` (symmetrized)."""
    d = np.repeat(1.0 / np.sqrt(degrees), 3)
    S = d[:, None] * X * d[None, :]
    vals, vecs = np.linalg.eigh(S)
    if len(degrees) > 1 and vals[-3] - vals[-4] < tol * max(1.0, abs(vals[-1])):
        raise IllConditionedSpectrumError("no spectral gap after the 3rd eigenvalue")
    V = d[:, None] * vecs[:, -3:]
    blocks = [V[3 * k : 3 * k + 3] for k in range(len(degrees))]
    if sum(np.linalg.det(b) for b in blocks) < 0:
        V[:, 2] *= -1.0
        blocks = [V[3 * k : 3 * k + 3] for k in range(len(degrees))]
    return [project_matrix_to_so3(b) for b in blocks]


def euclidean_basis_fix(M_stack: np.ndarray) -> list[AbsolutePose]:
    """Change basis so every 4th row becomes ``[0, 0, 0, 1]``, then project to SE(3)."""
    M_stack = np.asarray(M_stack, dtype=float)
    n = M_stack.shape[0] // 4
    A = M_stack[3::4]
    _, s, Vt = np.linalg.svd(A)
    if s[0] < 1e-12:
        raise GaugeFixError("fourth rows vanish; cannot fix the gauge")
    last = np.linalg.lstsq(A, np.ones(n), rcond=None)[0]
    # columns 0..2: directions annihilated by the (ideally rank-one) 4th-row system
    B = np.column_stack([Vt[1:].T, last])
    if abs(np.linalg.det(B)) < 1e-12:
        raise GaugeFixError("change of basis is singular")
    M = M_stack @ B
    # every 3x3 block is now R_k C for one shared C; C^T C = mean of blk^T blk,
    # so dividing by its square root leaves an orthogonal factor
    S = sum(M[4 * k : 4 * k + 3, :3].T @ M[4 * k : 4 * k + 3, :3] for k in range(n)) / n
    vals, vecs = np.linalg.eigh(S)
    if vals[0] < 1e-300:
        raise GaugeFixError("rotation blocks are rank deficient")
    fix = vecs @ np.diag(vals ** -0.5) @ vecs.T
    if sum(np.linalg.det(M[4 * k : 4 * k + 3, :3]) for k in range(n)) < 0:
        fix[:, 2] *= -1.0
    B[:, :3] = B[:, :3] @ fix
    M = M_stack @ B
    poses = []
    for k in range(n):
        blk = M[4 * k : 4 * k + 4]
        R = project_matrix_to_so3(blk[:3, :3])
        # translation column is not touched by the 3x3 gauge, rescale by the 4th entry
        poses.append(AbsolutePose(matrix_to_quat(R), blk[:3, 3] / blk[3, 3]))
    return poses


def canonical_gauge(poses: list[AbsolutePose], unit_scale: bool) -> list[AbsolutePose]:
    """Express poses in camera 0's frame; optionally rescale to unit mean baseline."""
    M0_inv = np.linalg.inv(poses[0].matrix())
    out = [p.matrix() @ M0_inv for p in poses]
    if unit_scale and len(poses) > 1:
        centers = [-(M[:3, :3].T @ M[:3, 3]) for M in out]
        mean_dist = np.mean([np.linalg.norm(c) for c in centers[1:]])
        if mean_dist > 1e-12:
            for M in out:
                M[:3, 3] /= mean_dist
    out[0] = np.eye(4)
    return [AbsolutePose.from_matrix(M) for M in out]


def solve_centers(graph: vg.ViewGraph, rotations: list[np.ndarray], weights=None) -> np.ndarray:
    """Camera centers from unit direction constraints, unit-norm and zero-mean.

    Minimizes ``sum_e w_e |(I - u u^T) R_dst (c_src - c_dst)|^2``; the sign is
    chosen so that predicted directions agree with the measured ones.
    """
    n, idx = len(graph.nodes), _index(graph)
    w = np.ones(len(graph.edges)) if weights is None else np.asarray(weights, dtype=float)
    H = np.zeros((3 * n, 3 * n))
    rows = []
    for e, we in zip(graph.edges, w):
        s, d = idx[e.src], idx[e.dst]
        u = e.pose.translation_dir
        A = (np.eye(3) - np.outer(u, u)) @ rotations[d]
        B = np.zeros((3, 3 * n))
        B[:, 3 * s : 3 * s + 3] = A
        B[:, 3 * d : 3 * d + 3] = -A
        H += we * B.T @ B
        rows.append((s, d, u, rotations[d], we))
    # orthonormal basis of zero-mean configurations
    T = np.kron(np.ones((n, 1)), np.eye(3)) / np.sqrt(n)
    Q = np.linalg.svd(np.eye(3 * n) - T @ T.T)[0][:, : 3 * n - 3]
    vals, vecs = np.linalg.eigh(Q.T @ H @ Q)
    c = (Q @ vecs[:, 0]).reshape(n, 3)
    agreement = sum(we * u @ (Rd @ (c[s] - c[d])) for s, d, u, Rd, we in rows)
    if agreement < 0:
        c = -c
    return c


def _solve(graph: vg.ViewGraph, weights: np.ndarray, scaled: bool, tol: float) -> list[AbsolutePose]:
    if scaled:
        X, deg = build_block_matrix(graph, weights=weights)
        return euclidean_basis_fix(spectral_solve(X, deg, tol))
    X, deg = build_rotation_block_matrix(graph, weights)
    rotations = spectral_solve_rotations(X, deg, tol)
    if len(graph.nodes) == 1:
        centers = np.zeros((1, 3))
    else:
        centers = solve_centers(graph, rotations, weights)
    return [AbsolutePose.from_center(matrix_to_quat(R), c) for R, c in zip(rotations, centers)]


def edge_residuals(graph: vg.ViewGraph, poses: list[AbsolutePose], translation_weight: float = 1.0) -> np.ndarray:
    """Per-edge rotation angle plus weighted translation-direction angle, degrees."""
    idx = _index(graph)
    out = np.empty(len(graph.edges))
    for k, e in enumerate(graph.edges):
        ps, pd = poses[idx[e.src]], poses[idx[e.dst]]
        R_rel = pd.R @ ps.R.T
        r = rotation_angle_deg(e.pose.rotation, matrix_to_quat(R_rel))
        t_rel = pd.R @ (ps.center - pd.center)
        r += translation_weight * (vector_angle_deg(e.pose.translation_dir, t_rel) if np.linalg.norm(t_rel) > 1e-12 else 90.0)
        out[k] = r
    return out


def cauchy_weights(residuals: np.ndarray, scale_factor: float = 1.4826, min_scale: float = 1e-3) -> np.ndarray:
    c = max(scale_factor * float(np.median(np.abs(residuals))), min_scale)
    return 1.0 / (1.0 + (residuals / c) ** 2)


def irls_motion_average(graph: vg.ViewGraph, config: IrlsConfig = IrlsConfig()) -> IrlsResult:
    """Robust absolute poses; never raises on non-convergence (see ``converged``)."""
    _check(graph)
    if config.mode == "auto":
        scaled = all(e.scale is not None for e in graph.edges)
    else:
        scaled = config.mode == "scaled"
    weights = np.ones(len(graph.edges))
    history = [weights.copy()]
    best = None
    converged = False
    it = 0
    for it in range(1, config.max_outer_iterations + 1):
        try:
            poses = _solve(graph, weights, scaled, config.eigen_tolerance)
        except IllConditionedSpectrumError:
            # down-weighting cut the graph apart; keep the best earlier iterate
            if best is None:
                raise
            break
        res = edge_residuals(graph, poses, config.translation_weight)
        score = float(np.median(res))
        if best is None or score <= best[0]:
            best = (score, poses, weights.copy(), res)
        new_w = cauchy_weights(res, config.scale_factor, config.min_scale_deg)
        if np.max(np.abs(new_w - weights), initial=0.0) < config.tolerance:
            converged = True
            best = (score, poses, weights.copy(), res)
            break
        weights = new_w
        history.append(weights.copy())
    _, poses, w, res = best
    return IrlsResult(canonical_gauge(poses, unit_scale=not scaled), w, converged, it, res, history)


def motion_average(graph: vg.ViewGraph, config: IrlsConfig = IrlsConfig()) -> vg.ViewGraph:
    """Graph with ``estimated_poses`` filled in."""
    from dataclasses import replace

    result = irls_motion_average(graph, config)
    return replace(graph, estimated_poses={nid: p for nid, p in zip(graph.node_ids, result.poses)})


def single_pass(graph: vg.ViewGraph, mode: str = "auto") -> list[AbsolutePose]:
    """Non-robust baseline: one unit-weight solve."""
    return irls_motion_average(graph, IrlsConfig(max_outer_iterations=1, mode=mode)).poses


__all__ = [
    "IrlsConfig",
    "IrlsResult",
    "build_block_matrix",
    "build_rotation_block_matrix",
    "canonical_gauge",
    "euclidean_basis_fix",
    "irls_motion_average",
    "motion_average",
    "quat_to_matrix",
    "single_pass",
    "spectral_solve",
    "spectral_solve_rotations",
]
