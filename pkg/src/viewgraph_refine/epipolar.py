"""Relative pose from calibrated correspondences: normalized 8-point + RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se3 import RelativePose, matrix_to_quat


class InsufficientDataError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


class AmbiguousDecompositionError(ValueError):
    pass


class NoModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 200
    # Sampson distance, normalized image units
    inlier_threshold: float = 1e-3
    min_inliers: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.inlier_threshold <= 0:
            raise ValueError("max_iterations must be >= 1 and inlier_threshold > 0")


def pixels_to_normalized(points, K) -> np.ndarray:
    """Apply ``K^-1`` to pixel coordinates of shape (N, 2)."""
    pts = np.asarray(points, dtype=float)
    h = np.column_stack([pts, np.ones(len(pts))])
    out = np.linalg.solve(np.asarray(K, dtype=float), h.T).T
    return out[:, :2] / out[:, 2:]


def normalize_points(points) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: centroid to the origin, RMS distance sqrt(2)."""
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    if rms < 1e-15:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, T


def eight_point_essential(x_src, x_dst) -> np.ndarray:
    """Essential matrix with ``x_dst^T E x_src = 0`` from >= 8 correspondences.

    Singular values are forced to ``(1, 1, 0)`` so that ``||E||_F = sqrt(2)``.
    """
    x_src = np.asarray(x_src, dtype=float)
    x_dst = np.asarray(x_dst, dtype=float)
    if len(x_src) < 8 or len(x_src) != len(x_dst):
        raise InsufficientDataError(f"need at least 8 correspondences, got {len(x_src)}")
    a, Ta = normalize_points(x_src)
    b, Tb = normalize_points(x_dst)
    A = np.column_stack(
        [
            b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0],
            b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1],
            a[:, 0], a[:, 1], np.ones(len(a)),
        ]
    )
    _, s, Vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("design matrix has rank < 8")
    E = Tb.T @ Vt[-1].reshape(3, 3) @ Ta
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def sampson_distance(E, x_src, x_dst) -> np.ndarray:
    """First-order geometric error of each correspondence (not squared)."""
    a = np.column_stack([x_src, np.ones(len(x_src))])
    b = np.column_stack([x_dst, np.ones(len(x_dst))])
    Ea = a @ E.T
    Etb = b @ E
    num = np.sum(b * Ea, axis=1)
    den = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def _triangulate_depths(R, t, a, b):
    """Depths of each correspondence in both cameras (DLT triangulation)."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    depths = np.empty((len(a), 2))
    for k in range(len(a)):
        M = np.stack(
            [
                a[k, 0] * P1[2] - P1[0],
                a[k, 1] * P1[2] - P1[1],
                b[k, 0] * P2[2] - P2[0],
                b[k, 1] * P2[2] - P2[1],
            ]
        )
        X = np.linalg.svd(M)[2][-1]
        X = X[:3] / X[3] if abs(X[3]) > 1e-15 else X[:3] * 1e15
        depths[k] = (X[2], (R @ X + t)[2])
    return depths


def essential_candidates(E) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    return [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]


def decompose_essential(E, x_src, x_dst) -> RelativePose:
    """Pick the (R, t) candidate that puts most points in front of both cameras."""
    x_src = np.atleast_2d(np.asarray(x_src, dtype=float))
    x_dst = np.atleast_2d(np.asarray(x_dst, dtype=float))
    if len(x_src) < 1:
        raise InsufficientDataError("cheirality test needs at least one correspondence")
    counts = []
    cands = essential_candidates(E)
    for R, t in cands:
        d = _triangulate_depths(R, t, x_src, x_dst)
        counts.append(int(np.sum((d[:, 0] > 0) & (d[:, 1] > 0))))
    best = int(np.argmax(counts))
    if counts.count(counts[best]) > 1:
        raise AmbiguousDecompositionError(f"cheirality counts tie: {counts}")
    R, t = cands[best]
    return RelativePose(matrix_to_quat(R), t)


def estimate_relative_pose(x_src, x_dst, config: RansacConfig = RansacConfig()) -> tuple[RelativePose, np.ndarray]:
    """RANSAC over 8-point samples, then a refit on the consensus set.

    The returned mask is recomputed with the final model, so every inlier's
    Sampson distance is within the threshold.
    """
    x_src = np.asarray(x_src, dtype=float)
    x_dst = np.asarray(x_dst, dtype=float)
    n = len(x_src)
    if n < 8:
        raise InsufficientDataError(f"need at least 8 correspondences, got {n}")
    rng = np.random.default_rng(config.rng_seed)

    best_mask = None
    last_error: Exception | None = None
    for _ in range(config.max_iterations):
        sample = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point_essential(x_src[sample], x_dst[sample])
        except DegenerateConfigurationError as exc:
            last_error = exc
            continue
        mask = sampson_distance(E, x_src, x_dst) < config.inlier_threshold
        if best_mask is None or mask.sum() > best_mask.sum():
            best_mask = mask
            if mask.all():
                break
    if best_mask is None:
        raise last_error
    if best_mask.sum() < max(config.min_inliers, 8):
        raise NoModelError(f"best consensus {int(best_mask.sum())} below min_inliers {config.min_inliers}")

    E = eight_point_essential(x_src[best_mask], x_dst[best_mask])
    mask = sampson_distance(E, x_src, x_dst) < config.inlier_threshold
    if mask.sum() < max(config.min_inliers, 1):
        raise NoModelError("refit model lost its consensus")
    pose = decompose_essential(E, x_src[mask], x_dst[mask])
    return pose, mask
