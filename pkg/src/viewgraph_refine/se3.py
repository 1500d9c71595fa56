"""Quaternion, rotation and rigid-transform helpers.

Conventions used throughout the package:

* quaternions are Hamilton, stored scalar-first ``(w, x, y, z)``;
* an :class:`AbsolutePose` maps world coordinates to camera coordinates,
  ``x_cam = R @ x_world + t``;
* a :class:`RelativePose` from camera ``i`` to camera ``j`` holds the rotation
  ``R_j R_i^T`` and the *direction* of ``t_j - R_j R_i^T t_i``.

Angles are radians internally and degrees at the API surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    pass


class DegenerateBaselineError(ValueError):
    pass


class DegenerateMatrixError(ValueError):
    pass


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise InvalidInputError(f"quaternion must have shape (4,), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("quaternion has non-finite entries")
    return q


def normalize_quat(q) -> np.ndarray:
    q = _as_quat(q)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise InvalidInputError("cannot normalize a zero quaternion")
    return q / n


def _unit_quat(q) -> np.ndarray:
    # already-unit values are kept as-is so stored poses reload bit-exactly
    q = _as_quat(q)
    n = np.linalg.norm(q)
    if abs(n - 1.0) <= 1e-14:
        return q
    return normalize_quat(q)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def hamilton_product(a, b) -> np.ndarray:
    """Raw Hamilton product, no normalization (used by the loss too)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_compose(a, b) -> np.ndarray:
    """Compose two rotations; ``R(quat_compose(a, b)) == R(a) @ R(b)``."""
    a = _as_quat(a)
    b = _as_quat(b)
    for q in (a, b):
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise InvalidInputError("quat_compose expects unit quaternions")
    return normalize_quat(hamilton_product(a, b))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = normalize_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_to_quat(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def rotation_angle_deg(a, b) -> float:
    """Angle of the rotation taking ``a`` to ``b``, in degrees, sign-invariant.

    Evaluated as ``2 * atan2(|vec(a* b)|, |scalar(a* b)|)``, which equals
    ``2 * acos(|<a, b>|)`` but keeps full precision near zero.
    """
    rel = hamilton_product(quat_conjugate(_as_quat(a)), _as_quat(b))
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))))


def vector_angle_deg(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.linalg.norm(u) == 0.0 or np.linalg.norm(v) == 0.0:
        raise InvalidInputError("angle undefined for a zero vector")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v))))


def project_to_so3(m) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) to ``m``, returned as a quaternion."""
    return matrix_to_quat(project_matrix_to_so3(m))


def project_matrix_to_so3(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidInputError("expected a finite 3x3 matrix")
    U, s, Vt = np.linalg.svd(m)
    if s[-1] < 1e-12:
        raise DegenerateMatrixError(f"matrix is rank deficient (sigma_min={s[-1]:.3g})")
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class AbsolutePose:
    """World-to-camera extrinsics ``[R | t]``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _unit_quat(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_matrix(cls, M) -> "AbsolutePose":
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3].copy())

    @classmethod
    def from_center(cls, rotation, center) -> "AbsolutePose":
        R = quat_to_matrix(rotation)
        return cls(rotation, -R @ np.asarray(center, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, AbsolutePose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Rotation plus unit translation direction from one camera frame to another."""

    rotation: np.ndarray
    translation_dir: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _unit_quat(self.rotation))
        t = np.asarray(self.translation_dir, dtype=float).reshape(3)
        n = np.linalg.norm(t)
        if not np.isfinite(n) or n < 1e-12:
            raise InvalidInputError("translation direction must be a nonzero finite vector")
        if abs(n - 1.0) > 1e-14:
            t = t / n
        object.__setattr__(self, "translation_dir", t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def __eq__(self, other):
        if not isinstance(other, RelativePose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation_dir, other.translation_dir)
        )


def relative_transform(pose_i: AbsolutePose, pose_j: AbsolutePose) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and *scaled* translation of ``M_j M_i^{-1}``."""
    R_ij = pose_j.R @ pose_i.R.T
    return R_ij, pose_j.translation - R_ij @ pose_i.translation


def relative_pose(pose_i: AbsolutePose, pose_j: AbsolutePose) -> RelativePose:
    R_ij, t_ij = relative_transform(pose_i, pose_j)
    if np.linalg.norm(t_ij) < 1e-12:
        raise DegenerateBaselineError("camera centers coincide; translation direction undefined")
    return RelativePose(matrix_to_quat(R_ij), t_ij)


def invert_relative(r: RelativePose) -> RelativePose:
    # M^{-1} = [R^T | -R^T t]
    return RelativePose(quat_conjugate(r.rotation), -r.R.T @ r.translation_dir)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed unit quaternion."""
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)
