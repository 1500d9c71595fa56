"""Four-part PoserNet loss on raw (un-normalized) edge outputs.

Per edge, with ``q`` and ``t`` the raw quaternion and translation outputs:

* orientation: angle of ``conj(q_gt) * q / |q|``, radians, sign invariant;
* translation direction: angle between ``t`` and ``t_gt``, radians;
* ``| |q| - 1 |`` and ``| |t| - 1 |`` norm penalties.

``total = orient + tr_dir + alpha * (q_norm + tr_norm)``.  Each component is
a weighted mean over edges; the default weights give every graph in a batch
equal weight.  Gradients are written out by hand; at zero error (and at unit
norm for the penalties) the subgradient 0 is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..se3 import InvalidInputError
from . import autodiff as ad

_EPS = 1e-300
_KINK_TOL = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    orient: float
    tr_dir: float
    q_norm: float
    tr_norm: float
    total: float


def per_graph_weights(edge_graph: np.ndarray, num_graphs: int) -> np.ndarray:
    """``1 / (E_g * G)`` for each edge: mean over edges, then over graphs."""
    counts = np.bincount(edge_graph, minlength=num_graphs).astype(float)
    return 1.0 / (counts[edge_graph] * num_graphs)


def _angle_and_grad(x, y, dx_dv, dy_dv, norm_sq):
    """``atan2(y, x)`` and its gradient given d(x)/dv, d(y)/dv row-wise."""
    angle = np.arctan2(y, x)
    safe = y > 1e-15
    coef = np.where(safe, 1.0 / np.maximum(norm_sq, _EPS), 0.0)[:, None]
    grad = coef * (x[:, None] * dy_dv - y[:, None] * dx_dv)
    return angle, grad


def orientation_terms(q: np.ndarray, q_gt: np.ndarray):
    """Per-edge rotation error (radians) and its gradient w.r.t. raw ``q``."""
    d = np.sum(q * q_gt, axis=1)
    n2 = np.sum(q * q, axis=1)
    y = np.sqrt(np.maximum(n2 - d * d, 0.0))
    x = np.abs(d)
    dx = np.sign(d)[:, None] * q_gt
    safe_y = np.where(y > 1e-15, y, 1.0)[:, None]
    dy = (q - d[:, None] * q_gt) / safe_y
    half, g = _angle_and_grad(x, y, dx, dy, n2)
    return 2.0 * half, 2.0 * g


def direction_terms(t: np.ndarray, t_gt: np.ndarray):
    """Per-edge translation direction error (radians) and gradient w.r.t. ``t``."""
    g_unit = t_gt / np.linalg.norm(t_gt, axis=1, keepdims=True)
    x = np.sum(t * g_unit, axis=1)
    perp = t - x[:, None] * g_unit
    y = np.linalg.norm(perp, axis=1)
    safe_y = np.where(y > 1e-15, y, 1.0)[:, None]
    return _angle_and_grad(x, y, g_unit, perp / safe_y, np.sum(t * t, axis=1))


def norm_terms(v: np.ndarray):
    n = np.linalg.norm(v, axis=1)
    safe_n = np.where(n > 0, n, 1.0)[:, None]
    # a unit vector's float norm is 1 +- ulp; treat that as the kink
    sign = np.where(np.abs(n - 1.0) > _KINK_TOL, np.sign(n - 1.0), 0.0)
    return np.abs(n - 1.0), sign[:, None] * v / safe_n


def loss_tensor(edges: ad.Tensor, gt_quat, gt_dir, weights, alpha: float) -> tuple[ad.Tensor, LossBreakdown]:
    if gt_quat is None or gt_dir is None:
        raise InvalidInputError("loss needs ground-truth relative poses")
    h = edges.value
    t, q = h[:, :3], h[:, 3:]
    orient, g_orient = orientation_terms(q, gt_quat)
    tdir, g_tdir = direction_terms(t, gt_dir)
    qn, g_qn = norm_terms(q)
    tn, g_tn = norm_terms(t)
    w = np.asarray(weights, dtype=float)
    parts = [float(w @ orient), float(w @ tdir), float(w @ qn), float(w @ tn)]
    total = parts[0] + parts[1] + alpha * (parts[2] + parts[3])

    grad = np.zeros_like(h)
    grad[:, :3] = w[:, None] * (g_tdir + alpha * g_tn)
    grad[:, 3:] = w[:, None] * (g_orient + alpha * g_qn)

    def back(g):
        edges._accumulate(g * grad)

    return ad.Tensor(total, (edges,), back), LossBreakdown(*parts, total)


def loss(raw_edges, gt_quat, gt_dir, alpha: float = 0.1, weights=None) -> LossBreakdown:
    """Loss of raw edge outputs (E, 7) against ground-truth relative poses."""
    raw_edges = np.asarray(raw_edges, dtype=float)
    if weights is None:
        weights = np.full(len(raw_edges), 1.0 / max(len(raw_edges), 1))
    return loss_tensor(ad.Tensor(raw_edges), gt_quat, gt_dir, weights, alpha)[1]
