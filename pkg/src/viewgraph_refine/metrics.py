"""Pose error metrics, similarity alignment and report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import graph as vg
from .se3 import AbsolutePose, InvalidInputError, matrix_to_quat, rotation_angle_deg, vector_angle_deg

ROTATION_THRESHOLDS_DEG = (3.0, 5.0, 10.0, 30.0, 45.0)
TRANSLATION_THRESHOLDS_M = (0.05, 0.1, 0.25, 0.5, 0.75)
CSV_COLUMNS = ("label", "metric", "t1", "t2", "t3", "t4", "t5", "median")
METRIC_THRESHOLDS = {
    "rot_deg": ROTATION_THRESHOLDS_DEG,
    "tdir_deg": ROTATION_THRESHOLDS_DEG,
    "t_m": TRANSLATION_THRESHOLDS_M,
}
METRIC_TITLES = {
    "rot_deg": "Orientation error (deg)",
    "tdir_deg": "Translation direction error (deg)",
    "t_m": "Translation error (m)",
}


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        return float("nan")
    return float(v[(v.size - 1) // 2])


@dataclass(frozen=True)
class ErrorSummary:
    median: float
    below_thresholds: dict
    per_item_errors: list = field(default_factory=list)


def percent_below(values, threshold: float) -> float:
    v = np.asarray(values, dtype=float)
    return 100.0 * float(np.mean(v < threshold)) if v.size else 0.0


def summarize(errors, thresholds) -> ErrorSummary:
    errors = [float(e) for e in errors]
    return ErrorSummary(lower_median(errors), {t: percent_below(errors, t) for t in thresholds}, errors)


def summarize_graphs(per_graph_errors, thresholds, pooled: bool = False) -> ErrorSummary:
    """Summary over several graphs.

    By default a graph counts toward a threshold if its mean error is below
    it.  With ``pooled`` every item of every graph counts on its own.  The
    median is always over the pooled items.
    """
    items = [float(e) for errs in per_graph_errors for e in errs]
    if pooled:
        return summarize(items, thresholds)
    means = [float(np.mean(errs)) for errs in per_graph_errors if len(errs)]
    return ErrorSummary(lower_median(items), {t: percent_below(means, t) for t in thresholds}, items)


# ---------------------------------------------------------------------------
# per-edge and per-camera errors


def relative_errors(edges: list[vg.RelativePoseEdge], gt: list[vg.RelativePoseEdge]) -> tuple[np.ndarray, np.ndarray]:
    if [(e.src, e.dst) for e in edges] != [(e.src, e.dst) for e in gt]:
        raise InvalidInputError("estimated and ground-truth edge sets differ")
    if any(e.pose is None for e in edges) or any(e.pose is None for e in gt):
        raise InvalidInputError("every edge needs a relative pose")
    rot = np.array([rotation_angle_deg(e.pose.rotation, g.pose.rotation) for e, g in zip(edges, gt)])
    tdir = np.array([vector_angle_deg(e.pose.translation_dir, g.pose.translation_dir) for e, g in zip(edges, gt)])
    return rot, tdir


def relative_pose_errors(edges, gt, thresholds=ROTATION_THRESHOLDS_DEG) -> tuple[ErrorSummary, ErrorSummary]:
    rot, tdir = relative_errors(edges, gt)
    return summarize(rot, thresholds), summarize(tdir, thresholds)


def graph_relative_errors(graph: vg.ViewGraph, reference: vg.ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    """Edge errors of ``graph`` against ground-truth relative poses of ``reference``."""
    from .synth import ground_truth_edges

    return relative_errors(graph.edges, ground_truth_edges(reference).edges)


def absolute_errors(estimated: list[AbsolutePose], gt: list[AbsolutePose]) -> tuple[np.ndarray, np.ndarray]:
    if len(estimated) != len(gt):
        raise InvalidInputError("pose lists differ in length")
    rot = np.array([rotation_angle_deg(e.rotation, g.rotation) for e, g in zip(estimated, gt)])
    dist = np.array([np.linalg.norm(e.center - g.center) for e, g in zip(estimated, gt)])
    return rot, dist


def absolute_pose_errors(estimated, gt) -> tuple[ErrorSummary, ErrorSummary]:
    rot, dist = absolute_errors(estimated, gt)
    return summarize(rot, ROTATION_THRESHOLDS_DEG), summarize(dist, TRANSLATION_THRESHOLDS_M)


# ---------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class Similarity:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, pose: AbsolutePose) -> AbsolutePose:
        """The same camera expressed in the transformed world frame ``x' = s R x + t``."""
        R = pose.R @ self.rotation.T
        c = self.scale * self.rotation @ pose.center + self.translation
        return AbsolutePose.from_center(matrix_to_quat(R), c)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """Least-squares ``dst ~ s R src + t`` (closed form)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(b.T @ a / len(src))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = np.mean(np.sum(a * a, axis=1))
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 1e-300 else 1.0
    return Similarity(R, mu_d - s * R @ mu_s, s)


def _collinear(points: np.ndarray) -> bool:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] < 1e-12 or s[1] < 1e-9 * s[0]


def align_poses(estimated: list[AbsolutePose], gt: list[AbsolutePose], with_scale: bool = True) -> list[AbsolutePose]:
    """Map estimates onto ground truth with the best similarity over camera centers.

    Falls back to a rigid transform for fewer than 3 poses or collinear centers.
    """
    if len(estimated) != len(gt):
        raise InvalidInputError("pose lists differ in length")
    if len(estimated) < 2:
        raise InvalidInputError("alignment needs at least 2 poses")
    src = np.array([p.center for p in estimated])
    dst = np.array([p.center for p in gt])
    if len(estimated) < 3 or _collinear(src) or _collinear(dst):
        with_scale = False
    T = umeyama(src, dst, with_scale)
    return [T.apply(p) for p in estimated]


def align_rotations(estimated: list[AbsolutePose], gt: list[AbsolutePose]) -> list[AbsolutePose]:
    """Rotate the estimated world frame by the chordal best fit of camera orientations.

    Rotation errors do not depend on centers, so this alignment isolates them
    from translation noise.  Centers are rotated along with the frame.
    """
    if len(estimated) != len(gt):
        raise InvalidInputError("pose lists differ in length")
    if not estimated:
        raise InvalidInputError("alignment needs at least 1 pose")
    # R_est S^T ~ R_gt  =>  S = argmax tr(S^T sum R_gt^T R_est)
    M = sum(g.R.T @ e.R for e, g in zip(estimated, gt))
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    S = U @ D @ Vt
    T = Similarity(S, np.zeros(3), 1.0)
    return [T.apply(p) for p in estimated]


def alignment_residual(estimated: list[AbsolutePose], gt: list[AbsolutePose]) -> float:
    return float(sum(np.sum((e.center - g.center) ** 2) for e, g in zip(estimated, gt)))


# ---------------------------------------------------------------------------
# reports


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def report_rows(summaries: list[dict], labels: list[str]) -> list[list[str]]:
    """One row per (label, metric), metrics in a fixed order."""
    if not summaries:
        raise InvalidInputError("report needs at least one summary")
    rows = []
    for label, group in zip(labels, summaries):
        for metric in METRIC_THRESHOLDS:
            if metric not in group:
                continue
            s = group[metric]
            pct = [s.below_thresholds[t] for t in sorted(s.below_thresholds)]
            rows.append([label, metric] + [_fmt(p) for p in pct] + [_fmt(s.median)])
    return rows


def report_csv(summaries: list[dict], labels: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(report_rows(summaries, labels))
    return buf.getvalue()


def report_table(summaries: list[dict], labels: list[str]) -> tuple[str, str]:
    """Plain-text table (one row per label, 6 columns per metric group) and its CSV."""
    rows = report_rows(summaries, labels)
    metrics = [m for m in METRIC_THRESHOLDS if any(m in g for g in summaries)]
    width = max(len(l) for l in labels) + 2
    header1 = " " * width + "".join(f"| {METRIC_TITLES[m]:<47}" for m in metrics)
    header2 = f"{'':<{width}}" + "".join(
        "| " + "".join(f"{_threshold_label(t):>7} " for t in METRIC_THRESHOLDS[m]) + f"{'eta':>7} " for m in metrics
    )
    lines = [header1, header2]
    by_label = {}
    for r in rows:
        by_label.setdefault(r[0], {})[r[1]] = r[2:]
    for label in labels:
        cells = by_label.get(label, {})
        line = f"{label:<{width}}"
        for m in metrics:
            vals = cells.get(m, ["-"] * 6)
            line += "| " + "".join(f"{v:>7} " for v in vals)
        lines.append(line.rstrip())
    return "\n".join(l.rstrip() for l in lines) + "\n", report_csv(summaries, labels)


def _threshold_label(t: float) -> str:
    return f"<{t:g}"


def parse_report_csv(text: str) -> dict:
    """``{(label, metric): [t1..t5, median]}`` from a report CSV."""
    reader = csv.DictReader(io.StringIO(text))
    return {(r["label"], r["metric"]): [float(r[c]) for c in CSV_COLUMNS[2:]] for r in reader}


def rolling_distribution(per_graph_errors, window: int = 50) -> str:
    """Sorted per-graph errors with a trailing rolling mean, as CSV."""
    v = np.sort(np.asarray(per_graph_errors, dtype=float))
    csum = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    rolling = (csum[idx] - csum[lo]) / (idx - lo)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("rank", "error", "rolling_mean"))
    for k, (e, r) in enumerate(zip(v, rolling)):
        writer.writerow((k, repr(float(e)), repr(float(r))))
    return buf.getvalue()
