import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from viewgraph_refine import metrics, synth
from viewgraph_refine.se3 import (
    AbsolutePose,
    InvalidInputError,
    RelativePose,
    axis_angle_to_quat,
    quat_compose,
    random_quat,
    random_unit_vector,
)

from conftest import random_pose


def edges_with_error(gt_graph, angle_deg):
    """Every edge rotated by ``angle_deg`` about a random axis."""
    rng = np.random.default_rng(0)
    out = []
    for e in gt_graph.edges:
        dq = axis_angle_to_quat(random_unit_vector(rng), np.radians(angle_deg))
        out.append(type(e)(e.src, e.dst, RelativePose(quat_compose(dq, e.pose.rotation), e.pose.translation_dir), e.shared_tracks))
    return out


class TestSummaries:
    def test_lower_median(self):
        assert metrics.lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
        assert metrics.lower_median([5.0, 1.0, 3.0]) == 3.0
        assert np.isnan(metrics.lower_median([]))

    def test_strict_threshold(self):
        assert metrics.percent_below([1.0, 3.0, 5.0, 7.0], 5.0) == 50.0

    def test_per_graph_vs_pooled(self):
        per_graph = [[1.0, 1.0, 1.0], [2.0, 20.0]]
        by_graph = metrics.summarize_graphs(per_graph, (5.0,))
        pooled = metrics.summarize_graphs(per_graph, (5.0,), pooled=True)
        assert by_graph.below_thresholds[5.0] == 50.0
        assert pooled.below_thresholds[5.0] == 80.0
        assert by_graph.median == pooled.median == 1.0

    @pytest.mark.invariant
    @given(st.lists(st.floats(0.0, 200.0), min_size=1, max_size=40))
    def test_threshold_monotonicity(self, errors):
        s = metrics.summarize(errors, metrics.ROTATION_THRESHOLDS_DEG)
        pct = [s.below_thresholds[t] for t in metrics.ROTATION_THRESHOLDS_DEG]
        assert all(0.0 <= p <= 100.0 for p in pct)
        assert pct == sorted(pct)
        assert s.median == metrics.lower_median(s.per_item_errors)


class TestRelative:
    def test_exact(self, small_graph):
        rot, tdir = metrics.relative_pose_errors(small_graph.edges, small_graph.edges)
        assert rot.median == pytest.approx(0.0, abs=1e-6) and tdir.median == pytest.approx(0.0, abs=1e-6)
        assert all(v == 100.0 for v in rot.below_thresholds.values())

    def test_constant_twenty_degrees(self, small_graph):
        rot, _ = metrics.relative_pose_errors(edges_with_error(small_graph, 20.0), small_graph.edges)
        assert rot.median == pytest.approx(20.0, abs=1e-9)
        assert rot.below_thresholds[10.0] == 0.0 and rot.below_thresholds[30.0] == 100.0

    def test_brute_force_oracle(self, small_graph):
        noisy = synth.corrupt_edges(small_graph, synth.NoiseModel(15.0, 15.0), 3)
        rot, tdir = metrics.relative_pose_errors(noisy.edges, small_graph.edges)
        for e, g, r, t in zip(noisy.edges, small_graph.edges, rot.per_item_errors, tdir.per_item_errors):
            Rd = e.pose.R @ g.pose.R.T
            ang = np.degrees(np.arccos(np.clip((np.trace(Rd) - 1) / 2, -1, 1)))
            cos = e.pose.translation_dir @ g.pose.translation_dir
            assert r == pytest.approx(ang, abs=1e-5)
            assert t == pytest.approx(np.degrees(np.arccos(np.clip(cos, -1, 1))), abs=1e-5)
        errs = sorted(rot.per_item_errors)
        assert rot.median == errs[(len(errs) - 1) // 2]
        for th, pct in rot.below_thresholds.items():
            assert pct == pytest.approx(100.0 * sum(x < th for x in errs) / len(errs), abs=1e-12)

    def test_mismatch(self, small_graph):
        with pytest.raises(InvalidInputError):
            metrics.relative_pose_errors(small_graph.edges[1:], small_graph.edges)


class TestAbsolute:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.gt = [random_pose(rng) for _ in range(6)]

    def test_perfect(self):
        rot, t = metrics.absolute_pose_errors(self.gt, self.gt)
        assert rot.median == 0.0 and t.median == 0.0

    def test_centers_off(self):
        shifted = [AbsolutePose.from_center(p.rotation, p.center + np.array([0.0, 0.3, 0.0])) for p in self.gt]
        _, t = metrics.absolute_pose_errors(shifted, self.gt)
        assert t.median == pytest.approx(0.3)
        assert t.below_thresholds[0.25] == 0.0 and t.below_thresholds[0.5] == 100.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        est = [AbsolutePose.from_center(quat_compose(axis_angle_to_quat(random_unit_vector(rng), rng.uniform(0, 1)), p.rotation), p.center + rng.normal(size=3) * 0.2) for p in self.gt]
        rot, t = metrics.absolute_pose_errors(est, self.gt)
        for e, g, r, d in zip(est, self.gt, rot.per_item_errors, t.per_item_errors):
            Rd = e.R.T @ g.R
            assert r == pytest.approx(np.degrees(np.arccos(np.clip((np.trace(Rd) - 1) / 2, -1, 1))), abs=1e-5)
            assert d == pytest.approx(np.sqrt(np.sum((e.center - g.center) ** 2)))

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            metrics.absolute_pose_errors(self.gt[:2], self.gt)


class TestAlignment:
    @given(st.integers(0, 10_000))
    def test_similarity_recovered(self, seed):
        rng = np.random.default_rng(seed)
        gt = [random_pose(rng) for _ in range(5)]
        S = metrics.Similarity(AbsolutePose(random_quat(rng), np.zeros(3)).R, rng.normal(size=3), float(rng.uniform(0.2, 5.0)))
        est = [S.apply(p) for p in gt]
        aligned = metrics.align_poses(est, gt)
        assert max(np.linalg.norm(a.center - g.center) for a, g in zip(aligned, gt)) < 1e-9
        rot, _ = metrics.absolute_errors(aligned, gt)
        assert rot.max() < 1e-6

    def test_two_poses_rigid(self):
        rng = np.random.default_rng(2)
        gt = [random_pose(rng) for _ in range(2)]
        est = [metrics.Similarity(np.eye(3), np.zeros(3), 3.0).apply(p) for p in gt]
        aligned = metrics.align_poses(est, gt)
        d_est = np.linalg.norm(est[0].center - est[1].center)
        d_al = np.linalg.norm(aligned[0].center - aligned[1].center)
        assert d_al == pytest.approx(d_est)

    def test_collinear_falls_back_to_rigid(self):
        gt = [AbsolutePose.from_center(np.array([1.0, 0, 0, 0]), np.array([k, 0.0, 0.0])) for k in range(4)]
        est = [metrics.Similarity(np.eye(3), np.zeros(3), 2.0).apply(p) for p in gt]
        aligned = metrics.align_poses(est, gt)
        assert np.linalg.norm(aligned[0].center - aligned[3].center) == pytest.approx(6.0)

    def test_too_few(self):
        one = [AbsolutePose.from_center(np.array([1.0, 0, 0, 0]), np.zeros(3))]
        with pytest.raises(InvalidInputError):
            metrics.align_poses(one, one)

    @pytest.mark.invariant
    @given(st.integers(0, 10_000))
    def test_optimality(self, seed):
        rng = np.random.default_rng(seed)
        gt = [random_pose(rng) for _ in range(6)]
        est = [AbsolutePose.from_center(p.rotation, p.center + rng.normal(size=3)) for p in gt]
        aligned = metrics.align_poses(est, gt)
        assert metrics.alignment_residual(aligned, gt) <= metrics.alignment_residual(est, gt) + 1e-9

    @pytest.mark.invariant
    @given(st.integers(0, 10_000))
    def test_rotation_error_gauge_invariant(self, seed):
        rng = np.random.default_rng(seed)
        gt = [random_pose(rng) for _ in range(4)]
        est = [random_pose(rng) for _ in range(4)]
        T = metrics.Similarity(AbsolutePose(random_quat(rng), np.zeros(3)).R, rng.normal(size=3), 1.0)
        a, _ = metrics.absolute_errors(est, gt)
        b, _ = metrics.absolute_errors([T.apply(p) for p in est], [T.apply(p) for p in gt])
        assert np.allclose(a, b, atol=1e-9)

    def test_align_rotations(self):
        rng = np.random.default_rng(3)
        gt = [random_pose(rng) for _ in range(5)]
        S = AbsolutePose(random_quat(rng), np.zeros(3)).R
        est = [metrics.Similarity(S, np.zeros(3), 1.0).apply(p) for p in gt]
        rot, _ = metrics.absolute_errors(metrics.align_rotations(est, gt), gt)
        assert rot.max() < 1e-6


class TestReport:
    def summaries(self, seed=0):
        rng = np.random.default_rng(seed)
        return {
            "rot_deg": metrics.summarize(rng.uniform(0, 60, 40), metrics.ROTATION_THRESHOLDS_DEG),
            "tdir_deg": metrics.summarize(rng.uniform(0, 60, 40), metrics.ROTATION_THRESHOLDS_DEG),
        }

    def test_single_row(self):
        text, csv = metrics.report_table([self.summaries()], ["initial"])
        lines = text.splitlines()
        assert len(lines) == 3 and lines[2].startswith("initial")
        assert lines[2].count("|") == 2
        assert all(len(cells.split()) == 6 for cells in lines[2].split("|")[1:])
        assert csv.splitlines()[0] == ",".join(metrics.CSV_COLUMNS)

    def test_deterministic(self):
        a = metrics.report_table([self.summaries(1), self.summaries(2)], ["initial", "refined"])
        b = metrics.report_table([self.summaries(1), self.summaries(2)], ["initial", "refined"])
        assert a == b

    def test_parse_back(self):
        s = self.summaries(3)
        parsed = metrics.parse_report_csv(metrics.report_csv([s], ["x"]))
        for metric, summary in s.items():
            values = parsed[("x", metric)]
            expected = [summary.below_thresholds[t] for t in metrics.ROTATION_THRESHOLDS_DEG] + [summary.median]
            assert np.allclose(values, expected, atol=0.005 + 1e-12)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            metrics.report_table([], [])

    def test_rolling_distribution(self):
        errors = np.arange(100, 0, -1, dtype=float)
        rows = metrics.rolling_distribution(errors, window=50).splitlines()
        assert rows[0] == "rank,error,rolling_mean"
        last = rows[-1].split(",")
        assert float(last[1]) == 100.0 and float(last[2]) == pytest.approx(np.mean(np.arange(51, 101)))
        assert float(rows[1].split(",")[2]) == 1.0


@given(arrays(float, 6, elements=st.floats(0, 1)))
def test_pooled_percentages_bounded(errs):
    s = metrics.summarize_graphs([errs[:3], errs[3:]], metrics.TRANSLATION_THRESHOLDS_M, pooled=True)
    assert all(0 <= v <= 100 for v in s.below_thresholds.values())
