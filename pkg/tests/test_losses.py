import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoirecon.fusion import AttentionState
from hoirecon.geom import CameraIntrinsics, PointCloud, project_points
from hoirecon.losses import (LossBreakdown, Mask, MetricsReport, SampleMetrics,
                             evaluate, loss_mask, loss_pose, loss_pose_joints,
                             loss_proj, loss_rec, loss_total, loss_weight,
                             occlusion_binned_report, occlusion_rate,
                             report_from_text, report_to_text)
from hoirecon.registration import CorrespondenceMap

CAMERA = CameraIntrinsics(300.0, 300.0, 64.0, 64.0, 128, 128)


def one_hot_state(rows, grid_shape, stride):
    hw = grid_shape[0] * grid_shape[1]
    weights = np.zeros((len(rows), hw))
    weights[np.arange(len(rows)), rows] = 1.0
    attended = np.zeros((len(rows), 1))
    return AttentionState(weights, attended,
                          np.concatenate([attended, attended], axis=1),
                          grid_shape, stride)


class TestMask:
    def test_binary_roles_reject_fractions(self):
        with pytest.raises(ValueError):
            Mask(np.full((2, 2), 0.5), "amodal")

    def test_probability_role_accepts_fractions(self):
        mask = Mask(np.full((2, 2), 0.5), "probability")
        assert mask.area() == 2

    def test_unknown_role(self):
        with pytest.raises(ValueError):
            Mask(np.zeros((2, 2)), "garbage")


class TestLossBreakdown:
    def test_total_identity(self):
        b = loss_total(rec=1.0, weight=0.0, proj=0.0, mask=0.0, ph=0.0, po=0.0)
        assert b.total == pytest.approx(1.0)

    def test_lambda_values(self):
        b = loss_total(rec=0.0, weight=1.0, proj=1.0, mask=0.0, ph=0.0, po=0.0)
        assert b.total == pytest.approx(0.11)

    def test_all_zero(self):
        assert loss_total(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).total == 0.0

    def test_nan_part_errors(self):
        with pytest.raises(ValueError, match="rec"):
            loss_total(np.nan, 0.0, 0.0, 0.0, 0.0, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6))
    def test_identity_property(self, parts):
        b = loss_total(*parts)
        expected = (parts[0] + parts[3] + parts[4] + parts[5]
                    + 0.1 * parts[1] + 0.01 * parts[2])
        assert b.total == pytest.approx(expected, abs=1e-9 * max(1.0, abs(expected)))


class TestLossWeight:
    def test_exact_hit_is_zero(self):
        # One GT point projecting exactly onto the attended cell center.
        stride = 16.0
        target_uv = np.array([1.5 * stride, 0.5 * stride])
        depth = 0.5
        point = np.array([(target_uv[0] - 64.0) * depth / 300.0,
                          (target_uv[1] - 64.0) * depth / 300.0, depth])
        gt = PointCloud(point[np.newaxis])
        state = one_hot_state([1], (8, 8), stride)
        corr = CorrespondenceMap(np.array([0]), 1)
        assert loss_weight(state, gt, corr, CAMERA) == pytest.approx(0.0, abs=1e-18)

    def test_quantization_bound_for_cell_hits(self):
        rng = np.random.default_rng(0)
        stride = 16.0
        depth = 0.5
        uv = rng.uniform(0.0, 128.0, size=(20, 2))
        pts = np.column_stack([(uv[:, 0] - 64.0) * depth / 300.0,
                               (uv[:, 1] - 64.0) * depth / 300.0,
                               np.full(20, depth)])
        cols = np.minimum((uv[:, 0] // stride).astype(int), 7)
        rows_pix = np.minimum((uv[:, 1] // stride).astype(int), 7)
        state = one_hot_state(rows_pix * 8 + cols, (8, 8), stride)
        corr = CorrespondenceMap(np.arange(20), 20)
        bound = 2.0 * (stride / 2.0) ** 2
        assert loss_weight(state, PointCloud(pts), corr, CAMERA) <= bound + 1e-9

    def test_soft_equals_hard_for_one_hot(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.normal(scale=0.05, size=(5, 2)),
                               np.full((5, 1), 0.6)])
        gt = PointCloud(pts)
        state = one_hot_state([3, 17, 40, 9, 63], (8, 8), 16.0)
        corr = CorrespondenceMap(np.arange(5), 5)
        hard = loss_weight(state, gt, corr, CAMERA, mode="hard")
        soft = loss_weight(state, gt, corr, CAMERA, mode="soft")
        assert hard == pytest.approx(soft, abs=1e-9)

    def test_length_mismatch_errors(self):
        state = one_hot_state([0], (8, 8), 16.0)
        gt = PointCloud(np.array([[0.0, 0.0, 0.5], [0.01, 0.0, 0.5]]))
        with pytest.raises(ValueError):
            loss_weight(state, gt, CorrespondenceMap(np.array([0]), 1), CAMERA)


class TestLossProj:
    def test_exact_overlap_is_zero(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.normal(scale=0.05, size=(10, 2)),
                               rng.uniform(0.4, 0.8, size=(10, 1))])
        cloud = PointCloud(pts)
        corr = CorrespondenceMap(np.arange(10), 10)
        assert loss_proj(cloud, cloud, corr, CAMERA) == 0.0

    def test_uniform_pixel_shift(self):
        # A 3-pixel shift in u for every pair gives exactly 3.0 (unsquared).
        depth = 0.5
        pts = np.array([[0.0, 0.0, depth], [0.02, -0.01, depth]])
        shift = 3.0 * depth / 300.0
        refined = pts + np.array([shift, 0.0, 0.0])
        corr = CorrespondenceMap(np.arange(2), 2)
        out = loss_proj(PointCloud(pts), PointCloud(refined), corr, CAMERA)
        assert out == pytest.approx(3.0, abs=1e-9)

    def test_matches_pairing_oracle(self):
        rng = np.random.default_rng(3)
        gt = np.column_stack([rng.normal(scale=0.05, size=(30, 2)),
                              rng.uniform(0.4, 0.8, size=(30, 1))])
        refined = np.column_stack([rng.normal(scale=0.05, size=(40, 2)),
                                   rng.uniform(0.4, 0.8, size=(40, 1))])
        indices = rng.integers(0, 40, size=30)
        corr = CorrespondenceMap(indices, 40)
        out = loss_proj(PointCloud(gt), PointCloud(refined), corr, CAMERA)
        gt_uv = project_points(CAMERA, gt)
        ref_uv = project_points(CAMERA, refined)
        oracle = np.mean([np.linalg.norm(gt_uv[i] - ref_uv[indices[i]])
                          for i in range(30)])
        assert out == pytest.approx(oracle, rel=1e-12)


class TestLossRec:
    def test_identity_zero(self):
        cloud = PointCloud(np.random.default_rng(4).normal(size=(20, 3)))
        assert loss_rec(cloud, cloud) == 0.0

    def test_singletons_one_meter(self):
        assert loss_rec(PointCloud([[0.0, 0.0, 0.0]]),
                        PointCloud([[1.0, 0.0, 0.0]])) == pytest.approx(2.0)


class TestLossMask:
    def test_near_perfect_prediction(self):
        rng = np.random.default_rng(5)
        labels = (rng.uniform(size=(16, 16)) < 0.5).astype(np.float64)
        pred = Mask(labels, "probability")  # clamped internally to 1e-7
        gt = Mask(labels, "amodal")
        assert loss_mask(pred, gt) < 1e-5 * labels.size

    def test_uniform_half_is_n_ln2(self):
        labels = (np.arange(64).reshape(8, 8) % 2).astype(np.float64)
        pred = Mask(np.full((8, 8), 0.5), "probability")
        assert loss_mask(pred, Mask(labels, "visible")) == pytest.approx(
            64.0 * np.log(2.0), rel=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(6)
        labels = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float64)
        probs = rng.uniform(0.01, 0.99, size=(6, 6))
        out = loss_mask(Mask(probs, "probability"), Mask(labels, "amodal"))
        oracle = 0.0
        for i in range(6):
            for j in range(6):
                p = min(max(probs[i, j], 1e-7), 1.0 - 1e-7)
                oracle -= (labels[i, j] * np.log(p)
                           + (1.0 - labels[i, j]) * np.log(1.0 - p))
        assert out == pytest.approx(oracle, abs=1e-9)

    def test_non_negative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            labels = (rng.uniform(size=(4, 4)) < 0.5).astype(np.float64)
            probs = rng.uniform(size=(4, 4))
            assert loss_mask(Mask(probs, "probability"),
                             Mask(labels, "amodal")) >= 0.0

    def test_role_and_shape_validation(self):
        with pytest.raises(ValueError):
            loss_mask(Mask(np.zeros((2, 2)), "amodal"),
                      Mask(np.zeros((2, 2)), "amodal"))
        with pytest.raises(ValueError):
            loss_mask(Mask(np.zeros((2, 2)), "probability"),
                      Mask(np.zeros((3, 3)), "amodal"))


class TestLossPose:
    def test_identical_zero(self):
        assert loss_pose([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_three_four_five(self):
        assert loss_pose([0.0, 0.0, 0.0], [1.0, 2.0, 2.0]) == pytest.approx(9.0)

    def test_joint_sum_decomposition(self):
        rng = np.random.default_rng(8)
        pred = rng.normal(size=(21, 3))
        gt = rng.normal(size=(21, 3))
        total = loss_pose_joints(pred, gt)
        per_joint = sum(loss_pose(pred[j], gt[j]) for j in range(21))
        assert total == pytest.approx(per_joint, rel=1e-12)


class TestOcclusionRate:
    def test_both_empty(self):
        empty = Mask(np.zeros((4, 4)), "amodal")
        assert occlusion_rate(Mask(np.zeros((4, 4)), "visible"), empty) == 0.0

    def test_half_covered_formula(self):
        amodal = np.zeros((10, 10))
        amodal.ravel()[:100] = 1.0
        visible = np.zeros((10, 10))
        visible.ravel()[:50] = 1.0
        rate = occlusion_rate(Mask(visible, "visible"), Mask(amodal, "amodal"))
        assert rate == pytest.approx(1.0 - 51.0 / 101.0)

    def test_no_occlusion(self):
        mask = (np.random.default_rng(9).uniform(size=(8, 8)) < 0.5).astype(float)
        assert occlusion_rate(Mask(mask, "visible"), Mask(mask, "amodal")) == 0.0

    def test_non_subset_warns_and_clamps(self):
        visible = Mask(np.ones((2, 2)), "visible")
        amodal = Mask(np.zeros((2, 2)), "amodal")
        with pytest.warns(UserWarning):
            assert occlusion_rate(visible, amodal) == 0.0


class TestEvaluate:
    def _records(self, rng, n=4, pred_equals_gt=False):
        records = []
        for k in range(n):
            gt_o = PointCloud(rng.normal(scale=0.05, size=(30, 3)))
            gt_h = PointCloud(rng.normal(scale=0.05, size=(21, 3)))
            pred_o = gt_o if pred_equals_gt else PointCloud(
                gt_o.points + rng.normal(scale=0.002, size=(30, 3)))
            records.append({"id": f"s{k}", "pred_object": pred_o,
                            "gt_object": gt_o, "pred_hand": gt_h,
                            "gt_hand": gt_h, "occlusion": rng.uniform()})
        return records

    def test_ground_truth_injection(self):
        rng = np.random.default_rng(10)
        report = evaluate(self._records(rng, pred_equals_gt=True))
        assert report.median_chamfer_object == 0.0
        assert report.mean_f_object() == (1.0, 1.0)
        assert report.mean_f_hand() == (1.0, 1.0)

    def test_median_of_two(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        records = [
            {"id": "a", "pred_object": PointCloud([[0.001, 0.0, 0.0]]),
             "gt_object": a, "pred_hand": a, "gt_hand": a, "occlusion": 0.0},
            {"id": "b", "pred_object": PointCloud([[0.002, 0.0, 0.0]]),
             "gt_object": a, "pred_hand": a, "gt_hand": a, "occlusion": 0.0},
        ]
        report = evaluate(records, centered=False)
        # CDs are 2 mm^2 and 8 mm^2; the even-count median averages them.
        assert report.median_chamfer_object == pytest.approx(5.0)

    def test_centered_mode_translation_invariant(self):
        rng = np.random.default_rng(11)
        records = self._records(rng)
        base = evaluate(records, centered=True)
        shifted = []
        for rec in records:
            moved = dict(rec)
            moved["pred_object"] = PointCloud(
                rec["pred_object"].points + rng.normal(size=3))
            shifted.append(moved)
        moved_report = evaluate(shifted, centered=True)
        for a, b in zip(base.samples, moved_report.samples):
            assert a.chamfer_object_mm2 == pytest.approx(b.chamfer_object_mm2,
                                                         abs=1e-9)
            assert a.f_object == b.f_object

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            evaluate([])


class TestOcclusionBinning:
    def test_ten_distinct_samples(self):
        rates = np.linspace(0.0, 0.9, 10)
        cds = np.arange(10.0)
        bins = occlusion_binned_report(rates, cds)
        assert [b["median_chamfer"] for b in bins] == list(cds)
        assert all(b["count"] == 1.0 for b in bins)

    def test_constant_chamfer_is_flat(self):
        rng = np.random.default_rng(12)
        bins = occlusion_binned_report(rng.uniform(size=40), np.full(40, 7.0))
        assert all(b["median_chamfer"] == 7.0 for b in bins)

    def test_matches_sort_and_slice_oracle(self):
        rng = np.random.default_rng(13)
        rates = rng.uniform(size=100)
        cds = rng.uniform(size=100)
        bins = occlusion_binned_report(rates, cds)
        order = np.argsort(rates, kind="stable")
        start = 0
        for b in range(10):
            members = order[start:start + 10]
            start += 10
            assert bins[b]["median_chamfer"] == pytest.approx(
                float(np.median(cds[members])))

    def test_remainder_spreads_to_earliest_bins(self):
        rng = np.random.default_rng(14)
        bins = occlusion_binned_report(rng.uniform(size=23), rng.uniform(size=23))
        assert [b["count"] for b in bins] == [3.0, 3.0, 3.0] + [2.0] * 7

    def test_fewer_than_ten_errors(self):
        with pytest.raises(ValueError):
            occlusion_binned_report(np.zeros(9), np.zeros(9))


class TestReportSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(15)
        samples = tuple(
            SampleMetrics(f"s{k}", rng.uniform(), (rng.uniform(), rng.uniform()),
                          rng.uniform(), (rng.uniform(), rng.uniform()),
                          rng.uniform())
            for k in range(5))
        report = MetricsReport(samples, (5.0, 10.0), (1.0, 5.0), centered=True)
        back = report_from_text(report_to_text(report))
        assert back.centered
        assert back.object_thresholds_mm == (5.0, 10.0)
        assert back.samples == report.samples

    def test_bit_stable(self):
        sample = SampleMetrics("a", 1.25, (0.5,), 2.5, (0.75,), 0.1)
        report = MetricsReport((sample,), (5.0,), (1.0,), centered=False)
        assert report_to_text(report) == report_to_text(report)

    def test_malformed_errors(self):
        with pytest.raises(ValueError):
            report_from_text("not a report\n")
