"""Correspondence, pose, patch and overlap metrics against direct computations."""

import json
import math

import numpy as np
import pytest

from oaareg import metrics
from oaareg.coarse_match import PatchCorrespondenceSet
from oaareg.core import CorrespondenceSet, PointCloud, RigidTransform, random_transform, rotation_about_axis
from oaareg.metrics import (
    EvalReport,
    RecallCriterion,
    chamfer,
    inlier_stats,
    is_registered,
    overlap_bce,
    overlap_bce_loss,
    patch_overlap_matrix,
    patch_stats,
    registration_errors,
    rotation_error_deg,
)


def _pairs(n, seed, corrupt=0.5):
    rng = np.random.default_rng(seed)
    src = rng.uniform(size=(n, 3))
    gt = random_transform(rng)
    tgt = gt.apply(src)
    bad = rng.random(n) < corrupt
    tgt[bad] += rng.uniform(-1, 1, size=(bad.sum(), 3))
    c = CorrespondenceSet.from_pairs(PointCloud(src), PointCloud(tgt), np.column_stack([np.arange(n)] * 2))
    return c, gt


class TestConstants:
    def test_printed_values(self):
        assert metrics.IR_THRESHOLD_M == 0.1
        assert metrics.FMR_THRESHOLD == 0.05
        assert metrics.RMSE_THRESHOLD_M == 0.2
        assert metrics.RRE_THRESHOLD_DEG == 5.0
        assert metrics.RTE_THRESHOLD_M == 2.0

    def test_defaults_wired(self):
        import inspect

        assert inspect.signature(inlier_stats).parameters["tau"].default == 0.1
        assert inspect.signature(inlier_stats).parameters["fmr_threshold"].default == 0.05
        sig = inspect.signature(is_registered).parameters
        assert sig["rmse_threshold"].default == 0.2
        assert sig["rre_threshold"].default == 5.0
        assert sig["rte_threshold"].default == 2.0


class TestInlierStats:
    def test_clean(self):
        c, gt = _pairs(40, 0, corrupt=0.0)
        assert inlier_stats(c, gt) == (1.0, True)

    def test_empty(self):
        c, gt = _pairs(5, 1)
        assert inlier_stats(c.take(np.zeros(0, dtype=int)), gt) == (0.0, False)

    def test_hand_count(self):
        c, gt = _pairs(100, 2)
        count = 0
        for x in c:
            p = c.source.points[x.source_index]
            q = c.target.points[x.target_index]
            count += math.dist(list(gt.rotation @ p + gt.translation), list(q)) < 0.1
        ir, hit = inlier_stats(c, gt)
        assert ir == count / 100 and hit == (ir > 0.05)

    def test_invariant_under_common_motion(self):
        c, gt = _pairs(60, 3)
        m = random_transform(np.random.default_rng(4))
        moved = CorrespondenceSet(
            PointCloud(m.apply(c.source.points)), PointCloud(m.apply(c.target.points)),
            c.source_index, c.target_index, c.confidence,
        )
        # p' = M p, q' = M q, so the conjugated truth is M gt M^-1
        conj = RigidTransform(
            m.rotation @ gt.rotation @ m.rotation.T,
            m.rotation @ gt.translation + m.translation - m.rotation @ gt.rotation @ m.rotation.T @ m.translation,
        )
        assert inlier_stats(moved, conj)[0] == inlier_stats(c, gt)[0]


class TestRegistrationErrors:
    def test_identical(self):
        gt = random_transform(np.random.default_rng(5))
        assert registration_errors(gt, gt, np.random.default_rng(6).normal(size=(10, 3))) == (0.0, 0.0, 0.0)

    def test_ten_degrees_about_z(self):
        gt = random_transform(np.random.default_rng(7))
        est = RigidTransform(rotation_about_axis([0, 0, 1], np.radians(10)) @ gt.rotation, gt.translation)
        rre, rte, _ = registration_errors(est, gt, np.zeros((1, 3)))
        assert abs(rre - 10.0) < 1e-9 and rte == 0.0

    def test_matches_arccos_form(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b = random_transform(rng), random_transform(rng)
            cos = (np.trace(a.rotation.T @ b.rotation) - 1) / 2
            ref = math.degrees(math.acos(min(1.0, max(-1.0, cos))))
            assert abs(rotation_error_deg(b.rotation, a.rotation) - ref) < 1e-6

    def test_rmse_brute(self):
        rng = np.random.default_rng(9)
        est, gt = random_transform(rng), random_transform(rng)
        pts = rng.normal(size=(25, 3))
        ref = math.sqrt(sum(float(np.sum((est.rotation @ p + est.translation - gt.rotation @ p - gt.translation) ** 2))
                            for p in pts) / 25)
        assert abs(registration_errors(est, gt, pts)[2] - ref) < 1e-12

    def test_recall_criteria(self):
        assert is_registered(10.0, 5.0, 0.19)
        assert not is_registered(0.0, 0.0, 0.2)
        assert is_registered(4.9, 1.9, 9.0, RecallCriterion.RRE_RTE)
        assert not is_registered(5.0, 0.0, 0.0, "rre_rte")


class TestChamfer:
    def test_identical(self):
        pts = np.random.default_rng(10).normal(size=(30, 3))
        assert chamfer(pts, pts) == 0.0

    def test_two_point_analytic(self):
        d = 0.7
        # a -> b: (0 + d^2) / 2 ; b -> a: 0
        assert abs(chamfer([[0, 0, 0], [d, 0, 0]], [[0, 0, 0]]) - d * d / 2) < 1e-15

    def test_brute_and_symmetric(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(55, 3))
        d2 = ((a[:, None] - b[None]) ** 2).sum(axis=2)
        ref = d2.min(axis=1).mean() + d2.min(axis=0).mean()
        assert abs(chamfer(a, b) - ref) < 1e-12
        assert chamfer(a, b) == chamfer(b, a)

    def test_empty(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


class TestPatchStats:
    def test_all_true(self):
        truth = np.ones((3, 3), dtype=bool)
        pir, pop = patch_stats(PatchCorrespondenceSet([0, 1], [2, 0], [1, 1]), truth)
        assert pir == 1.0 and math.isnan(pop)

    def test_prediction_equals_labels(self):
        lab = (np.array([1, 0, 1], bool), np.array([0, 1], bool))
        _, pop = patch_stats(PatchCorrespondenceSet([], [], []), np.zeros((3, 2), bool), lab, lab)
        assert pop == 1.0

    def test_confusion_matrix(self):
        rng = np.random.default_rng(12)
        truth = rng.random((10, 12)) < 0.3
        pairs = PatchCorrespondenceSet(rng.integers(0, 10, 30), rng.integers(0, 12, 30), np.ones(30))
        pred = (rng.random(10) < 0.5, rng.random(12) < 0.5)
        lab = (rng.random(10) < 0.5, rng.random(12) < 0.5)
        pir, pop = patch_stats(pairs, truth, pred, lab)
        hits = sum(truth[i, j] for i, j in zip(pairs.source_index, pairs.target_index))
        tp = sum(int(p and l) for side in (0, 1) for p, l in zip(pred[side], lab[side]))
        fp = sum(int(p and not l) for side in (0, 1) for p, l in zip(pred[side], lab[side]))
        assert pir == hits / 30 and pop == tp / (tp + fp)

    def test_overlap_matrix(self):
        s = PointCloud(np.zeros((4, 3)))
        truth = CorrespondenceSet.from_pairs(s, s, [[0, 1], [3, 2]])
        m = patch_overlap_matrix(np.array([0, 0, 1, 1]), np.array([1, 0, 0, 1]), 2, 2, truth)
        assert m[0, 0] and m[1, 0] and m.sum() == 2


class TestOverlapBce:
    def test_perfect(self):
        eps = 1e-9
        lab = np.array([1, 0, 1, 0])
        assert abs(overlap_bce(np.where(lab == 1, 1 - eps, eps), lab)) < 1e-8

    def test_half(self):
        v = overlap_bce(np.full(6, 0.5), [1, 0, 1, 1, 0, 0])
        assert abs(v - math.log(0.5)) < 1e-15 and v < 0
        assert overlap_bce_loss(np.full(6, 0.5), [1, 0, 1, 1, 0, 0]) == -v

    def test_formula(self):
        rng = np.random.default_rng(13)
        o, l = rng.uniform(0.01, 0.99, 50), (rng.random(50) < 0.5).astype(float)
        ref = sum(li * math.log(oi) + (1 - li) * math.log(1 - oi) for oi, li in zip(o, l)) / 50
        assert abs(overlap_bce(o, l) - ref) < 1e-12

    def test_clamped(self):
        assert math.isfinite(overlap_bce([0.0, 1.0], [1, 0]))
        assert abs(overlap_bce([0.0], [1]) - math.log(1e-12)) < 1e-9


class TestEvalReport:
    def test_json_field_names(self):
        rep = EvalReport(ir=0.5, fmr=1.0, rr=1.0, rre_deg=0.1, rte_m=0.01, rmse_m=0.02, chamfer=0.0,
                         pir=0.4, pop=math.nan, overlap_bce=-0.1)
        data = json.loads(rep.to_json())
        assert list(data)[:10] == list(metrics.REPORT_FIELDS)
        assert data["pop"] is None

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            EvalReport(ir=1.5)
        with pytest.raises(ValueError):
            EvalReport(rte_m=-1.0)
