"""Patch assignment, Sinkhorn transport and dense correspondence extraction."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oaareg.coarse_match import PatchCorrespondenceSet
from oaareg.core import PointCloud
from oaareg.fine_match import (
    FineMatchConfig,
    assign_patches,
    extract_dense,
    one_to_one,
    sinkhorn,
    transport_marginals,
)


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestAssignPatches:
    def test_single_superpoint(self):
        dense = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
        a = assign_patches(dense, PointCloud(np.zeros((1, 3))))
        np.testing.assert_array_equal(a.labels, 0)
        assert len(a.members[0]) == 20

    def test_coincident_gives_singletons(self):
        pts = np.random.default_rng(1).normal(size=(6, 3))
        a = assign_patches(PointCloud(pts), PointCloud(pts))
        np.testing.assert_array_equal(a.labels, np.arange(6))

    def test_ties_go_to_lowest_index(self):
        sp = PointCloud([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
        a = assign_patches(PointCloud(np.zeros((1, 3))), sp)
        assert a.labels[0] == 0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(2)
        dense, sp = rng.normal(size=(300, 3)), rng.normal(size=(25, 3))
        a = assign_patches(PointCloud(dense), PointCloud(sp))
        d = np.linalg.norm(dense[:, None] - sp[None], axis=2)
        np.testing.assert_array_equal(a.labels, d.argmin(axis=1))
        assert sorted(np.concatenate(a.members).tolist()) == list(range(300))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            assign_patches(PointCloud(np.zeros((0, 3))), PointCloud(np.zeros((1, 3))))


class TestSinkhorn:
    def test_one_by_one(self):
        np.testing.assert_allclose(sinkhorn(np.array([[0.7]])), [[1.0]])

    def test_uniform_two_by_two(self):
        np.testing.assert_allclose(sinkhorn(np.zeros((2, 2))), np.full((2, 2), 0.5), atol=1e-15)

    def test_three_by_three_marginals(self):
        plan = sinkhorn(np.random.default_rng(3).uniform(size=(3, 3)), iters=100)
        np.testing.assert_allclose(plan.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(plan.sum(axis=0), 1.0, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 16), st.booleans())
    def test_marginals_and_monotone_error(self, seed, m, n, dustbin):
        cost = np.random.default_rng(seed).normal(size=(m, n))
        trace = []
        plan = sinkhorn(cost, iters=100, with_dustbin=dustbin, trace=trace)
        rows, cols = transport_marginals(m, n, dustbin)
        assert np.all(plan >= 0)
        np.testing.assert_allclose(plan.sum(axis=1), rows, atol=1e-6)
        np.testing.assert_allclose(plan.sum(axis=0), cols, atol=1e-6)
        steps = np.diff(trace)
        assert np.all(steps <= 1e-12), steps.max()

    def test_dustbin_marginals(self):
        rows, cols = transport_marginals(3, 5, True)
        np.testing.assert_array_equal(rows, [1, 1, 1, 5])
        np.testing.assert_array_equal(cols, [1, 1, 1, 1, 1, 3])
        assert rows.sum() == cols.sum()

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            sinkhorn(np.array([[0.0, np.inf]]))
        with pytest.raises(ValueError):
            sinkhorn(np.zeros((2, 2)), iters=0)


def _single_pair(src_feats, tgt_feats, cfg=FineMatchConfig()):
    m, n = len(src_feats), len(tgt_feats)
    rng = np.random.default_rng(0)
    src = PointCloud(rng.normal(size=(m, 3)), src_feats)
    tgt = PointCloud(rng.normal(size=(n, 3)), tgt_feats)
    sa = assign_patches(src, PointCloud(np.zeros((1, 3))))
    ta = assign_patches(tgt, PointCloud(np.zeros((1, 3))))
    return extract_dense(PatchCorrespondenceSet([0], [0], [1.0]), sa, ta, src, tgt, cfg)


class TestExtractDense:
    def test_orthogonal_two_point_patches(self):
        out = _single_pair(np.eye(2), np.eye(2))
        assert set(zip(out.source_index.tolist(), out.target_index.tolist())) == {(0, 0), (1, 1)}
        assert np.all(out.confidence > 0.5)

    def test_dustbin_dominant_is_empty(self):
        src = np.tile([1.0, 0.0, 0.0], (3, 1))
        out = _single_pair(src, -src)
        assert len(out) == 0

    def test_matches_exhaustive_assignment(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            m = int(rng.integers(2, 5))
            base = _unit(rng.normal(size=(m, 8)))
            perm = rng.permutation(m)
            tgt = _unit(base[perm] + 0.05 * rng.normal(size=(m, 8)))
            sim = base @ tgt.T
            best = max(itertools.permutations(range(m)), key=lambda p: sum(sim[i, p[i]] for i in range(m)))
            out = _single_pair(base, tgt)
            assert set(zip(out.source_index.tolist(), out.target_index.tolist())) == set(enumerate(best))

    def test_locality_and_one_to_one(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(size=(200, 3))
        feats = _unit(rng.normal(size=(200, 16)))
        src = PointCloud(pts, feats)
        tgt = PointCloud(pts + 0.001, _unit(feats + 0.05 * rng.normal(size=feats.shape)))
        sp = PointCloud(rng.uniform(size=(8, 3)))
        sa, ta = assign_patches(src, sp), assign_patches(tgt, sp)
        pairs = PatchCorrespondenceSet([0, 1, 2, 3, 3], [0, 1, 2, 3, 4], np.ones(5))
        out = extract_dense(pairs, sa, ta, src, tgt)
        assert len(out) > 0
        allowed = pairs.pairs()
        for s, t in zip(out.source_index, out.target_index):
            assert (int(sa.labels[s]), int(ta.labels[t])) in allowed
        assert len(set(out.source_index.tolist())) == len(out)
        assert len(set(out.target_index.tolist())) == len(out)

    def test_batching_does_not_change_result(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(size=(150, 3))
        feats = _unit(rng.normal(size=(150, 8)))
        src = PointCloud(pts, feats)
        tgt = PointCloud(pts, _unit(feats + 0.1 * rng.normal(size=feats.shape)))
        sp = PointCloud(rng.uniform(size=(6, 3)))
        sa, ta = assign_patches(src, sp), assign_patches(tgt, sp)
        pairs = PatchCorrespondenceSet([0, 1, 2, 3, 4, 5, 0], [0, 1, 2, 3, 4, 5, 1], np.ones(7))
        a = extract_dense(pairs, sa, ta, src, tgt, FineMatchConfig(batch_size=1))
        b = extract_dense(pairs, sa, ta, src, tgt, FineMatchConfig(batch_size=64))
        np.testing.assert_array_equal(a.source_index, b.source_index)
        np.testing.assert_array_equal(a.target_index, b.target_index)
        np.testing.assert_allclose(a.confidence, b.confidence, rtol=1e-12)

    def test_empty_patch_rejected(self):
        src = PointCloud(np.zeros((2, 3)), np.eye(2))
        sp = PointCloud([[0.0, 0, 0], [5.0, 5, 5]])
        sa = assign_patches(src, sp)
        with pytest.raises(ValueError):
            extract_dense(PatchCorrespondenceSet([1], [0], [1.0]), sa, sa, src, src)


class TestOneToOne:
    def test_keeps_highest_confidence(self):
        keep = one_to_one(np.array([0, 0, 1]), np.array([0, 1, 1]), np.array([0.2, 0.9, 0.8]))
        assert keep.tolist() == [1]

    def test_tie_goes_to_lowest_pair(self):
        keep = one_to_one(np.array([1, 0]), np.array([0, 0]), np.array([0.5, 0.5]))
        assert keep.tolist() == [1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_order_independent(self, seed):
        rng = np.random.default_rng(seed)
        s, t = rng.integers(0, 6, 30), rng.integers(0, 6, 30)
        c = rng.integers(0, 4, 30).astype(float)
        keys = np.unique(s * 10 + t, return_index=True)[1]
        s, t, c = s[keys], t[keys], c[keys]
        perm = rng.permutation(len(s))
        a = {(s[i], t[i]) for i in one_to_one(s, t, c)}
        b = {(s[perm][i], t[perm][i]) for i in one_to_one(s[perm], t[perm], c[perm])}
        assert a == b
