"""Rigid transforms, point clouds and correspondence sets."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oaareg.core import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    invert,
    random_transform,
    rotation_about_axis,
)


def _rand_t(seed):
    return random_transform(np.random.default_rng(seed), 180.0, 5.0)


def _assert_same_transform(a, b, atol):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=atol, rtol=0)
    np.testing.assert_allclose(a.translation, b.translation, atol=atol, rtol=0)


class TestPointCloud:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 3)), np.zeros((3, 8)))

    def test_rejects_non_finite(self):
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(ValueError):
            PointCloud(pts)

    def test_arrays_are_read_only_copies(self):
        raw = np.ones((5, 3))
        cloud = PointCloud(raw)
        raw[0, 0] = 7.0
        assert cloud.points[0, 0] == 1.0
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 2.0

    def test_subset_keeps_descriptors(self):
        cloud = PointCloud(np.arange(12.0).reshape(4, 3), np.eye(4))
        sub = cloud.subset([2, 0])
        np.testing.assert_array_equal(sub.points, [[6, 7, 8], [0, 1, 2]])
        np.testing.assert_array_equal(sub.descriptors, np.eye(4)[[2, 0]])
        assert cloud.descriptor_dim == 4 and len(sub) == 2


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, 1.001]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_matrix_round_trip(self):
        t = _rand_t(3)
        back = RigidTransform.from_matrix(t.as_matrix())
        np.testing.assert_array_equal(back.rotation, t.rotation)
        np.testing.assert_array_equal(back.translation, t.translation)

    def test_from_matrix_checks_last_row(self):
        m = np.eye(4)
        m[3, 0] = 0.5
        with pytest.raises(ValueError):
            RigidTransform.from_matrix(m)


class TestApplyTransform:
    def test_identity_leaves_cloud(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)), np.ones((10, 2)))
        out = apply_transform(RigidTransform.identity(), cloud)
        np.testing.assert_array_equal(out.points, cloud.points)
        np.testing.assert_array_equal(out.descriptors, cloud.descriptors)

    def test_quarter_turn_about_z(self):
        t = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
        out = apply_transform(t, PointCloud([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.normal(size=(50, 3)))
        t = _rand_t(2)
        back = apply_transform(invert(t), apply_transform(t, cloud))
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-12, rtol=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_isometry(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-10, 10, size=(20, 3))
        moved = _rand_t(seed).apply(pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
        np.testing.assert_allclose(d1, d0, atol=1e-9, rtol=0)


class TestCompose:
    def test_identity_is_neutral(self):
        t = _rand_t(4)
        _assert_same_transform(compose(RigidTransform.identity(), t), t, 0)

    def test_with_inverse_gives_identity(self):
        t = _rand_t(5)
        _assert_same_transform(compose(t, invert(t)), RigidTransform.identity(), 1e-12)
        _assert_same_transform(compose(invert(t), t), RigidTransform.identity(), 1e-12)

    def test_matches_pointwise_double_application(self):
        a, b = _rand_t(6), _rand_t(7)
        pts = np.random.default_rng(8).normal(size=(20, 3))
        np.testing.assert_allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-12, rtol=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_associative(self, seed):
        a, b, c = _rand_t(seed), _rand_t(seed + 1), _rand_t(seed + 2)
        _assert_same_transform(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-12)


class TestInvert:
    def test_identity(self):
        _assert_same_transform(invert(RigidTransform.identity()), RigidTransform.identity(), 0)

    def test_pure_translation(self):
        inv = invert(RigidTransform(np.eye(3), [0.0, 0.0, 1.0]))
        np.testing.assert_array_equal(inv.translation, [0.0, 0.0, -1.0])


class TestCorrespondenceSet:
    def _clouds(self):
        return PointCloud(np.zeros((4, 3))), PointCloud(np.ones((3, 3)))

    def test_rejects_duplicates(self):
        s, t = self._clouds()
        with pytest.raises(ValueError):
            CorrespondenceSet.from_pairs(s, t, [[0, 1], [0, 1]])

    def test_rejects_out_of_range(self):
        s, t = self._clouds()
        with pytest.raises(ValueError):
            CorrespondenceSet.from_pairs(s, t, [[0, 3]])

    def test_iteration_and_canonical_order(self):
        s, t = self._clouds()
        c = CorrespondenceSet.from_pairs(s, t, [[2, 0], [0, 2], [0, 1]], [0.1, 0.2, 0.3])
        assert [x.source_index for x in c] == [2, 0, 0]
        ordered = c.take(c.canonical_order())
        assert list(zip(ordered.source_index, ordered.target_index)) == [(0, 1), (0, 2), (2, 0)]
        np.testing.assert_array_equal(ordered.confidence, [0.3, 0.2, 0.1])
