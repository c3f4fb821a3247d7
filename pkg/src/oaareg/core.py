"""Rigid-body primitives and the value types shared by every pipeline stage.

All arrays held by these types are float64/int64 copies with the writeable
flag cleared, so instances can be passed between stages (and threads) freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateInputError

ORTHONORMAL_TOL = 1e-9


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional per-point descriptors (one row per point)."""

    points: NDArray[np.float64]
    descriptors: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.descriptors is not None:
            desc = np.asarray(self.descriptors, dtype=np.float64)
            if desc.ndim != 2 or desc.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"descriptor rows ({desc.shape}) must match point count {pts.shape[0]}"
                )
            object.__setattr__(self, "descriptors", _frozen(desc))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return 0 if self.descriptors is None else self.descriptors.shape[1]

    def with_descriptors(self, descriptors: Optional[ArrayLike]) -> "PointCloud":
        return PointCloud(self.points, descriptors)

    def subset(self, index: ArrayLike) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        desc = None if self.descriptors is None else self.descriptors[index]
        return PointCloud(self.points[index], desc)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> rotation @ x + translation``.

    Construction rejects any rotation that is not orthonormal with determinant
    +1 to within ``ORTHONORMAL_TOL``; nothing is re-projected here.
    """

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if trans.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {trans.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ValueError("last row of a rigid homogeneous matrix must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform an ``(N, 3)`` array of raw coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def apply_transform(t: RigidTransform, p: PointCloud) -> PointCloud:
    return PointCloud(t.apply(p.points), p.descriptors)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rotation_about_axis(axis: ArrayLike, angle_rad: float) -> NDArray[np.float64]:
    """Rodrigues rotation matrix for a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise DegenerateInputError("rotation axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def random_transform(
    rng: np.random.Generator, max_angle_deg: float = 180.0, max_translation: float = 1.0
) -> RigidTransform:
    """Rotation about a uniformly random axis by an angle uniform in [0, max_angle_deg]."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(rotation_about_axis(axis, angle), t)


class Correspondence(NamedTuple):
    source_index: int
    target_index: int
    confidence: float


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Putative point-to-point matches ``source[i] -> target[j]`` with confidences.

    Stored column-wise; iterate to get :class:`Correspondence` tuples.
    """

    source: PointCloud
    target: PointCloud
    source_index: NDArray[np.int64]
    target_index: NDArray[np.int64]
    confidence: NDArray[np.float64]

    def __post_init__(self):
        si = np.asarray(self.source_index, dtype=np.int64).reshape(-1)
        ti = np.asarray(self.target_index, dtype=np.int64).reshape(-1)
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not (si.shape == ti.shape == conf.shape):
            raise ValueError("index and confidence arrays must have equal length")
        if si.size:
            if si.min() < 0 or si.max() >= len(self.source):
                raise ValueError("source index out of range")
            if ti.min() < 0 or ti.max() >= len(self.target):
                raise ValueError("target index out of range")
            if not np.all(np.isfinite(conf)):
                raise ValueError("confidences must be finite")
            keys = si * len(self.target) + ti
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (source_index, target_index) pairs")
        object.__setattr__(self, "source_index", _frozen(si))
        object.__setattr__(self, "target_index", _frozen(ti))
        object.__setattr__(self, "confidence", _frozen(conf))

    @classmethod
    def from_pairs(
        cls, source: PointCloud, target: PointCloud, pairs, confidence=None
    ) -> "CorrespondenceSet":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if confidence is None:
            confidence = np.ones(len(pairs))
        return cls(source, target, pairs[:, 0], pairs[:, 1], confidence)

    def __len__(self) -> int:
        return self.source_index.shape[0]

    def __iter__(self) -> Iterator[Correspondence]:
        for i, j, c in zip(self.source_index, self.target_index, self.confidence):
            yield Correspondence(int(i), int(j), float(c))

    @property
    def source_points(self) -> NDArray[np.float64]:
        return self.source.points[self.source_index]

    @property
    def target_points(self) -> NDArray[np.float64]:
        return self.target.points[self.target_index]

    def take(self, index: ArrayLike) -> "CorrespondenceSet":
        index = np.asarray(index, dtype=np.int64)
        return CorrespondenceSet(
            self.source,
            self.target,
            self.source_index[index],
            self.target_index[index],
            self.confidence[index],
        )

    def canonical_order(self) -> NDArray[np.int64]:
        """Permutation sorting pairs by (source_index, target_index)."""
        return np.lexsort((self.target_index, self.source_index))
