"""Synthetic registration scenes with exact ground truth.

A base surface (one box shell plus a few spheres, unit scale) is sampled once;
the source and target views are two windows of the points sorted along a
random direction, overlapping in exactly ``round(overlap_fraction * n)``
points. The target view is moved by a random rigid transform and jittered.
Everything is a pure function of ``SceneSpec.rng_seed``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .core import CorrespondenceSet, PointCloud, RigidTransform, random_transform

# independent sub-streams of one scene seed
_STREAM_GEOMETRY, _STREAM_DESCRIPTORS, _STREAM_OVERLAP_NET = 0, 1, 2


@dataclass(frozen=True)
class SceneSpec:
    point_count: int = 4000
    overlap_fraction: float = 1.0
    noise_sigma: float = 0.0
    rotation_magnitude: float = 180.0
    descriptor_dim: int = 32
    descriptor_noise: float = 0.0
    outlier_fraction: float = 0.0
    rng_seed: int = 0
    translation_magnitude: float = 1.0

    def __post_init__(self):
        if self.point_count < 3:
            raise ValueError("point_count must be >= 3")
        if not 0.0 < self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in (0, 1]")
        if self.noise_sigma < 0 or self.descriptor_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0.0 <= self.rotation_magnitude <= 180.0:
            raise ValueError("rotation_magnitude must lie in [0, 180] degrees")
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.translation_magnitude < 0:
            raise ValueError("translation_magnitude must be nonnegative")


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), which])


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Source-to-target transform, true point pairs and per-point overlap labels."""

    transform: RigidTransform
    true_correspondences: CorrespondenceSet
    source_overlap: NDArray[np.bool_]
    target_overlap: NDArray[np.bool_]


def _sample_sphere(rng, n, centre, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return centre + radius * v


def _sample_box(rng, n, half):
    areas = 4.0 * np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), face_axis] = side * half[face_axis]
    return pts


def sample_surface(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    """Area-weighted samples on a box shell (sides 0.6-1.0) plus 2-4 spheres."""
    half = rng.uniform(0.3, 0.5, size=3)
    n_spheres = int(rng.integers(2, 5))
    centres = rng.uniform(-half, half, size=(n_spheres, 3))
    radii = rng.uniform(0.1, 0.3, size=n_spheres)
    areas = np.concatenate(
        [[8.0 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])], 4.0 * np.pi * radii**2]
    )
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [_sample_box(rng, counts[0], half)]
    for c, centre, r in zip(counts[1:], centres, radii):
        parts.append(_sample_sphere(rng, c, centre, r))
    pts = np.concatenate(parts)
    return pts[rng.permutation(n)]


def _truncated_noise(rng, n, sigma):
    if sigma == 0.0:
        return np.zeros((n, 3))
    e = rng.normal(scale=sigma, size=(n, 3))
    norm = np.linalg.norm(e, axis=1, keepdims=True)
    return e * np.minimum(1.0, 3.0 * sigma / np.maximum(norm, 1e-300))


def generate_pair(spec: SceneSpec):
    """Return ``(source, target, truth)`` for a synthetic scene.

    Target noise is Gaussian with each displacement truncated at ``3 sigma``,
    so every true pair satisfies ``|T p - q| <= 3 sigma``. Outliers replace a
    fraction of the non-overlapping points of each view with uniform clutter in
    the view's bounding box.
    """
    rng = stream(spec.rng_seed, _STREAM_GEOMETRY)
    n = spec.point_count
    shared = int(round(spec.overlap_fraction * n))
    if shared < 3:
        raise ValueError(
            f"overlap_fraction={spec.overlap_fraction} leaves {shared} shared points; need >= 3"
        )
    base = sample_surface(rng, 2 * n - shared)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    order = np.argsort(base @ direction, kind="stable")
    src_ids = order[:n]
    tgt_ids = order[n - shared : 2 * n - shared]
    tgt_perm = rng.permutation(n)
    tgt_ids = tgt_ids[tgt_perm]

    src_pts = base[src_ids].copy()
    transform = random_transform(rng, spec.rotation_magnitude, spec.translation_magnitude)
    tgt_pts = transform.apply(base[tgt_ids]) + _truncated_noise(rng, n, spec.noise_sigma)

    # source i (sorted position i) pairs with target whose sorted position is i
    tgt_pos = np.empty(n, dtype=np.int64)
    tgt_pos[tgt_perm] = np.arange(n)
    src_shared = np.arange(n - shared, n)
    tgt_shared = tgt_pos[src_shared - (n - shared)]

    src_overlap = np.zeros(n, dtype=bool)
    src_overlap[src_shared] = True
    tgt_overlap = np.zeros(n, dtype=bool)
    tgt_overlap[tgt_shared] = True

    n_out = int(round(spec.outlier_fraction * (n - shared)))
    if n_out:
        for pts, overlap in ((src_pts, src_overlap), (tgt_pts, tgt_overlap)):
            free = np.nonzero(~overlap)[0]
            pick = rng.choice(free, size=n_out, replace=False)
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            pts[pick] = rng.uniform(lo, hi, size=(n_out, 3))

    source = PointCloud(src_pts)
    target = PointCloud(tgt_pts)
    truth = CorrespondenceSet(source, target, src_shared, tgt_shared, np.ones(shared))
    return source, target, GroundTruth(transform, truth, src_overlap, tgt_overlap)


def _unit(v: NDArray) -> NDArray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def simulate_descriptors(source: PointCloud, target: PointCloud, truth: GroundTruth, spec: SceneSpec):
    """Attach unit descriptors: true partners share a random direction, each
    copy perturbed by i.i.d. ``N(0, descriptor_noise^2)`` per channel and
    renormalised; all other points get independent random directions.
    """
    rng = stream(spec.rng_seed, _STREAM_DESCRIPTORS)
    d = spec.descriptor_dim
    src_desc = _unit(rng.normal(size=(len(source), d)))
    tgt_desc = _unit(rng.normal(size=(len(target), d)))
    tc = truth.true_correspondences
    shared = _unit(rng.normal(size=(len(tc), d)))
    sigma = spec.descriptor_noise
    src_desc[tc.source_index] = _unit(shared + sigma * rng.normal(size=shared.shape))
    tgt_desc[tc.target_index] = _unit(shared + sigma * rng.normal(size=shared.shape))
    return source.with_descriptors(src_desc), target.with_descriptors(tgt_desc)


def overlap_oracle(src: PointCloud, tgt: PointCloud, t: RigidTransform, tau: float):
    """Boolean labels: point has a counterpart within ``tau`` under ``t`` (source -> target)."""
    moved = t.apply(src.points)
    src_lab = np.isfinite(cKDTree(tgt.points).query(moved, k=1, distance_upper_bound=tau)[0])
    tgt_lab = np.isfinite(cKDTree(moved).query(tgt.points, k=1, distance_upper_bound=tau)[0])
    return src_lab, tgt_lab


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Centroid of the points falling in each occupied voxel, in voxel-key order."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    centroids = np.zeros((counts.size, 3))
    np.add.at(centroids, inverse, cloud.points)
    return PointCloud(centroids / counts[:, None])


def mutual_nearest_inlier_ratio(source: PointCloud, target: PointCloud, truth: GroundTruth) -> float:
    """Inlier ratio of mutual-nearest descriptor matches whose source point is in the overlap."""
    a, b = source.descriptors, target.descriptors
    sim = a @ b.T
    fwd = sim.argmax(axis=1)
    bwd = sim.argmax(axis=0)
    src = np.nonzero((bwd[fwd] == np.arange(len(a))) & truth.source_overlap)[0]
    if src.size == 0:
        return 0.0
    partner = np.full(len(a), -1)
    partner[truth.true_correspondences.source_index] = truth.true_correspondences.target_index
    return float(np.mean(partner[src] == fwd[src]))
