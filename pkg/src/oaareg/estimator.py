"""Pose estimation from putative correspondences.

Three estimators share one inlier-counting kernel:

* :func:`fsr_estimate` -- spectral seeding, per-seed consensus sets weighted
  by feature-similarity compatibility, one weighted-SVD hypothesis per seed,
  best hypothesis by inlier count.
* :func:`ransac_estimate` -- 3-point RANSAC with a final inlier refit.
* :func:`wsvd_estimate` -- a single confidence-weighted SVD fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import expit

from .core import CorrespondenceSet, RigidTransform
from .errors import DegenerateInputError, EstimationError
from .parallel import ordered_map

CONSENSUS_METRICS = ("spatial", "confidence", "compatibility")
_CHUNK = 1000


@dataclass(frozen=True)
class EstimatorConfig:
    seed_radius: float = 0.1
    seed_fraction: float = 0.3
    consensus_k: int = 20
    sigma_s: float = 10.0
    tau_a: float = 0.1
    ransac_iters: int = 50_000
    rng_seed: int = 0
    consensus_metric: str = "compatibility"
    squared_residual_test: bool = False
    spectral_cap: int = 3000
    power_iters: int = 100
    wsvd_top_k: int = 250
    fsr_refit: bool = True

    def __post_init__(self):
        for name in ("seed_radius", "sigma_s", "tau_a"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.seed_fraction <= 1.0:
            raise ValueError("seed_fraction must lie in (0, 1]")
        if self.consensus_k < 3:
            raise ValueError("consensus_k must be >= 3")
        for name in ("ransac_iters", "spectral_cap", "power_iters", "wsvd_top_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.consensus_metric not in CONSENSUS_METRICS:
            raise ValueError(f"consensus_metric must be one of {CONSENSUS_METRICS}")


# ---------------------------------------------------------------------------
# spectral machinery
# ---------------------------------------------------------------------------


class LeadingWeights(NamedTuple):
    vector: NDArray[np.float64]
    eigenvalue: float
    iterations: int
    degenerate: bool


def _power_iteration(m: NDArray, iters: int, tol: float = 1e-9):
    """Batched power iteration on ``(B, k, k)`` nonnegative matrices.

    Each batch member stops updating once its step is below ``tol``. A matrix
    that maps the iterate to zero gets the uniform vector and a degeneracy flag.
    Iterates use ``M + cI`` with ``c`` half the largest absolute row sum: same
    eigenvectors, but a spectrum such as ``{l, -l}`` no longer oscillates.
    """
    b, k, _ = m.shape
    shift = 0.5 * np.abs(m).sum(axis=2).max(axis=1)
    x = np.full((b, k), 1.0 / np.sqrt(k))
    active = np.ones(b, dtype=bool)
    degenerate = np.zeros(b, dtype=bool)
    used = np.zeros(b, dtype=np.int64)
    for _ in range(iters):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        sub = m if idx.size == b else m[idx]
        y = np.matmul(sub, x[idx][:, :, None])[:, :, 0] + shift[idx, None] * x[idx]
        norm = np.linalg.norm(y, axis=1)
        dead = norm <= 0.0
        if dead.any():
            degenerate[idx[dead]] = True
            active[idx[dead]] = False
        live = idx[~dead]
        y = y[~dead] / norm[~dead, None]
        step = np.linalg.norm(y - x[live], axis=1)
        x[live] = y
        used[live] += 1
        active[live[step < tol]] = False
    eig = np.einsum("bi,bij,bj->b", x, m, x)
    return x, eig, used, degenerate


def leading_weights(cm: ArrayLike, iters: int = 1000, tol: float = 1e-9) -> LeadingWeights:
    """Leading eigenvector of a symmetric nonnegative matrix by power iteration
    from the uniform vector."""
    m = np.asarray(cm, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ValueError("compatibility matrix must be square and non-empty")
    if np.any(m < 0) or not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
        raise ValueError("compatibility matrix must be symmetric and nonnegative")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x, eig, used, degenerate = _power_iteration(m[None], iters, tol)
    return LeadingWeights(x[0], float(eig[0]), int(used[0]), bool(degenerate[0]))


def consistency_kernel(src_a, tgt_a, src_b, tgt_b, sigma_d: float) -> NDArray[np.float64]:
    """``max(0, 1 - (|p_a - p_b| - |q_a - q_b|)^2 / sigma_d^2)`` for all (a, b)."""
    d = cdist(src_a, src_b)
    d -= cdist(tgt_a, tgt_b)
    d *= d
    d *= -1.0 / sigma_d**2
    d += 1.0
    return np.maximum(d, 0.0, out=d)


def spectral_scores(
    src: NDArray, tgt: NDArray, sigma_d: float, cap: int = 3000, rng_seed: int = 0, power_iters: int = 100
) -> NDArray[np.float64]:
    """Spectral-matching reliability of every correspondence.

    The leading eigenvector of the zero-diagonal consistency matrix is computed
    on at most ``cap`` correspondences (a seeded uniform subsample when there
    are more); every correspondence is then scored by its consistency with
    that subsample, weighted by the eigenvector.
    """
    n = src.shape[0]
    if n > cap:
        sub = np.sort(np.random.default_rng(rng_seed).choice(n, size=cap, replace=False))
    else:
        sub = np.arange(n)
    m_sub = consistency_kernel(src[sub], tgt[sub], src[sub], tgt[sub], sigma_d)
    np.fill_diagonal(m_sub, 0.0)
    vec, _, _, _ = _power_iteration(m_sub[None], power_iters)
    vec = vec[0]
    if n <= cap:
        return m_sub @ vec
    scores = np.empty(n)
    scores[sub] = m_sub @ vec
    rest = np.setdiff1d(np.arange(n), sub)
    for start in range(0, rest.size, _CHUNK):
        rows = rest[start : start + _CHUNK]
        scores[rows] = consistency_kernel(src[rows], tgt[rows], src[sub], tgt[sub], sigma_d) @ vec
    return scores


def _local_maxima(points: NDArray, scores: NDArray, radius: float) -> NDArray[np.bool_]:
    """True where no other point within ``radius`` has a strictly higher score."""
    pairs = cKDTree(points).query_pairs(r=radius, output_type="ndarray")
    is_max = np.ones(points.shape[0], dtype=bool)
    a, b = pairs[:, 0], pairs[:, 1]
    is_max[a[scores[b] > scores[a]]] = False
    is_max[b[scores[a] > scores[b]]] = False
    return is_max


def select_seeds(
    c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig(), *, scores: Optional[NDArray] = None
) -> NDArray[np.int64]:
    """Indices of seed correspondences, highest spectral score first.

    A seed is a local maximum of the spectral score among correspondences whose
    source points lie within ``seed_radius``; at most
    ``ceil(seed_fraction * |c|)`` seeds are returned.
    """
    n = len(c)
    if n == 0:
        raise ValueError("cannot select seeds from an empty correspondence set")
    if scores is None:
        scores = spectral_scores(
            c.source_points, c.target_points, cfg.tau_a, cfg.spectral_cap, cfg.rng_seed, cfg.power_iters
        )
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.nonzero(_local_maxima(c.source_points, scores, cfg.seed_radius))[0]
    order = candidates[np.lexsort((candidates, -scores[candidates]))]
    limit = math.ceil(cfg.seed_fraction * n)
    return order[:limit]


# ---------------------------------------------------------------------------
# consensus sets and feature compatibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConsensusSet:
    seed: int
    members: NDArray[np.int64]
    weights: Optional[NDArray[np.float64]] = field(default=None)


def _consensus_keys(seed: int, c: CorrespondenceSet, metric: str, sigma_d: float):
    src = c.source_points
    spatial = np.linalg.norm(src - src[seed], axis=1)
    if metric == "spatial":
        return spatial, -c.confidence
    if metric == "confidence":
        return np.abs(c.confidence - c.confidence[seed]), spatial
    compat = consistency_kernel(src[seed : seed + 1], c.target_points[seed : seed + 1], src, c.target_points, sigma_d)[0]
    return -compat, spatial


def build_consensus(seed: int, c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig()) -> ConsensusSet:
    """Seed plus its ``consensus_k - 1`` nearest correspondences.

    Nearness is ``cfg.consensus_metric``: source-point distance (ties to the
    higher confidence), confidence difference (ties to the nearer source
    point) or geometric consistency with the seed (ties to the nearer source
    point). Remaining ties go to the lower index; the seed always comes first.
    """
    n = len(c)
    k = cfg.consensus_k
    if n < k:
        raise ValueError(f"need at least consensus_k={k} correspondences, got {n}")
    if not 0 <= seed < n:
        raise IndexError("seed index out of range")
    primary, secondary = _consensus_keys(seed, c, cfg.consensus_metric, cfg.tau_a)
    primary = primary.copy()
    primary[seed] = -np.inf
    cutoff = np.partition(primary, k - 1)[k - 1]
    pool = np.nonzero(primary <= cutoff)[0]
    pool = pool[np.lexsort((pool, secondary[pool], primary[pool]))]
    return ConsensusSet(int(seed), pool[:k])


def compatibility_from_distances(raw: ArrayLike, sigma_s: float) -> NDArray[np.float64]:
    """Feature-similarity scores -> min-compatibility matrix (batched on leading axes).

    Distances are normalised to ``1 - d / max(d)`` (all 0.5 when every
    distance is zero), spread with ``sigmoid((x - mean(x)) * sigma_s)``, and
    ``CM[a, b] = min(score_a, score_b)``.
    """
    d = np.asarray(raw, dtype=np.float64)
    dmax = d.max(axis=-1, keepdims=True)
    safe = np.where(dmax > 0.0, dmax, 1.0)
    norm = np.where(dmax > 0.0, 1.0 - d / safe, 0.5)
    score = expit((norm - norm.mean(axis=-1, keepdims=True)) * sigma_s)
    return np.minimum(score[..., :, None], score[..., None, :])


def feature_compatibility(
    cs: ConsensusSet, c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig()
) -> NDArray[np.float64]:
    if c.source.descriptors is None or c.target.descriptors is None:
        raise ValueError("feature compatibility needs descriptors on both clouds")
    fs = c.source.descriptors[c.source_index[cs.members]]
    ft = c.target.descriptors[c.target_index[cs.members]]
    return compatibility_from_distances(np.linalg.norm(fs - ft, axis=1), cfg.sigma_s)


# ---------------------------------------------------------------------------
# closed-form fitting and hypothesis scoring
# ---------------------------------------------------------------------------


def _kabsch_batched(src: NDArray, tgt: NDArray, w: NDArray):
    """Weighted Procrustes for ``(B, n, 3)`` point sets.

    Returns rotations, translations and a mask of non-degenerate fits
    (cross-covariance of rank >= 2 and at least three positive weights).
    """
    wsum = w.sum(axis=1)
    ok = (np.count_nonzero(w > 0, axis=1) >= 3) & (wsum > 0)
    wn = w / np.where(wsum > 0, wsum, 1.0)[:, None]
    cs = np.einsum("bn,bni->bi", wn, src)
    ct = np.einsum("bn,bni->bi", wn, tgt)
    h = np.einsum("bn,bni,bnj->bij", wn, src - cs[:, None], tgt - ct[:, None])
    u, sv, vt = np.linalg.svd(h)
    ok &= (sv[:, 0] > 1e-15) & (sv[:, 1] > 1e-9 * np.maximum(sv[:, 0], 1e-300))
    v = vt.transpose(0, 2, 1)
    sign = np.sign(np.linalg.det(v @ u.transpose(0, 2, 1)))
    sign[sign == 0] = 1.0
    d = np.ones((src.shape[0], 3))
    d[:, 2] = sign
    rot = (v * d[:, None, :]) @ u.transpose(0, 2, 1)
    trans = ct - np.einsum("bij,bj->bi", rot, cs)
    return rot, trans, ok


def weighted_svd(src_points, tgt_points, weights=None) -> RigidTransform:
    """Rigid transform minimising ``sum w_i |R p_i + t - q_i|^2``."""
    src = np.asarray(src_points, dtype=np.float64)
    tgt = np.asarray(tgt_points, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != tgt.shape:
        raise ValueError("point arrays must both be (N, 3)")
    w = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != src.shape[0]:
        raise ValueError("one weight per pair required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    rot, trans, ok = _kabsch_batched(src[None], tgt[None], w[None])
    if not ok[0]:
        raise DegenerateInputError("weighted support is collinear, coincident or has < 3 pairs")
    return RigidTransform(_nearest_rotation(rot[0]), trans[0])


def _nearest_rotation(r: NDArray) -> NDArray:
    """Polar re-projection onto SO(3); removes SVD round-off only."""
    u, _, vt = np.linalg.svd(r)
    d = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return u @ d @ vt


def count_inliers(
    rotations: NDArray, translations: NDArray, src: NDArray, tgt: NDArray, tau: float, squared: bool = False
) -> NDArray[np.int64]:
    """Per-hypothesis count of ``|R p + t - q| < tau`` (or ``|.|^2 < tau`` when ``squared``)."""
    limit = tau if squared else tau * tau
    counts = np.empty(rotations.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // max(1, src.shape[0]))
    for start in range(0, rotations.shape[0], step):
        r = rotations[start : start + step]
        t = translations[start : start + step]
        res = np.matmul(src[None], r.transpose(0, 2, 1)) + (t[:, None, :] - tgt[None])
        counts[start : start + step] = np.count_nonzero(np.einsum("bni,bni->bn", res, res) < limit, axis=1)
    return counts


def select_hypothesis(
    candidates: Sequence[RigidTransform], c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig()
) -> RigidTransform:
    """Candidate supported by the most correspondences; ties go to the earliest."""
    if len(candidates) == 0:
        raise ValueError("no candidate transforms")
    rot = np.stack([t.rotation for t in candidates])
    trans = np.stack([t.translation for t in candidates])
    counts = count_inliers(rot, trans, c.source_points, c.target_points, cfg.tau_a, cfg.squared_residual_test)
    return candidates[int(np.argmax(counts))]


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def fsr_estimate(c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig()) -> RigidTransform:
    """Feature-similarity-weighted seeding estimator (no random sampling).

    Correspondences are first put in canonical (source, target) order so the
    result does not depend on input order.
    """
    k = cfg.consensus_k
    if len(c) < k:
        raise ValueError(f"need at least consensus_k={k} correspondences, got {len(c)}")
    if c.source.descriptors is None or c.target.descriptors is None:
        raise ValueError("FSR needs descriptors on both clouds")
    c = c.take(c.canonical_order())
    src, tgt = c.source_points, c.target_points
    seeds = select_seeds(c, cfg)
    members = np.stack([build_consensus(int(s), c, cfg).members for s in seeds])

    raw = np.linalg.norm(
        c.source.descriptors[c.source_index[members]] - c.target.descriptors[c.target_index[members]], axis=2
    )
    cm = compatibility_from_distances(raw, cfg.sigma_s)
    weights, _, _, _ = _power_iteration(cm, cfg.power_iters)
    rot, trans, ok = _kabsch_batched(src[members], tgt[members], weights)
    if not ok.any():
        raise EstimationError("every FSR consensus set was degenerate")
    rot, trans = rot[ok], trans[ok]
    counts = count_inliers(rot, trans, src, tgt, cfg.tau_a, cfg.squared_residual_test)
    best = int(np.argmax(counts))
    if not cfg.fsr_refit:
        return RigidTransform(_nearest_rotation(rot[best]), trans[best])
    return _refit_on_inliers(rot[best], trans[best], src, tgt, cfg)


def _refit_on_inliers(rot, trans, src, tgt, cfg: EstimatorConfig) -> RigidTransform:
    """Unit-weight SVD on the pairs the hypothesis accepts; falls back to the hypothesis."""
    limit = cfg.tau_a if cfg.squared_residual_test else cfg.tau_a**2
    res = src @ rot.T + trans - tgt
    inliers = np.einsum("ni,ni->n", res, res) < limit
    try:
        return weighted_svd(src[inliers], tgt[inliers])
    except DegenerateInputError:
        return RigidTransform(_nearest_rotation(rot), trans)


def _ransac_chunk(args):
    seed_seq, size, src, tgt, tau, squared = args
    rng = np.random.default_rng(seed_seq)
    n = src.shape[0]
    idx = rng.integers(0, n, size=(size, 3))
    distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
    rot, trans, ok = _kabsch_batched(src[idx], tgt[idx], np.ones((size, 3)))
    ok &= distinct
    if not ok.any():
        return -1, None, None
    counts = count_inliers(rot[ok], trans[ok], src, tgt, tau, squared)
    best = int(np.argmax(counts))
    return int(counts[best]), rot[ok][best], trans[ok][best]


def ransac_estimate(
    c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig(), *, threads: Optional[int] = None
) -> RigidTransform:
    """3-point RANSAC for ``cfg.ransac_iters`` hypotheses, then a refit on the
    winner's inliers.

    Hypotheses are drawn in fixed-size chunks, each from its own generator
    spawned from ``cfg.rng_seed``, so the output does not depend on ``threads``.
    """
    if len(c) < 3:
        raise ValueError("RANSAC needs at least 3 correspondences")
    src, tgt = c.source_points, c.target_points
    sizes = [_CHUNK] * (cfg.ransac_iters // _CHUNK)
    if cfg.ransac_iters % _CHUNK:
        sizes.append(cfg.ransac_iters % _CHUNK)
    seqs = np.random.SeedSequence(cfg.rng_seed).spawn(len(sizes))
    jobs = [(s, n, src, tgt, cfg.tau_a, cfg.squared_residual_test) for s, n in zip(seqs, sizes)]
    results = ordered_map(_ransac_chunk, jobs, threads)
    best_count, best_rot, best_trans = -1, None, None
    for count, rot, trans in results:
        if count > best_count:
            best_count, best_rot, best_trans = count, rot, trans
    if best_rot is None:
        raise EstimationError("RANSAC found no non-degenerate minimal sample")
    return _refit_on_inliers(best_rot, best_trans, src, tgt, cfg)


def wsvd_estimate(c: CorrespondenceSet, cfg: EstimatorConfig = EstimatorConfig()) -> RigidTransform:
    """Confidence-weighted SVD on the ``wsvd_top_k`` most confident pairs."""
    if len(c) < 3:
        raise ValueError("weighted SVD needs at least 3 correspondences")
    c = c.take(c.canonical_order())
    order = np.lexsort((np.arange(len(c)), -c.confidence))[: cfg.wsvd_top_k]
    try:
        return weighted_svd(c.source_points[order], c.target_points[order], c.confidence[order])
    except DegenerateInputError as exc:
        raise EstimationError(str(exc)) from exc


ESTIMATORS = {"fsr": fsr_estimate, "ransac": ransac_estimate, "wsvd": wsvd_estimate}
