"""Evaluation quantities: IR/FMR, RRE/RTE/RMSE and registration recall,
Chamfer distance, patch-level PIR/POP and the overlap BCE term.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .attention import OverlapScores
from .coarse_match import PatchCorrespondenceSet
from .core import CorrespondenceSet, PointCloud, RigidTransform

# thresholds used by the indoor and outdoor benchmarks
IR_THRESHOLD_M = 0.1
FMR_THRESHOLD = 0.05
RMSE_THRESHOLD_M = 0.2
RRE_THRESHOLD_DEG = 5.0
RTE_THRESHOLD_M = 2.0

BCE_CLAMP = 1e-12


class RecallCriterion(str, Enum):
    RMSE = "rmse"
    RRE_RTE = "rre_rte"


def inlier_stats(
    c: CorrespondenceSet, gt: RigidTransform, tau: float = IR_THRESHOLD_M, fmr_threshold: float = FMR_THRESHOLD
):
    """``(ir, hit)``: fraction of pairs with residual below ``tau`` and whether it exceeds ``fmr_threshold``."""
    if len(c) == 0:
        return 0.0, False
    res = np.linalg.norm(gt.apply(c.source_points) - c.target_points, axis=1)
    ir = float(np.mean(res < tau))
    return ir, ir > fmr_threshold


def rotation_error_deg(r_est: NDArray, r_gt: NDArray) -> float:
    """Geodesic angle between two rotations, in degrees.

    Evaluated as ``atan2(|skew|, (trace - 1) / 2)``, which equals the arccos
    form but stays accurate near 0 and 180 degrees.
    """
    d = r_gt.T @ r_est
    cos = (np.trace(d) - 1.0) / 2.0
    sin = 0.5 * np.linalg.norm([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
    return float(np.degrees(np.arctan2(sin, cos)))


def registration_errors(est: RigidTransform, gt: RigidTransform, src: PointCloud | ArrayLike):
    """``(rre_deg, rte_m, rmse_m)``; RMSE is over ``|T_est p - T_gt p|`` for the given points."""
    pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64).reshape(-1, 3)
    rre = rotation_error_deg(est.rotation, gt.rotation)
    rte = float(np.linalg.norm(est.translation - gt.translation))
    if pts.shape[0] == 0:
        rmse = 0.0
    else:
        rmse = float(np.sqrt(np.mean(np.sum((est.apply(pts) - gt.apply(pts)) ** 2, axis=1))))
    return rre, rte, rmse


def is_registered(
    rre_deg: float,
    rte_m: float,
    rmse_m: float,
    criterion: RecallCriterion = RecallCriterion.RMSE,
    rmse_threshold: float = RMSE_THRESHOLD_M,
    rre_threshold: float = RRE_THRESHOLD_DEG,
    rte_threshold: float = RTE_THRESHOLD_M,
) -> bool:
    if RecallCriterion(criterion) is RecallCriterion.RMSE:
        return rmse_m < rmse_threshold
    return rre_deg < rre_threshold and rte_m < rte_threshold


def chamfer(a: PointCloud | ArrayLike, b: PointCloud | ArrayLike) -> float:
    """Mean squared nearest-neighbour distance a->b plus the same b->a."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64).reshape(-1, 3)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    dab = cKDTree(pb).query(pa, k=1)[0]
    dba = cKDTree(pa).query(pb, k=1)[0]
    return float(np.mean(dab**2) + np.mean(dba**2))


def patch_overlap_matrix(
    src_labels: NDArray, tgt_labels: NDArray, n_src: int, n_tgt: int, truth: CorrespondenceSet
) -> NDArray[np.bool_]:
    """``[a, b]`` is True when some true dense pair links patch ``a`` to patch ``b``."""
    m = np.zeros((n_src, n_tgt), dtype=bool)
    m[src_labels[truth.source_index], tgt_labels[truth.target_index]] = True
    return m


def patch_stats(
    patch_pairs: PatchCorrespondenceSet,
    patch_overlap: NDArray[np.bool_],
    predicted_overlap: Optional[tuple] = None,
    overlap_labels: Optional[tuple] = None,
):
    """``(pir, pop)``.

    ``pir`` is the fraction of patch pairs that truly overlap. ``pop`` is the
    precision of the predicted overlap superpoints (both clouds pooled)
    against the true labels; it is NaN when labels or predictions are not
    supplied and 0 when nothing is predicted.
    """
    if len(patch_pairs) == 0:
        pir = 0.0
    else:
        pir = float(np.mean(patch_overlap[patch_pairs.source_index, patch_pairs.target_index]))
    if predicted_overlap is None or overlap_labels is None:
        return pir, math.nan
    pred = np.concatenate([np.asarray(p, dtype=bool).reshape(-1) for p in predicted_overlap])
    lab = np.concatenate([np.asarray(l, dtype=bool).reshape(-1) for l in overlap_labels])
    if pred.shape != lab.shape:
        raise ValueError("predicted overlap and labels must have matching lengths")
    tp = np.count_nonzero(pred & lab)
    npred = np.count_nonzero(pred)
    return pir, (tp / npred if npred else 0.0)


def overlap_bce(scores, labels) -> float:
    """``mean(l log o + (1 - l) log(1 - o))`` -- no leading minus, so the value is <= 0.

    Scores are clamped to ``[1e-12, 1 - 1e-12]``. Use :func:`overlap_bce_loss`
    for the conventional nonnegative loss.
    """
    o = np.asarray(scores.scores if isinstance(scores, OverlapScores) else scores, dtype=np.float64).reshape(-1)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1)
    if o.shape != lab.shape:
        raise ValueError("scores and labels must have equal length")
    if o.size == 0:
        raise ValueError("overlap_bce needs at least one score")
    o = np.clip(o, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(np.mean(lab * np.log(o) + (1.0 - lab) * np.log(1.0 - o)))


def overlap_bce_loss(scores, labels) -> float:
    return -overlap_bce(scores, labels)


def symmetric_overlap_bce(src_scores, src_labels, tgt_scores, tgt_labels) -> float:
    """Average of the source-side and target-side terms."""
    return 0.5 * (overlap_bce(src_scores, src_labels) + overlap_bce(tgt_scores, tgt_labels))


REPORT_FIELDS = ("ir", "fmr", "rr", "rre_deg", "rte_m", "rmse_m", "chamfer", "pir", "pop", "overlap_bce")


@dataclass
class EvalReport:
    ir: Optional[float] = None
    fmr: Optional[float] = None
    rr: Optional[float] = None
    rre_deg: Optional[float] = None
    rte_m: Optional[float] = None
    rmse_m: Optional[float] = None
    chamfer: Optional[float] = None
    pir: Optional[float] = None
    pop: Optional[float] = None
    overlap_bce: Optional[float] = None
    counts: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ir", "fmr", "rr", "pir", "pop"):
            v = getattr(self, name)
            if v is not None and not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("rre_deg", "rte_m", "rmse_m", "chamfer"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = None
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"
