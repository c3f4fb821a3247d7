"""Dense correspondences inside matched patches via entropic optimal transport
with a dustbin row/column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .coarse_match import PatchCorrespondenceSet
from .core import CorrespondenceSet, PointCloud
from .errors import DegenerateInputError


@dataclass(frozen=True, eq=False)
class PatchAssignment:
    """Partition of dense points by nearest superpoint."""

    labels: NDArray[np.int64]
    members: List[NDArray[np.int64]]

    def __len__(self) -> int:
        return len(self.members)


def assign_patches(dense: PointCloud, superpoints: PointCloud) -> PatchAssignment:
    """Assign every dense point to its nearest superpoint; ties go to the lowest index."""
    if len(dense) == 0 or len(superpoints) == 0:
        raise ValueError("patch assignment needs non-empty dense and superpoint clouds")
    k = min(8, len(superpoints))
    dist, idx = cKDTree(superpoints.points).query(dense.points, k=k)
    dist = np.asarray(dist).reshape(len(dense), k)
    idx = np.asarray(idx).reshape(len(dense), k)
    tied = dist <= dist[:, :1]
    labels = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(len(superpoints) + 1))
    members = [order[bounds[i] : bounds[i + 1]] for i in range(len(superpoints))]
    return PatchAssignment(labels, members)


def transport_marginals(m: int, n: int, with_dustbin: bool):
    """Prescribed row/column masses. Real rows and columns carry 1; without a
    dustbin the columns carry ``m / n`` so both sides hold mass ``m``; the
    dustbin row carries ``n`` and the dustbin column ``m``.
    """
    if with_dustbin:
        rows = np.concatenate([np.ones(m), [float(n)]])
        cols = np.concatenate([np.ones(n), [float(m)]])
    else:
        rows = np.ones(m)
        cols = np.full(n, m / n)
    return rows, cols


def _lse(x: NDArray, axis: int) -> NDArray:
    """log-sum-exp along ``axis``; every slice holds at least one finite entry."""
    m = x.max(axis=axis, keepdims=True)
    return np.log(np.exp(x - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def _sinkhorn_log(log_k: NDArray, log_mu: NDArray, log_nu: NDArray, iters: int, trace=None) -> NDArray:
    """Batched log-domain Sinkhorn on ``(B, M, N)`` kernels. Padded rows/columns
    carry ``-inf`` log-mass and end up with zero plan entries.
    """
    u = np.zeros(log_mu.shape)
    v = np.where(np.isfinite(log_nu), 0.0, -np.inf)
    for _ in range(iters):
        u = log_mu - _lse(log_k + v[:, None, :], axis=2)
        v = log_nu - _lse(log_k + u[:, :, None], axis=1)
        if trace is not None:
            # columns are exact after the v-update; only the rows can be off
            row_mass = np.exp(_lse(log_k + v[:, None, :], axis=2) + u)
            trace.append(float(np.abs(row_mass - np.exp(log_mu)).sum()))
    return np.exp(log_k + u[:, :, None] + v[:, None, :])


def sinkhorn(
    cost,
    iters: int = 100,
    with_dustbin: bool = False,
    dustbin_cost: float = -1.0,
    *,
    trace: Optional[list] = None,
) -> NDArray[np.float64]:
    """Entropic transport plan for kernel ``exp(-cost)``.

    With ``with_dustbin`` an extra row and column of constant cost
    ``dustbin_cost`` is appended and the plan is ``(m+1) x (n+1)``.
    Masses follow :func:`transport_marginals`. If ``trace`` is a list, the L1
    row-marginal error after every round is appended to it.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost must be a non-empty 2D matrix")
    if not np.all(np.isfinite(cost)) or not np.isfinite(dustbin_cost):
        raise ValueError("sinkhorn costs must be finite")
    if int(iters) != iters or iters < 1:
        raise ValueError("iters must be an integer >= 1")
    m, n = cost.shape
    log_k = -cost
    if with_dustbin:
        log_k = np.pad(log_k, ((0, 1), (0, 1)), constant_values=-dustbin_cost)
    rows, cols = transport_marginals(m, n, with_dustbin)
    plan = _sinkhorn_log(log_k[None], np.log(rows)[None], np.log(cols)[None], int(iters), trace)
    return plan[0]


@dataclass(frozen=True)
class FineMatchConfig:
    """Dense matching constants: scores are ``cosine / temperature`` and the
    dustbin entries carry ``dustbin_score`` in the same units.
    """

    iters: int = 100
    temperature: float = 0.1
    dustbin_score: float = 1.0
    max_patch_size: Optional[int] = None
    batch_size: int = 64

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        if self.max_patch_size is not None and self.max_patch_size < 1:
            raise ValueError("max_patch_size must be >= 1 when set")


def _unit(x: NDArray) -> NDArray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("dense feature with zero norm")
    return x / norms


def _patch_members(assign: PatchAssignment, idx: int, points: NDArray, centre: Optional[NDArray], cap):
    members = assign.members[idx]
    if cap is not None and members.size > cap and centre is not None:
        d = np.linalg.norm(points[members] - centre, axis=1)
        members = members[np.argsort(d, kind="stable")[:cap]]
    return members


def one_to_one(src: NDArray, tgt: NDArray, conf: NDArray) -> NDArray[np.int64]:
    """Greedy max-confidence selection so each source and target index appears once.

    Ties fall to the lower (source, target) pair; the result does not depend
    on input order. Returns positions into the input arrays.
    """
    order = np.lexsort((tgt, src, -conf))
    used_s, used_t = set(), set()
    keep = []
    for pos in order:
        s, t = int(src[pos]), int(tgt[pos])
        if s in used_s or t in used_t:
            continue
        used_s.add(s)
        used_t.add(t)
        keep.append(pos)
    return np.asarray(sorted(keep, key=lambda p: (src[p], tgt[p])), dtype=np.int64)


def extract_dense(
    patch_pairs: PatchCorrespondenceSet,
    src_assign: PatchAssignment,
    tgt_assign: PatchAssignment,
    src_dense: PointCloud,
    tgt_dense: PointCloud,
    cfg: FineMatchConfig = FineMatchConfig(),
    *,
    src_feats=None,
    tgt_feats=None,
    src_superpoints: Optional[PointCloud] = None,
    tgt_superpoints: Optional[PointCloud] = None,
) -> CorrespondenceSet:
    """Run dustbin Sinkhorn inside every patch pair and keep mutual-top entries.

    A pair (a, b) survives when ``b`` is the argmax of row ``a`` and ``a`` the
    argmax of column ``b``, both taken over the dustbin-augmented plan. The
    plan value is the confidence. Conflicts between patch pairs are resolved
    by :func:`one_to_one`.
    """
    src_f = _unit(np.asarray(src_dense.descriptors if src_feats is None else src_feats, dtype=np.float64))
    tgt_f = _unit(np.asarray(tgt_dense.descriptors if tgt_feats is None else tgt_feats, dtype=np.float64))
    cap = cfg.max_patch_size
    src_c = None if src_superpoints is None else src_superpoints.points
    tgt_c = None if tgt_superpoints is None else tgt_superpoints.points

    blocks = []
    for a, b in zip(patch_pairs.source_index, patch_pairs.target_index):
        rows = _patch_members(src_assign, a, src_dense.points, None if src_c is None else src_c[a], cap)
        cols = _patch_members(tgt_assign, b, tgt_dense.points, None if tgt_c is None else tgt_c[b], cap)
        if rows.size == 0 or cols.size == 0:
            raise ValueError(f"patch pair ({a}, {b}) references an empty patch")
        blocks.append((rows, cols))

    # Similar shapes share a batch to limit padding.
    order = sorted(range(len(blocks)), key=lambda i: (blocks[i][0].size, blocks[i][1].size, i))
    found_s, found_t, found_c = [], [], []
    for start in range(0, len(order), cfg.batch_size):
        batch = [blocks[i] for i in order[start : start + cfg.batch_size]]
        mm = max(r.size for r, _ in batch)
        nn = max(c.size for _, c in batch)
        log_k = np.zeros((len(batch), mm + 1, nn + 1))
        log_mu = np.full((len(batch), mm + 1), -np.inf)
        log_nu = np.full((len(batch), nn + 1), -np.inf)
        for bi, (rows, cols) in enumerate(batch):
            m, n = rows.size, cols.size
            log_k[bi, :m, :n] = (src_f[rows] @ tgt_f[cols].T) / cfg.temperature
            log_k[bi, :, nn] = cfg.dustbin_score
            log_k[bi, mm, :] = cfg.dustbin_score
            log_mu[bi, :m] = 0.0
            log_mu[bi, mm] = np.log(n)
            log_nu[bi, :n] = 0.0
            log_nu[bi, nn] = np.log(m)
        plan = _sinkhorn_log(log_k, log_mu, log_nu, cfg.iters)
        row_best = plan.argmax(axis=2)
        col_best = plan.argmax(axis=1)
        for bi, (rows, cols) in enumerate(batch):
            m = rows.size
            i = np.arange(m)
            j = row_best[bi, :m]
            ok = (j < cols.size) & (col_best[bi, np.minimum(j, nn)] == i)
            found_s.append(rows[i[ok]])
            found_t.append(cols[j[ok]])
            found_c.append(plan[bi, i[ok], j[ok]])

    if found_s:
        s = np.concatenate(found_s)
        t = np.concatenate(found_t)
        c = np.concatenate(found_c)
    else:
        s = t = np.zeros(0, dtype=np.int64)
        c = np.zeros(0)
    keep = one_to_one(s, t, c) if s.size else np.zeros(0, dtype=np.int64)
    return CorrespondenceSet(src_dense, tgt_dense, s[keep], t[keep], c[keep])
