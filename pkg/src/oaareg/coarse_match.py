"""Superpoint-level soft matching: dual softmax thresholding, kNN expansion /
pruning and overlap gating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import softmax

from .attention import OverlapScores
from .errors import DegenerateInputError

KNN_SPACES = ("feature", "spatial")


@dataclass(frozen=True)
class MatchConfig:
    """Coarse matching tunables.

    ``temperature`` divides the similarities before both softmaxes;
    ``temperature=1`` is the plain ``softmax(S)``.
    """

    theta_m: float = 0.05
    theta_o: float = 0.5
    knn: int = 3
    temperature: float = 0.1
    knn_space: str = "feature"

    def __post_init__(self):
        if not 0.0 < self.theta_m < 1.0:
            raise ValueError(f"theta_m must lie in (0, 1), got {self.theta_m}")
        if not 0.0 < self.theta_o < 1.0:
            raise ValueError(f"theta_o must lie in (0, 1), got {self.theta_o}")
        if int(self.knn) != self.knn or self.knn < 1:
            raise ValueError(f"knn must be an integer >= 1, got {self.knn}")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        if self.knn_space not in KNN_SPACES:
            raise ValueError(f"knn_space must be one of {KNN_SPACES}")


@dataclass(frozen=True, eq=False)
class PatchCorrespondenceSet:
    """Superpoint index pairs with the match probability that admitted them."""

    source_index: NDArray[np.int64]
    target_index: NDArray[np.int64]
    probability: NDArray[np.float64]

    def __post_init__(self):
        for name, dtype in (
            ("source_index", np.int64),
            ("target_index", np.int64),
            ("probability", np.float64),
        ):
            a = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not (self.source_index.shape == self.target_index.shape == self.probability.shape):
            raise ValueError("pair arrays must have equal length")

    def __len__(self) -> int:
        return self.source_index.shape[0]

    def pairs(self) -> set:
        return set(zip(self.source_index.tolist(), self.target_index.tolist()))

    def take(self, mask_or_index) -> "PatchCorrespondenceSet":
        return PatchCorrespondenceSet(
            self.source_index[mask_or_index],
            self.target_index[mask_or_index],
            self.probability[mask_or_index],
        )


def _unit_rows(x: ArrayLike, name: str) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2D feature matrix")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{name} has a zero-norm row; cannot normalise")
    return x / norms[:, None]


def similarity(src_feats, tgt_feats) -> NDArray[np.float64]:
    """``exp(-||h_i - h_j||^2)`` between unit-normalised feature rows."""
    a = _unit_rows(src_feats, "src_feats")
    b = _unit_rows(tgt_feats, "tgt_feats")
    if a.shape[1] != b.shape[1]:
        raise ValueError("source and target features must share a channel width")
    sq = np.clip(2.0 - 2.0 * (a @ b.T), 0.0, 4.0)
    return np.exp(-sq)


def dual_softmax(s: NDArray, temperature: float = 1.0):
    """Row-wise and column-wise softmax of ``s / temperature``."""
    logits = np.asarray(s, dtype=np.float64) / temperature
    return softmax(logits, axis=1), softmax(logits, axis=0)


def _threshold(prob: NDArray, theta: float) -> PatchCorrespondenceSet:
    i, j = np.nonzero(prob >= theta)
    return PatchCorrespondenceSet(i, j, prob[i, j])


def soft_match(s, cfg: MatchConfig = MatchConfig()):
    """Threshold both softmax directions at ``theta_m``; one-to-many allowed."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise ValueError("similarity matrix must be a non-empty 2D array")
    row_prob, col_prob = dual_softmax(s, cfg.temperature)
    return _threshold(row_prob, cfg.theta_m), _threshold(col_prob, cfg.theta_m)


def _neighbours(x: NDArray, k: int) -> NDArray[np.int64]:
    """k nearest other rows of ``x`` (Euclidean), ties to the lowest index."""
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def knn_expand_prune(
    s,
    soft,
    cfg: MatchConfig = MatchConfig(),
    *,
    src_feats=None,
    tgt_feats=None,
    src_points=None,
    tgt_points=None,
) -> PatchCorrespondenceSet:
    """Expand each superpoint's best match to its k nearest neighbours and keep
    the candidates that are already in the soft-matched union.

    The neighbourhood metric is ``cfg.knn_space``: unit-normalised feature
    distance (needs ``src_feats``/``tgt_feats``) or Euclidean distance between
    superpoint coordinates (needs ``src_points``/``tgt_points``).
    """
    s = np.asarray(s, dtype=np.float64)
    n_src, n_tgt = s.shape
    k = int(cfg.knn)
    if k >= min(n_src, n_tgt):
        raise ValueError(f"knn={k} must be smaller than both superpoint counts {s.shape}")
    if cfg.knn_space == "feature":
        if src_feats is None or tgt_feats is None:
            raise ValueError("feature-space kNN needs src_feats and tgt_feats")
        src_nb = _neighbours(_unit_rows(src_feats, "src_feats"), k)
        tgt_nb = _neighbours(_unit_rows(tgt_feats, "tgt_feats"), k)
    else:
        if src_points is None or tgt_points is None:
            raise ValueError("spatial kNN needs src_points and tgt_points")
        src_nb = _neighbours(np.asarray(src_points, dtype=np.float64), k)
        tgt_nb = _neighbours(np.asarray(tgt_points, dtype=np.float64), k)

    c0, c1 = soft
    prob = np.zeros_like(s)
    admitted = np.zeros(s.shape, dtype=bool)
    for c in (c0, c1):
        admitted[c.source_index, c.target_index] = True
        np.maximum.at(prob, (c.source_index, c.target_index), c.probability)

    keep = np.zeros(s.shape, dtype=bool)
    rows = np.arange(n_src)
    best_t = np.argmax(s, axis=1)
    cand_t = np.column_stack([best_t, tgt_nb[best_t]])
    keep[rows[:, None], cand_t] |= admitted[rows[:, None], cand_t]

    cols = np.arange(n_tgt)
    best_s = np.argmax(s, axis=0)
    cand_s = np.column_stack([best_s, src_nb[best_s]])
    keep[cand_s, cols[:, None]] |= admitted[cand_s, cols[:, None]]

    i, j = np.nonzero(keep)
    return PatchCorrespondenceSet(i, j, prob[i, j])


def _scores(x) -> NDArray[np.float64]:
    if isinstance(x, OverlapScores):
        x = x.scores
    return np.asarray(x, dtype=np.float64).reshape(-1)


def overlap_filter(
    c: PatchCorrespondenceSet,
    src_scores,
    tgt_scores,
    cfg: MatchConfig = MatchConfig(),
    *,
    n_src: Optional[int] = None,
    n_tgt: Optional[int] = None,
) -> PatchCorrespondenceSet:
    """Keep pairs whose endpoints both have overlap confidence above ``theta_o``."""
    ss, ts = _scores(src_scores), _scores(tgt_scores)
    if n_src is not None and ss.shape[0] != n_src:
        raise ValueError(f"source score count {ss.shape[0]} != superpoint count {n_src}")
    if n_tgt is not None and ts.shape[0] != n_tgt:
        raise ValueError(f"target score count {ts.shape[0]} != superpoint count {n_tgt}")
    if len(c) and (c.source_index.max() >= ss.shape[0] or c.target_index.max() >= ts.shape[0]):
        raise ValueError("overlap score arrays are shorter than the referenced superpoints")
    mask = (ss[c.source_index] > cfg.theta_o) & (ts[c.target_index] > cfg.theta_o)
    return c.take(mask)
