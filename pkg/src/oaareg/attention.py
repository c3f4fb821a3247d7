"""Forward-pass attention kernels: softmax attention, elu+1 linear attention,
rotary position embedding and the token-based overlap detector.

Nothing here is trained. Projection weights are passed in; tests and the
pipeline use :meth:`AttentionWeights.random` for reproducible values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, softmax

from .errors import DegenerateInputError

ROTARY_BASE = 10000.0
SCORE_EPS = 1e-12
LINEAR_BLOCK = 256


def _matrix(x: ArrayLike, name: str) -> NDArray[np.float64]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2D feature matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Single-head query/key/value/output projections, each ``d x d``."""

    query: NDArray[np.float64]
    key: NDArray[np.float64]
    value: NDArray[np.float64]
    output: NDArray[np.float64]

    def __post_init__(self):
        shapes = set()
        for name in ("query", "key", "value", "output"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} projection must be square, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} projection contains non-finite entries")
            shapes.add(m.shape)
            object.__setattr__(self, name, m)
        if len(shapes) != 1:
            raise ValueError("all projections must share one width")

    @property
    def dim(self) -> int:
        return self.query.shape[0]

    @classmethod
    def random(cls, dim: int, seed: int = 0) -> "AttentionWeights":
        """Uniform entries in [-1/sqrt(d), 1/sqrt(d)] from a seeded generator."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        q, k, v, o = rng.uniform(-bound, bound, size=(4, dim, dim))
        return cls(q, k, v, o)

    @classmethod
    def identity(cls, dim: int) -> "AttentionWeights":
        eye = np.eye(dim)
        return cls(eye, eye, eye, eye)


def _checked(q, k, v, w: AttentionWeights):
    q = _matrix(q, "q")
    k = _matrix(k, "k")
    v = _matrix(v, "v")
    d = w.dim
    if not (q.shape[1] == k.shape[1] == v.shape[1] == d):
        raise ValueError(
            f"channel widths disagree: q={q.shape[1]}, k={k.shape[1]}, v={v.shape[1]}, weights={d}"
        )
    if k.shape[0] != v.shape[0]:
        raise ValueError("keys and values must have the same number of rows")
    if k.shape[0] == 0:
        raise ValueError("attention needs at least one key")
    return q, k, v


def _project(q, k, v, w: AttentionWeights):
    q, k, v = _checked(q, k, v, w)
    return q @ w.query, k @ w.key, v @ w.value


def exact_attention(q, k, v, w: AttentionWeights) -> NDArray[np.float64]:
    """Scaled dot-product attention, quadratic in the number of tokens."""
    qp, kp, vp = _project(q, k, v, w)
    scores = qp @ kp.T / np.sqrt(w.dim)
    attn = softmax(scores, axis=1)
    return (attn @ vp) @ w.output


def elu_feature_map(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """phi(x) = elu(x) + 1 with alpha = 1; strictly positive for finite x."""
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def linear_attention(q, k, v, w: AttentionWeights, block: int = LINEAR_BLOCK) -> NDArray[np.float64]:
    """Kernelised attention ``phi(Q) (phi(K)^T V)`` with row normalisation.

    ``phi(K)^T V`` is formed first (d x d), so cost is linear in token count.
    Rows are streamed in blocks of ``block`` so intermediates stay cache-sized.
    """
    q, k, v = _checked(q, k, v, w)
    d = w.dim
    kv = np.zeros((d, d))
    k_sum = np.zeros(d)
    for s in range(0, k.shape[0], block):
        fk = elu_feature_map(k[s : s + block] @ w.key)
        kv += fk.T @ (v[s : s + block] @ w.value)
        k_sum += fk.sum(axis=0)
    out = np.empty((q.shape[0], d))
    for s in range(0, q.shape[0], block):
        fq = elu_feature_map(q[s : s + block] @ w.query)
        normalizer = fq @ k_sum
        if np.any(normalizer <= 0.0):
            raise DegenerateInputError("linear attention normaliser vanished (phi underflow)")
        out[s : s + block] = ((fq @ kv) / normalizer[:, None]) @ w.output
    return out


def rotary_frequencies(n_pairs: int) -> NDArray[np.float64]:
    return ROTARY_BASE ** (-np.arange(n_pairs, dtype=np.float64) / n_pairs)


def _rotate_pairs(x: NDArray, angles: NDArray) -> NDArray:
    even, odd = x[:, 0::2], x[:, 1::2]
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def rotary_embed(x, positions) -> NDArray[np.float64]:
    """Rotate consecutive channel pairs by position-dependent angles.

    Integer (or scalar) positions rotate pair ``i`` by ``pos * base**(-i/(d/2))``.
    For 3D positions the channels are split into three equal even-width
    groups, one per axis; when ``d`` is not a multiple of six the trailing
    channels are left unrotated.
    """
    x = _matrix(x, "x")
    n, d = x.shape
    if d % 2:
        raise ValueError(f"rotary embedding needs an even channel width, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        if pos.shape[0] != n:
            raise ValueError("need exactly one position per row")
        angles = pos[:, None] * rotary_frequencies(d // 2)[None, :]
        return _rotate_pairs(x, angles)
    if pos.ndim != 2 or pos.shape != (n, 3):
        raise ValueError("3D positions must have shape (N, 3)")
    group = 2 * (d // 6)
    if group == 0:
        raise ValueError("3D rotary embedding needs at least 6 channels")
    freqs = rotary_frequencies(group // 2)
    out = x.copy()
    for axis in range(3):
        sl = slice(axis * group, (axis + 1) * group)
        out[:, sl] = _rotate_pairs(x[:, sl], pos[:, axis : axis + 1] * freqs[None, :])
    return out


def overlap_token_forward(h, w: AttentionWeights) -> NDArray[np.float64]:
    """Max-pool the features into one token, then let it attend over ``h``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("overlap token needs a non-empty (N, d) feature matrix")
    token = h.max(axis=0, keepdims=True)
    return exact_attention(token, h, h, w)[0]


class OverlapScores(NamedTuple):
    scores: NDArray[np.float64]
    weight_map: NDArray[np.float64]


def overlap_confidence(h_o, token_o, w_o) -> OverlapScores:
    """Per-row weight map ``sigmoid(h_o . token)`` and confidence
    ``sigmoid((w * h_o + h_o) @ w_o)``; both clipped into the open unit interval.
    """
    h_o = _matrix(h_o, "h_o")
    token = np.asarray(token_o, dtype=np.float64).reshape(-1)
    proj = np.asarray(w_o, dtype=np.float64).reshape(-1)
    if not (token.shape[0] == proj.shape[0] == h_o.shape[1]):
        raise ValueError("feature, token and projection widths must agree")
    weight = expit(h_o @ token)
    scores = expit((weight[:, None] * h_o + h_o) @ proj)
    lo, hi = SCORE_EPS, 1.0 - SCORE_EPS
    return OverlapScores(np.clip(scores, lo, hi), np.clip(weight, lo, hi))


def overlap_detect(h_src, h_tgt, w_token: AttentionWeights, w_update: AttentionWeights, w_o):
    """Full overlap-detection forward pass for both clouds.

    Returns ``(h_src_o, h_tgt_o, scores_src, scores_tgt)``. The feature update
    attends to the *other* cloud's decoded token and is added residually.
    """
    h_src = _matrix(h_src, "h_src")
    h_tgt = _matrix(h_tgt, "h_tgt")
    g_src = overlap_token_forward(h_src, w_token)
    g_tgt = overlap_token_forward(h_tgt, w_token)
    h_src_o = h_src + exact_attention(h_src, g_tgt, g_tgt, w_update)
    h_tgt_o = h_tgt + exact_attention(h_tgt, g_src, g_src, w_update)
    return (
        h_src_o,
        h_tgt_o,
        overlap_confidence(h_src_o, g_src, w_o),
        overlap_confidence(h_tgt_o, g_tgt, w_o),
    )
