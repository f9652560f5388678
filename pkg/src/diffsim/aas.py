"""Aligned Attention Score.

Everything here is backend independent and pure: inputs are per-head query,
key and value projections captured at one attention layer, outputs are plain
floats. Attention is computed in float64 regardless of the storage dtype of
the projections.

The score of image A against image B aligns B to A through attention: A's
queries attend over A's own keys/values and, separately, over B's
keys/values; the two aligned feature maps share A's token layout and can be
compared token by token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateFeatureError, DimensionError, ValidationError
from .sites import AttentionSite, MetricConfig


@dataclass(frozen=True, eq=False)
class ProjectedLatents:
    """Per-head Q/K/V of one image at one attention site.

    Shapes are ``q: [heads, tokens_q, d_head]`` and
    ``k, v: [heads, tokens_kv, d_head]``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    site: Optional[AttentionSite] = None
    source_id: str = ""

    def __post_init__(self):
        q, k, v = (np.asarray(a) for a in (self.q, self.k, self.v))
        for name, a in (("q", q), ("k", k), ("v", v)):
            if a.ndim != 3:
                raise DimensionError(f"{name} must be [heads, tokens, d_head], got shape {a.shape}")
            if min(a.shape) < 1:
                raise DimensionError(f"{name} has an empty axis: {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains non-finite entries")
        if not (q.shape[0] == k.shape[0] == v.shape[0]):
            raise DimensionError(f"head counts differ: q{q.shape} k{k.shape} v{v.shape}")
        if q.shape[2] != k.shape[2] or v.shape[2] != k.shape[2]:
            raise DimensionError(f"d_head differs: q{q.shape} k{k.shape} v{v.shape}")
        if k.shape[1] != v.shape[1]:
            raise DimensionError(f"k and v token counts differ: k{k.shape} v{v.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def d_head(self) -> int:
        return self.q.shape[2]

    @property
    def tokens_q(self) -> int:
        return self.q.shape[1]

    @property
    def tokens_kv(self) -> int:
        return self.k.shape[1]

    def astype(self, dtype) -> "ProjectedLatents":
        return ProjectedLatents(
            self.q.astype(dtype), self.k.astype(dtype), self.v.astype(dtype), self.site, self.source_id
        )

    def identical_to(self, other: "ProjectedLatents") -> bool:
        """Bit-level equality of the three tensors (dtype included)."""
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in ((self.q, other.q), (self.k, other.k), (self.v, other.v))
        )


@dataclass(frozen=True, eq=False)
class AlignedFeatures:
    x: np.ndarray
    site: Optional[AttentionSite] = None


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    aas_ab: float
    aas_ba: float
    config: Optional[MetricConfig] = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "aas_ab": self.aas_ab,
            "aas_ba": self.aas_ba,
            "config": None if self.config is None else self.config.to_dict(),
        }


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("attention inputs contain non-finite entries")


def scaled_dot_attention(q, k, v, *, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d)) v`` for a single head.

    ``q: [tokens_q, d]``, ``k: [tokens_kv, d]``, ``v: [tokens_kv, d_v]``.
    With ``return_weights=True`` also returns the ``[tokens_q, tokens_kv]``
    attention weights.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"expected 2-d q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or q.shape[1] < 1:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0] or k.shape[0] < 1:
        raise DimensionError(f"key/value token mismatch: {k.shape} vs {v.shape}")
    _check_finite(q, k, v)
    w = softmax(q @ k.T / np.sqrt(q.shape[1]))
    out = w @ v
    return (out, w) if return_weights else out


def _multihead(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_weights: bool = False):
    q = q.astype(np.float64, copy=False)
    k = k.astype(np.float64, copy=False)
    v = v.astype(np.float64, copy=False)
    w = softmax(np.matmul(q, np.swapaxes(k, 1, 2)) / np.sqrt(q.shape[2]))
    out = np.matmul(w, v)  # [heads, tokens_q, d_head]
    # concatenate heads along features in head order
    x = np.ascontiguousarray(np.transpose(out, (1, 0, 2)).reshape(q.shape[1], -1))
    return (x, w) if return_weights else x


def multihead_align(
    query_latents: ProjectedLatents, kv_latents: ProjectedLatents, *, return_weights: bool = False
):
    """Per-head attention of ``query_latents.q`` over ``kv_latents.k/v``.

    Heads are concatenated along the feature axis; no output projection is
    applied. Returns :class:`AlignedFeatures` of shape
    ``[tokens_q, heads * d_head]`` (and the ``[heads, tokens_q, tokens_kv]``
    weights if requested).
    """
    if query_latents.heads != kv_latents.heads or query_latents.d_head != kv_latents.d_head:
        raise DimensionError(
            f"head layout mismatch: {query_latents.heads}x{query_latents.d_head} vs "
            f"{kv_latents.heads}x{kv_latents.d_head}"
        )
    res = _multihead(query_latents.q, kv_latents.k, kv_latents.v, return_weights)
    if return_weights:
        x, w = res
        return AlignedFeatures(x, query_latents.site), w
    return AlignedFeatures(res, query_latents.site)


def _as_matrix(a) -> np.ndarray:
    if isinstance(a, AlignedFeatures):
        a = a.x
    return np.asarray(a, dtype=np.float64)


def token_cosine(x, y) -> float:
    """Mean over rows of the cosine between matching rows of ``x`` and ``y``."""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionError(f"token_cosine needs equal 2-d shapes, got {x.shape} and {y.shape}")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    for name, n in (("x", nx), ("y", ny)):
        zero = np.flatnonzero(n == 0)
        if zero.size:
            raise DegenerateFeatureError(int(zero[0]), name)
    cos = np.einsum("ij,ij->i", x, y) / (nx * ny)
    return float(np.clip(np.mean(np.clip(cos, -1.0, 1.0)), -1.0, 1.0))


def flat_cosine(x, y) -> float:
    """Cosine between the two matrices viewed as single vectors."""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape != y.shape:
        raise DimensionError(f"flat_cosine needs equal shapes, got {x.shape} and {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0:
        raise DegenerateFeatureError(0, "x")
    if ny == 0:
        raise DegenerateFeatureError(0, "y")
    return float(np.clip(np.vdot(x, y) / (nx * ny), -1.0, 1.0))


_COSINES = {"per_token_mean": token_cosine, "flattened": flat_cosine}


def _cosine_fn(mode: str):
    try:
        return _COSINES[mode]
    except KeyError:
        raise ValidationError(f"unknown cosine mode {mode!r}") from None


def aligned_score(query_latents, kv_self, kv_other, cosine_mode: str = "per_token_mean") -> float:
    """cos(attn(Q, K_self, V_self), attn(Q, K_other, V_other)) with Q from ``query_latents``."""
    own = multihead_align(query_latents, kv_self)
    aligned = multihead_align(query_latents, kv_other)
    return _cosine_fn(cosine_mode)(own, aligned)


def aas(a: ProjectedLatents, b: ProjectedLatents, cosine_mode: str = "per_token_mean") -> float:
    """Aligned Attention Score of ``a`` against ``b`` (not symmetric)."""
    return aligned_score(a, a, b, cosine_mode)


def similarity(
    a: ProjectedLatents,
    b: ProjectedLatents,
    cosine_mode: str = "per_token_mean",
    config: Optional[MetricConfig] = None,
) -> SimilarityScore:
    ab = aas(a, b, cosine_mode)
    ba = aas(b, a, cosine_mode)
    # addition commutes bit-exactly, so swapping a and b gives the same value
    return SimilarityScore(0.5 * (ab + ba), ab, ba, config)


def cross_aas_pair(
    z_a: ProjectedLatents,
    ip_a: ProjectedLatents,
    z_b: ProjectedLatents,
    ip_b: ProjectedLatents,
    cosine_mode: str = "per_token_mean",
    config: Optional[MetricConfig] = None,
) -> SimilarityScore:
    """Cross-attention variant: image queries attend over image-prompt tokens.

    ``z_*`` supply the queries (taken from the U-Net latent pass of each
    image); ``ip_*`` supply keys and values projected from each image's
    image-prompt tokens. Only ``.q`` of ``z_*`` and ``.k``/``.v`` of ``ip_*``
    are read.
    """
    ab = aligned_score(z_a, ip_a, ip_b, cosine_mode)
    ba = aligned_score(z_b, ip_b, ip_a, cosine_mode)
    return SimilarityScore(0.5 * (ab + ba), ab, ba, config)
