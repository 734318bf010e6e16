"""Decode-phase attention over a KV cache, and the LM head.

Decode runs as three separate steps (scores, softmax, aggregation) because
the ``1 x M`` score vector is small.  Scores and the LM head both go through
``DecodeEngine.matvec``, one int8 matrix-vector routine, so the head
projection reuses the attention datapath instead of having its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .packing import PackedTernaryMatrix, ShapeError
from .special import MIN_AMAX, absmax_quantize, quantize_with_scale
from .tlmm import NumericError, QuantTensor


class ContextOverflowError(RuntimeError):
    pass


@dataclass
class DecodeEngine:
    """Shared int8 matrix-vector unit with traffic counters."""

    calls: int = 0
    bytes_read: int = 0
    macs: int = 0
    callers: dict = field(default_factory=dict)

    def matvec(self, mat: np.ndarray, vec: np.ndarray, caller: str = "") -> np.ndarray:
        """``mat @ vec`` with int8 operands and int32 accumulation.

        ``mat`` is ``(..., R, C)``, ``vec`` is ``(..., C)``; returns ``(..., R)``.
        """
        if mat.dtype != np.int8 or vec.dtype != np.int8:
            raise TypeError("matvec operands must be int8")
        if mat.shape[-1] != vec.shape[-1]:
            raise ShapeError(f"matvec inner dims differ: {mat.shape} x {vec.shape}")
        self.calls += 1
        self.callers[caller] = self.callers.get(caller, 0) + 1
        self.bytes_read += mat.size + vec.size
        self.macs += mat.size
        return np.einsum("...rc,...c->...r", mat.astype(np.int32), vec.astype(np.int32))


DEFAULT_ENGINE = DecodeEngine()


class KvCache:
    """Append-only int8 key/value history of one layer, ``(h, capacity, d)``.

    ``scale_mode="token"`` stores one scale per appended token (default).
    ``scale_mode="frozen"`` fixes one scale per tensor from the first append
    and saturates later tokens to it, counting saturations.
    """

    def __init__(self, heads: int, head_dim: int, capacity: int = 1024, scale_mode: str = "token"):
        if scale_mode not in ("token", "frozen"):
            raise ValueError(f"unknown scale_mode {scale_mode!r}")
        self.heads, self.head_dim, self.capacity = heads, head_dim, capacity
        self.scale_mode = scale_mode
        self.k = np.zeros((heads, capacity, head_dim), dtype=np.int8)
        self.v = np.zeros((heads, capacity, head_dim), dtype=np.int8)
        self.k_scale = np.zeros(capacity)
        self.v_scale = np.zeros(capacity)
        self.length = 0
        self.saturations = 0
        self._frozen: tuple[float, float] | None = None

    def _reserve(self, count: int) -> slice:
        if self.length + count > self.capacity:
            raise ContextOverflowError(
                f"KV cache holds {self.length}/{self.capacity}; cannot append {count}")
        sl = slice(self.length, self.length + count)
        self.length += count
        return sl

    def append(self, k_new, v_new, k_scale, v_scale) -> None:
        """Append ``t`` already-quantised tokens: ``k_new, v_new`` are ``(h, t, d)`` or ``(h, d)``."""
        k_new, v_new = np.asarray(k_new), np.asarray(v_new)
        if k_new.ndim == 2:
            k_new, v_new = k_new[:, None], v_new[:, None]
        if k_new.dtype != np.int8 or v_new.dtype != np.int8:
            raise TypeError("cached keys/values must be int8")
        if k_new.shape != v_new.shape or k_new.shape[0] != self.heads or k_new.shape[2] != self.head_dim:
            raise ShapeError(f"bad kv shape {k_new.shape}")
        sl = self._reserve(k_new.shape[1])
        self.k[:, sl] = k_new
        self.v[:, sl] = v_new
        self.k_scale[sl] = k_scale
        self.v_scale[sl] = v_scale

    def append_real(self, k, v) -> None:
        """Quantise and append real ``(h, t, d)`` keys/values per ``scale_mode``."""
        k, v = np.asarray(k, dtype=np.float64), np.asarray(v, dtype=np.float64)
        if k.ndim == 2:
            k, v = k[:, None], v[:, None]
        if self.scale_mode == "token":
            kq = absmax_quantize(k.transpose(1, 0, 2).reshape(k.shape[1], -1))
            vq = absmax_quantize(v.transpose(1, 0, 2).reshape(v.shape[1], -1))
            shape = (k.shape[1], self.heads, self.head_dim)
            self.append(kq.data.reshape(shape).transpose(1, 0, 2), vq.data.reshape(shape).transpose(1, 0, 2),
                        kq.scale, vq.scale)
            return
        if self._frozen is None:
            ka, va = np.max(np.abs(k)), np.max(np.abs(v))
            self._frozen = (ka / 127 if ka >= MIN_AMAX else 1.0, va / 127 if va >= MIN_AMAX else 1.0)
        ks, vs = self._frozen
        kq, ksat = quantize_with_scale(k, ks)
        vq, vsat = quantize_with_scale(v, vs)
        self.saturations += ksat + vsat
        self.append(kq, vq, ks, vs)

    def keys(self) -> np.ndarray:
        return self.k[:, :self.length]

    def values(self) -> np.ndarray:
        return self.v[:, :self.length]


def append_kv(cache: KvCache, k_new, v_new, k_scale=1.0, v_scale=1.0) -> None:
    cache.append(k_new, v_new, k_scale, v_scale)


def decode_scores(q, q_scale: float, cache: KvCache, engine: DecodeEngine | None = None,
                  dtype=np.float32) -> np.ndarray:
    """``(h, M)`` scores of an int8 ``(h, d)`` query against the cache."""
    engine = engine or DEFAULT_ENGINE
    if cache.length == 0:
        raise ValueError("decode needs at least one cached token")
    q = np.asarray(q)
    if q.shape != (cache.heads, cache.head_dim):
        raise ShapeError(f"query shape {q.shape} != {(cache.heads, cache.head_dim)}")
    dots = engine.matvec(cache.keys(), q, caller="attention")  # (h, M)
    scale = q_scale * cache.k_scale[:cache.length] / math.sqrt(cache.head_dim)
    return (dots * scale[None, :]).astype(dtype)


def softmax_vector(s, dtype=np.float32) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite score")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(dtype)


def decode_aggregate(p, cache: KvCache, engine: DecodeEngine | None = None) -> np.ndarray:
    """``o[h] = sum_j p[h, j] * v_j * v_scale_j`` as ``(h, d)``."""
    engine = engine or DEFAULT_ENGINE
    p = np.asarray(p)
    if p.shape[-1] != cache.length:
        raise ShapeError(f"probability length {p.shape[-1]} != cached length {cache.length}")
    vals = cache.values()
    engine.bytes_read += vals.size
    weights = p * cache.v_scale[None, :cache.length]
    return np.einsum("hm,hmd->hd", weights, vals.astype(p.dtype))


def decode_attention(q, q_scale: float, cache: KvCache, engine: DecodeEngine | None = None,
                     dtype=np.float32) -> np.ndarray:
    """Scores, softmax, aggregation for one new token; returns ``(h, d)``."""
    s = decode_scores(q, q_scale, cache, engine, dtype=dtype)
    p = softmax_vector(s, dtype=dtype)
    return decode_aggregate(p, cache, engine)


def lm_head_accumulate(hidden, head_weights: PackedTernaryMatrix,
                       engine: DecodeEngine | None = None) -> tuple[np.ndarray, QuantTensor]:
    """Integer logits of the absmax-quantised ``hidden`` and that quantisation."""
    engine = engine or DEFAULT_ENGINE
    hidden = np.asarray(hidden, dtype=np.float64).reshape(-1)
    if hidden.shape[0] != head_weights.rows:
        raise ShapeError(f"hidden length {hidden.shape[0]} != head rows {head_weights.rows}")
    xq = absmax_quantize(hidden)
    rows = _head_rows(head_weights)  # (V, N) int8
    return engine.matvec(rows, xq.data, caller="lm_head"), xq


def lm_head(hidden, head_weights: PackedTernaryMatrix, engine: DecodeEngine | None = None) -> np.ndarray:
    """Project a real hidden vector to ``V`` logits on the decode engine."""
    acc, xq = lm_head_accumulate(hidden, head_weights, engine)
    logits = acc.astype(np.float64) * (xq.scale * head_weights.scale)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def _head_rows(w: PackedTernaryMatrix) -> np.ndarray:
    cache = w._dense_cache
    if "rows_t" not in cache:
        cache["rows_t"] = np.ascontiguousarray(w.dense().T)
    return cache["rows_t"]
