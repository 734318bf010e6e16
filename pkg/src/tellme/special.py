"""Normalisation, quantisation, activation and rotary helpers.

Vector traffic moves in packets of 32 elements (one 256-bit bus word of
int8).  The fused routines walk their input packet by packet so the number
of passes over the data is explicit and countable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError
from .tlmm import NumericError, QuantTensor

PACKET = 32
QMAX = 127
# rows with a smaller absmax have no representable scale; they quantise to zero
MIN_AMAX = np.finfo(np.float64).tiny * QMAX


@dataclass
class AccessCounter:
    """Counts input elements read by an instrumented routine."""

    reads: int = 0


@dataclass(frozen=True)
class NormParams:
    gamma: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


def _packets(n: int):
    for lo in range(0, n, PACKET):
        yield slice(lo, min(lo + PACKET, n))


def _finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")
    return x


def _quantize_with(x: np.ndarray, amax: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    live = amax >= MIN_AMAX
    mult = QMAX / np.where(live, amax, 1.0)
    q = np.clip(np.rint(x * mult[..., None]), -QMAX, QMAX)
    q = np.where(live[..., None], q, 0).astype(np.int8)
    scale = np.where(live, amax / QMAX, 1.0)
    return q, scale


def _pack(q: np.ndarray, scale: np.ndarray) -> QuantTensor:
    if q.ndim == 1:
        return QuantTensor(q, float(scale))
    return QuantTensor(q, scale)


def absmax_quantize(x) -> QuantTensor:
    """Symmetric int8 quantisation, one scale per row (last axis).

    Pass 1 finds ``amax = max|x|``; pass 2 emits ``rint(x * 127 / amax)``
    (round half to even).  An all-zero row quantises to zeros with scale 1.
    """
    x = _finite(x)
    if x.ndim not in (1, 2) or x.shape[-1] == 0:
        raise ValueError("expected a non-empty vector or matrix")
    amax = np.max(np.abs(x), axis=-1)
    q, scale = _quantize_with(x, amax)
    return _pack(q, scale)


def quantize_with_scale(x, scale: float) -> tuple[np.ndarray, int]:
    """Quantise with a fixed scale; returns (int8 values, saturation count)."""
    x = _finite(x)
    raw = np.rint(x / scale)
    saturated = int(np.count_nonzero(np.abs(raw) > QMAX))
    return np.clip(raw, -QMAX, QMAX).astype(np.int8), saturated


def _packet_sumsq(x: np.ndarray) -> np.ndarray:
    total = np.zeros(x.shape[:-1])
    for sl in _packets(x.shape[-1]):
        chunk = x[..., sl]
        total += np.sum(chunk * chunk, axis=-1)
    return total


def rmsnorm(x, params: NormParams) -> np.ndarray:
    x = _finite(x)
    gamma = np.asarray(params.gamma, dtype=np.float64)
    if gamma.shape != x.shape[-1:]:
        raise ValueError(f"gamma length {gamma.shape} != hidden size {x.shape[-1]}")
    rms = np.sqrt(_packet_sumsq(x) / x.shape[-1] + params.eps)
    return (x * gamma) / rms[..., None]


def rmsnorm_quant_fused(x, params: NormParams, counter: AccessCounter | None = None) -> QuantTensor:
    """RMSNorm followed by absmax quantisation in two passes over ``x``.

    Pass 1 accumulates ``sum(x**2)`` and ``max|x * gamma|`` together; since
    ``rms > 0`` the normalised absmax is that maximum divided by ``rms``.
    Pass 2 normalises and quantises each element.  The int8 result equals
    ``absmax_quantize(rmsnorm(x))`` bit for bit.
    """
    x = _finite(x)
    if x.ndim not in (1, 2) or x.shape[-1] == 0:
        raise ValueError("expected a non-empty vector or matrix")
    n = x.shape[-1]
    gamma = np.asarray(params.gamma, dtype=np.float64)
    if gamma.shape != (n,):
        raise ValueError(f"gamma length {gamma.shape} != hidden size {n}")

    sumsq = np.zeros(x.shape[:-1])
    amax_raw = np.zeros(x.shape[:-1])
    for sl in _packets(n):
        chunk = x[..., sl]
        if counter is not None:
            counter.reads += chunk.size
        sumsq += np.sum(chunk * chunk, axis=-1)
        amax_raw = np.maximum(amax_raw, np.max(np.abs(chunk * gamma[sl]), axis=-1))
    rms = np.sqrt(sumsq / n + params.eps)
    amax = amax_raw / rms

    live = amax >= MIN_AMAX
    mult = (QMAX / np.where(live, amax, 1.0))[..., None]
    q = np.empty(x.shape, dtype=np.int8)
    for sl in _packets(n):
        chunk = x[..., sl]
        if counter is not None:
            counter.reads += chunk.size
        y = (chunk * gamma[sl]) / rms[..., None]
        q[..., sl] = np.clip(np.rint(y * mult), -QMAX, QMAX)
    q[~live] = 0
    scale = np.where(live, amax / QMAX, 1.0)
    return _pack(q, scale)


def silu_fused(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """``x * sigmoid(x)`` written into ``out`` (default: ``x`` itself).

    Works packet by packet with one 32-element scratch buffer, so it can sit
    as the in-place post-hook of a linear layer's dequant step.
    """
    if out is None:
        out = x
    elif out is not x:
        np.copyto(out, x)
    flat = out.reshape(-1)
    if not np.shares_memory(flat, out):
        raise ValueError("silu_fused needs a contiguous buffer")
    scratch = np.empty(PACKET, dtype=flat.dtype)
    with np.errstate(over="ignore"):
        for sl in _packets(flat.size):
            c = flat[sl]
            s = scratch[:c.size]
            np.negative(c, out=s)
            np.exp(s, out=s)
            s += 1.0
            np.divide(c, s, out=c)
    return out


def silu(x) -> np.ndarray:
    return silu_fused(np.array(x, dtype=np.float64))


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    capacity: int = 1024
    theta: float = 10000.0
    cos: np.ndarray = field(init=False, repr=False)
    sin: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}")
        freqs = self.theta ** (-np.arange(0, self.head_dim, 2, dtype=np.float64) / self.head_dim)
        angles = np.arange(self.capacity, dtype=np.float64)[:, None] * freqs[None, :]
        object.__setattr__(self, "cos", np.cos(angles))
        object.__setattr__(self, "sin", np.sin(angles))


def rope_apply(x, positions, params: RopeParams) -> np.ndarray:
    """Rotate interleaved pairs ``(x[2t], x[2t+1])`` by ``pos * theta**(-2t/d)``.

    ``x`` is ``[..., tokens, d]``; ``positions`` has one entry per token.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.head_dim:
        raise ConfigError(f"x has head dim {x.shape[-1]}, params expect {params.head_dim}")
    positions = np.asarray(positions, dtype=np.intp)
    if positions.shape != x.shape[-2:-1]:
        raise ValueError("need one position per token")
    if positions.size and (positions.min() < 0 or positions.max() >= params.capacity):
        raise IndexError("position outside the RoPE table")
    cos, sin = params.cos[positions], params.sin[positions]  # (tokens, d/2)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
