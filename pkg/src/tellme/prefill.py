"""Fused causal attention for prefill.

Each resident query keeps a running max ``m``, denominator ``l`` and
unnormalised output ``o``; keys/values stream through one token at a time
(the block-size-1 case of the two-block online softmax).  The reverse
schedule fills query slots from the last token downward so that, batch after
batch, the key/value stream gets shorter by ``p`` tokens and masked cells are
never visited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tlmm import NumericError


class EmptyStreamError(ValueError):
    pass


@dataclass
class FusionState:
    """Running softmax state; arrays broadcast over any leading slot axes."""

    m: np.ndarray
    l: np.ndarray  # noqa: E741
    o: np.ndarray
    steps: int = 0


def online_step(state: FusionState | None, s, v) -> FusionState:
    """Fold one (score, value) pair into ``state``.

    ``state=None`` starts a stream: ``m = s, l = 1, o = v``.
    """
    s = np.asarray(s, dtype=np.float64) if np.ndim(s) == 0 else np.asarray(s)
    v = np.asarray(v)
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite attention score")
    if state is None:
        return FusionState(np.array(s, copy=True), np.ones_like(s), np.array(v, dtype=s.dtype, copy=True), 1)
    new_m = np.maximum(state.m, s)
    alpha = np.exp(state.m - new_m)
    beta = np.exp(s - new_m)
    new_l = state.l * alpha + beta
    new_o = state.o * alpha[..., None] + beta[..., None] * v
    return FusionState(new_m, new_l, new_o, state.steps + 1)


def finalize(state: FusionState | None) -> np.ndarray:
    if state is None or state.steps == 0:
        raise EmptyStreamError("no keys were streamed")
    return state.o / state.l[..., None]


@dataclass
class PrefillBatch:
    """Per-head int8 ``q, k, v`` of shape ``(h, N, d)`` plus dequant scales.

    Scales are scalars (per tensor) or ``(N,)`` arrays (per token).
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q_scale: float | np.ndarray = 1.0
    k_scale: float | np.ndarray = 1.0
    v_scale: float | np.ndarray = 1.0
    p: int = 4
    softmax_scale: float | None = None

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = np.asarray(getattr(self, name))
            if arr.ndim == 2:
                arr = arr[None]
            if arr.ndim != 3:
                raise ValueError(f"{name} must be (h, N, d)")
            setattr(self, name, arr)
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValueError(f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.n_tokens < 1:
            raise ValueError("prompt must hold at least one token")
        if self.p < 1:
            raise ValueError("parallelism p must be >= 1")
        if self.softmax_scale is None:
            self.softmax_scale = 1.0 / math.sqrt(self.head_dim)
        for name in ("q_scale", "k_scale", "v_scale"):
            s = np.broadcast_to(np.asarray(getattr(self, name), dtype=np.float64), (self.n_tokens,))
            setattr(self, name, np.array(s))

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]


@dataclass
class ScheduleTrace:
    """Load/compute events of one attention invocation.

    ``events`` holds ``(kind, batch, token)`` tuples with ``kind`` one of
    ``"q"``, ``"kv"``, ``"evict"``, ``"bubble"``; tokens are 1-based.
    """

    approach: str
    n_tokens: int
    p: int
    events: list = field(default_factory=list)
    masked_cells: int = 0
    computed_cells: int = 0
    peak_q_slots: int = 0
    peak_kv_tokens: int = 0

    def record(self, kind: str, batch: int, token: int) -> None:
        self.events.append((kind, batch, token))

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e[0] == kind)

    @property
    def kv_loads(self) -> int:
        return self.count("kv")

    @property
    def q_loads(self) -> int:
        return self.count("q")

    @property
    def iterations(self) -> int:
        return self.count("kv") + self.count("bubble")

    def kv_sequence(self) -> list[tuple[int, int]]:
        return [(b, t) for kind, b, t in self.events if kind == "kv"]


def _scores(batch: PrefillBatch, q_int: np.ndarray, q_tokens: np.ndarray, j: int, dtype) -> np.ndarray:
    """Scores of resident queries against key token ``j`` (0-based): ``(h, slots)``."""
    dots = np.einsum("hsd,hd->hs", q_int, batch.k[:, j, :].astype(np.int32))
    scale = batch.q_scale[q_tokens] * batch.k_scale[j] * batch.softmax_scale
    return (dots * scale[None, :]).astype(dtype)


def reverse_prefill_attention(batch: PrefillBatch, dtype=np.float32) -> tuple[np.ndarray, ScheduleTrace]:
    """Reverse-scheduled fused causal attention.

    Returns the ``(N, h*d)`` output and the load trace.  Batch ``b`` holds
    queries ``N - b*p`` down to ``N - (b+1)*p + 1``; keys/values stream from
    token 1 up to the batch's highest query, so the kv tokens above it (the
    ones evicted after the previous batch) are never touched again.
    """
    h, n, d = batch.q.shape
    p = batch.p
    out = np.empty((n, h, d), dtype=dtype)
    trace = ScheduleTrace("reverse", n, p)
    v_deq_scale = batch.v_scale.astype(dtype)
    top = n  # kv tokens 1..top are live
    for b, hi in enumerate(range(n, 0, -p)):
        lo = max(hi - p, 0)
        q_tokens = np.arange(hi - 1, lo - 1, -1)  # 0-based, descending
        if b > 0:
            for t in range(hi + 1, top + 1):
                trace.record("evict", b, t)
            top = hi
        for t in q_tokens:
            trace.record("q", b, int(t) + 1)
        trace.peak_q_slots = max(trace.peak_q_slots, len(q_tokens))
        q_int = batch.q[:, q_tokens, :].astype(np.int32)  # (h, slots, d)
        state = None
        for j in range(hi):
            trace.record("kv", b, j + 1)
            trace.peak_kv_tokens = max(trace.peak_kv_tokens, 1)
            active = q_tokens >= j  # causal: slot i sees j <= i
            trace.computed_cells += int(active.sum())
            s = _scores(batch, q_int, q_tokens, j, dtype)
            v = batch.v[:, j, :].astype(dtype) * v_deq_scale[j]  # (h, d)
            v = np.broadcast_to(v[:, None, :], (h, len(q_tokens), d))
            if state is None:
                state = online_step(None, s, v)
                continue
            nxt = online_step(state, np.where(active[None, :], s, state.m), v)
            keep = active[None, :]
            state = FusionState(
                np.where(keep, nxt.m, state.m),
                np.where(keep, nxt.l, state.l),
                np.where(keep[..., None], nxt.o, state.o),
                nxt.steps,
            )
        out[q_tokens] = finalize(state).transpose(1, 0, 2)
    return out.reshape(n, h * d), trace


def naive_causal_attention(batch: PrefillBatch) -> np.ndarray:
    """Materialised scores, causal mask, row softmax, times V (float64)."""
    q = batch.q.astype(np.float64) * batch.q_scale[None, :, None]
    k = batch.k.astype(np.float64) * batch.k_scale[None, :, None]
    v = batch.v.astype(np.float64) * batch.v_scale[None, :, None]
    n = batch.n_tokens
    scores = np.einsum("hid,hjd->hij", q, k) * batch.softmax_scale
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(mask[None], -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.einsum("hij,hjd->ihd", probs, v)
    return out.reshape(n, -1)


def dense_schedule_attention(batch: PrefillBatch, dtype=np.float32) -> tuple[np.ndarray, ScheduleTrace]:
    """Query-reuse dense schedule: every batch of ``p`` queries sees all ``N`` keys.

    Masked cells are computed and then discarded, which is what the trace's
    ``masked_cells`` counts.  A ``p-1`` pipeline fill is charged once.
    """
    h, n, d = batch.q.shape
    p = batch.p
    out = np.empty((n, h, d), dtype=dtype)
    trace = ScheduleTrace("dense", n, p)
    for t in range(p - 1):
        trace.record("bubble", 0, 0)
    v_deq_scale = batch.v_scale.astype(dtype)
    for b, lo in enumerate(range(0, n, p)):
        q_tokens = np.arange(lo, min(lo + p, n))
        for t in q_tokens:
            trace.record("q", b, int(t) + 1)
        trace.peak_q_slots = max(trace.peak_q_slots, len(q_tokens))
        q_int = batch.q[:, q_tokens, :].astype(np.int32)
        state = None
        for j in range(n):
            trace.record("kv", b, j + 1)
            trace.peak_kv_tokens = max(trace.peak_kv_tokens, 1)
            s = _scores(batch, q_int, q_tokens, j, dtype)
            live = q_tokens >= j
            trace.computed_cells += len(q_tokens)
            trace.masked_cells += int((~live).sum())
            v = batch.v[:, j, :].astype(dtype) * v_deq_scale[j]
            v = np.broadcast_to(v[:, None, :], (h, len(q_tokens), d))
            if state is None:
                state = online_step(None, s, v)
                continue
            nxt = online_step(state, np.where(live[None, :], s, state.m), v)
            keep = live[None, :]
            state = FusionState(
                np.where(keep, nxt.m, state.m),
                np.where(keep, nxt.l, state.l),
                np.where(keep[..., None], nxt.o, state.o),
                nxt.steps,
            )
        out[q_tokens] = finalize(state).transpose(1, 0, 2)
    return out.reshape(n, h * d), trace
