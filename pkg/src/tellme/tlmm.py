"""Table-lookup ternary matmul.

For each block of ``T*G`` activations of a token, ``T`` tables of ``3**G``
signed sums are built once; every output column then reads one entry per
table, addressed by the packed weight index vector, and accumulates.  No
multiplications touch the weights.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np

from .packing import PackedTernaryMatrix, ShapeError, as_ternary, trit_table

ACC_DTYPE = np.int32
TABLE_DTYPE = np.int16


class NumericError(ValueError):
    pass


@dataclass
class QuantTensor:
    """Int8 activations with a dequant scale, ``real ~ data * scale``.

    ``scale`` is a float (per tensor) or a 1-d array with one entry per row.
    """

    data: np.ndarray
    scale: float | np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int8:
            self.data = self.data.astype(np.int8)
        if np.any(self.data == -128):
            raise ValueError("int8 activations must stay in [-127, 127]")
        s = np.asarray(self.scale, dtype=np.float64)
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("activation scale must be finite and > 0")
        if s.ndim == 1 and (self.data.ndim != 2 or s.shape[0] != self.data.shape[0]):
            raise ShapeError("per-row scale needs one entry per row")

    @property
    def shape(self):
        return self.data.shape

    def row_scale(self) -> np.ndarray:
        """Scale as a ``(rows,)`` array."""
        rows = self.data.shape[0] if self.data.ndim == 2 else 1
        return np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (rows,))

    def dequantize(self) -> np.ndarray:
        s = np.asarray(self.scale, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        return self.data.astype(np.float64) * s


def _signed_patterns(group_size: int) -> np.ndarray:
    # (G, 3**G): column idx holds the trits of idx
    return trit_table(group_size).T.astype(np.int32)


def table_setup(block, group_size: int = 3, tables: int = 32) -> np.ndarray:
    """Build ``T`` lookup tables from one block of ``T*G`` activations.

    Returns ``(T, 3**G)`` int16 where entry ``[t, idx]`` is the sum of the
    ``t``-th group's activations weighted by the trits of ``idx``.  Leading
    batch axes of ``block`` are kept.
    """
    block = np.asarray(block, dtype=np.int32)
    if block.shape[-1] != tables * group_size:
        raise ShapeError(f"block length {block.shape[-1]} != T*G = {tables * group_size}")
    vals = block.reshape(*block.shape[:-1], tables, group_size)
    return (vals @ _signed_patterns(group_size)).astype(TABLE_DTYPE)


def _check_shapes(a: QuantTensor, n_rows: int) -> np.ndarray:
    data = a.data
    if data.ndim != 2:
        raise ShapeError("activations must be 2-d [M, N]")
    if data.shape[1] != n_rows:
        raise ShapeError(f"activation width {data.shape[1]} != weight rows {n_rows}")
    return data


def _padded(data: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((data.shape[0], width), dtype=np.int32)
    out[:, :data.shape[1]] = data
    return out


def iter_tl_matmul(a: QuantTensor, w: PackedTernaryMatrix, q_lanes: int = 16,
                   row_tile: int = 64) -> Iterator[np.ndarray]:
    """Yield the int32 accumulator row of each token, in order.

    The outer loop walks tokens (``row_tile`` at a time), the middle loop
    walks the input dimension in blocks of ``T*G`` building the tables, and
    the inner loop walks the output columns ``q_lanes`` index vectors at a
    time.  With ``row_tile=1`` live state is one table set plus one ``K``
    accumulator.
    """
    if q_lanes < 1 or row_tile < 1:
        raise ValueError("q_lanes and row_tile must be >= 1")
    data = _check_shapes(a, w.rows)
    G, T, K = w.group_size, w.tables, w.cols
    span = T * G
    t_sel = np.arange(T)[None, :]
    for r0 in range(0, data.shape[0], row_tile):
        rows = _padded(data[r0:r0 + row_tile], w.padded_rows)
        o_block = np.zeros((rows.shape[0], K), dtype=ACC_DTYPE)
        for s in range(w.super_rows):
            tl_table = table_setup(rows[:, s * span:(s + 1) * span], G, T)  # (R, T, 3**G)
            idx_rows = w.indices[s].astype(np.intp)  # (K, T)
            for m in range(0, K, q_lanes):
                idx_vec = idx_rows[m:m + q_lanes]
                hits = tl_table[:, t_sel, idx_vec]  # (R, Q, T)
                o_block[:, m:m + q_lanes] += hits.sum(axis=-1, dtype=ACC_DTYPE)
        yield from o_block


def tl_matmul(a: QuantTensor, w: PackedTernaryMatrix, q_lanes: int = 16, row_tile: int = 64) -> np.ndarray:
    rows = list(iter_tl_matmul(a, w, q_lanes, row_tile))
    if not rows:
        return np.zeros((0, w.cols), dtype=ACC_DTYPE)
    return np.stack(rows)


def naive_ternary_matmul(a: QuantTensor, w) -> np.ndarray:
    """Select-and-add baseline: add where the trit is +1, subtract where -1."""
    w = as_ternary(w)
    if w.ndim != 2:
        raise ShapeError("weights must be 2-d")
    data = _check_shapes(a, w.shape[0]).astype(np.int64)
    plus = data @ (w == 1).astype(np.int64)
    minus = data @ (w == -1).astype(np.int64)
    return (plus - minus).astype(ACC_DTYPE)


def half_table_setup(block, group_size: int = 3, tables: int = 32) -> np.ndarray:
    """Keep only the upper half of each table: indices ``mid .. 3**G-1``.

    ``mid = (3**G - 1) // 2`` is the all-zero pattern, so slot 0 is the stored
    zero and the remaining ``(3**G - 1) / 2`` slots are the nonzero sums.
    """
    block = np.asarray(block, dtype=np.int32)
    if block.shape[-1] != tables * group_size:
        raise ShapeError(f"block length {block.shape[-1]} != T*G = {tables * group_size}")
    mid = (3**group_size - 1) // 2
    vals = block.reshape(*block.shape[:-1], tables, group_size)
    return (vals @ _signed_patterns(group_size)[:, mid:]).astype(TABLE_DTYPE)


def half_table_address(idx: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Map full indices to (half-table slot, sign).

    ``3**G - 1 - idx`` is the trit-wise negation of ``idx``, so lower-half
    indices read their mirror with a minus sign.
    """
    mid = (3**group_size - 1) // 2
    idx = np.asarray(idx, dtype=np.intp)
    upper = idx >= mid
    slot = np.where(upper, idx - mid, (3**group_size - 1 - idx) - mid)
    sign = np.where(upper, 1, -1).astype(ACC_DTYPE)
    return slot, sign


def partial_table_matmul(a: QuantTensor, w: PackedTernaryMatrix, q_lanes: int = 16) -> np.ndarray:
    data = _check_shapes(a, w.rows)
    G, T, K = w.group_size, w.tables, w.cols
    span = T * G
    rows = _padded(data, w.padded_rows)
    out = np.zeros((rows.shape[0], K), dtype=ACC_DTYPE)
    t_sel = np.arange(T)[None, :]
    for s in range(w.super_rows):
        half = half_table_setup(rows[:, s * span:(s + 1) * span], G, T).astype(ACC_DTYPE)
        slot, sign = half_table_address(w.indices[s], G)
        for m in range(0, K, q_lanes):
            hits = half[:, t_sel, slot[m:m + q_lanes]] * sign[m:m + q_lanes]
            out[:, m:m + q_lanes] += hits.sum(axis=-1, dtype=ACC_DTYPE)
    return out


def dequantize_output(acc, a_scale, w_scale: float,
                      post: Callable[[np.ndarray], object] | None = None) -> np.ndarray:
    """``acc * a_scale * w_scale`` in float64, with an optional in-place hook.

    ``a_scale`` may be per row.  ``post`` runs on the freshly written output
    buffer (e.g. ``silu_fused``) so no second tensor is created.
    """
    a_scale = np.asarray(a_scale, dtype=np.float64)
    if not (np.all(np.isfinite(a_scale)) and np.isfinite(w_scale)):
        raise NumericError("non-finite dequantization scale")
    if np.any(a_scale <= 0) or w_scale <= 0:
        raise NumericError("dequantization scales must be > 0")
    acc = np.asarray(acc)
    out = acc.astype(np.float64)
    if a_scale.ndim == 1 and out.ndim == 2:
        out *= a_scale[:, None]
    else:
        out *= a_scale
    out *= w_scale
    if post is not None:
        post(out)
    return out
