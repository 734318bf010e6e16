"""Offline ternary weight preprocessing.

Every ``G`` consecutive trits along the input dimension become one base-3
group index (little-endian: trit 0 is the lowest digit, trit value ``t`` maps
to digit ``t + 1``).  ``T`` consecutive group indices of the same output
column form an index vector, the unit a lookup step fetches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidTritError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def _check_trits(values: np.ndarray) -> None:
    bad = (values != -1) & (values != 0) & (values != 1)
    if np.any(bad):
        raise InvalidTritError(f"values outside {{-1, 0, +1}}: {np.unique(values[bad])[:5]}")


def as_ternary(w) -> np.ndarray:
    """Validate and return ``w`` as an int8 ternary matrix."""
    arr = np.asarray(w)
    _check_trits(arr)
    return arr.astype(np.int8)


def index_bits(group_size: int) -> int:
    """Bits needed to address one group: ceil(log2(3**G))."""
    return int(3**group_size - 1).bit_length()


def encode_group(trits) -> int:
    trits = np.asarray(trits)
    if trits.ndim != 1 or trits.size == 0:
        raise ShapeError("encode_group expects a non-empty 1-d group of trits")
    _check_trits(trits)
    idx = 0
    for i, t in enumerate(trits.tolist()):
        idx += (int(t) + 1) * 3**i
    return idx


def decode_group(index: int, group_size: int) -> list[int]:
    if group_size < 1:
        raise ShapeError("group_size must be >= 1")
    if not 0 <= index < 3**group_size:
        raise IndexError(f"group index {index} out of range [0, {3**group_size})")
    out = []
    for _ in range(group_size):
        out.append(index % 3 - 1)
        index //= 3
    return out


def trit_table(group_size: int) -> np.ndarray:
    """All ``3**G`` trit patterns, row ``idx`` is ``decode_group(idx, G)``."""
    idx = np.arange(3**group_size)
    digits = (idx[:, None] // 3 ** np.arange(group_size)[None, :]) % 3
    return (digits - 1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class PackedTernaryMatrix:
    """Ternary ``[rows, cols]`` matrix stored as grouped base-3 indices.

    ``indices`` has shape ``(super_rows, cols, tables)``; entry ``[s, k, t]``
    encodes input rows ``s*T*G + t*G ... + G-1`` of column ``k``.
    """

    group_size: int
    tables: int
    rows: int
    cols: int
    indices: np.ndarray
    scale: float = 1.0
    _dense_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        idx = self.indices
        if idx.ndim != 3 or idx.shape[1:] != (self.cols, self.tables):
            raise ShapeError(f"indices shape {idx.shape} does not match cols={self.cols}, T={self.tables}")
        if idx.shape[0] * self.tables * self.group_size < self.rows:
            raise ShapeError("indices do not cover the declared row count")
        if idx.size and int(idx.max()) >= 3**self.group_size:
            raise IndexError("group index out of range")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"weight scale must be finite and > 0, got {self.scale}")

    @property
    def super_rows(self) -> int:
        return self.indices.shape[0]

    @property
    def padded_rows(self) -> int:
        return self.super_rows * self.tables * self.group_size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def dense(self) -> np.ndarray:
        """Unpacked int8 ``[rows, cols]`` trits, memoised."""
        if "w" not in self._dense_cache:
            self._dense_cache["w"] = unpack_matrix(self, self.rows)
        return self._dense_cache["w"]

    def __eq__(self, other):
        if not isinstance(other, PackedTernaryMatrix):
            return NotImplemented
        return (
            (self.group_size, self.tables, self.rows, self.cols, self.scale)
            == (other.group_size, other.tables, other.rows, other.cols, other.scale)
            and np.array_equal(self.indices, other.indices)
        )


def pack_matrix(w, group_size: int = 3, tables: int = 32, scale: float = 1.0) -> PackedTernaryMatrix:
    if group_size < 1 or tables < 1:
        raise ShapeError("group_size and tables must be >= 1")
    w = as_ternary(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {w.shape}")
    rows, cols = w.shape
    span = tables * group_size
    super_rows = max(1, -(-rows // span))
    padded = np.zeros((super_rows * span, cols), dtype=np.int64)
    padded[:rows] = w
    # (S, T, G, K) -> digits weighted by 3**g, summed over g
    digits = (padded + 1).reshape(super_rows, tables, group_size, cols)
    weights = 3 ** np.arange(group_size, dtype=np.int64)
    idx = np.einsum("stgk,g->skt", digits, weights)
    dtype = np.uint8 if 3**group_size <= 256 else np.uint16
    return PackedTernaryMatrix(group_size, tables, rows, cols, idx.astype(dtype), float(scale))


def unpack_matrix(p: PackedTernaryMatrix, original_rows: int | None = None) -> np.ndarray:
    rows = p.rows if original_rows is None else original_rows
    if rows > p.padded_rows or rows < 0:
        raise ShapeError(f"original_rows={rows} exceeds padded capacity {p.padded_rows}")
    trits = trit_table(p.group_size)[p.indices.astype(np.int64)]  # (S, K, T, G)
    full = trits.transpose(0, 2, 3, 1).reshape(p.padded_rows, p.cols)
    return np.ascontiguousarray(full[:rows])


def ternarize(w: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, float]:
    """Absmean ternarisation of a real matrix: ``w ~ trits * scale``.

    Used by the packer CLI for fp32 dumps; training-time recipes are out of
    scope, this is only the post-hoc rounding.
    """
    w = np.asarray(w, dtype=np.float64)
    scale = float(np.mean(np.abs(w))) + eps
    trits = np.clip(np.rint(w / scale), -1, 1).astype(np.int8)
    return trits, scale
