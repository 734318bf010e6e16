"""Bit-exact weight container.

Layout (all integers little-endian)::

    magic    8s   b"TELLME01"
    version  u32
    hdr_len  u32  bytes of everything between here and the header CRC
    -- header --
    has_cfg  u8
    config   13 fields (11 x u32, 2 x f64)        if has_cfg
    n_tensor u32
    entries  n_tensor x directory entry
    -- end header --
    hdr_crc  u32  crc32 of the header bytes
    payloads concatenated, each addressed by (offset, nbytes) from the start
             of the payload region

A directory entry is ``name_len u16, name, tag u8, ndim u8, shape u32*ndim,
nbytes u64, offset u64, crc u32`` followed, for ternary-packed tensors only,
by ``group u8, tables u32, rows u32, cols u32, scale f64``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .packing import PackedTernaryMatrix

MAGIC = b"TELLME01"
VERSION = 1

TAG_TERNARY = 1
TAG_INT8 = 2
TAG_FP32 = 3

_CFG_INT_FIELDS = (
    "hidden", "layers", "heads", "head_dim", "ffn", "vocab", "capacity",
    "group_size", "tables", "q_lanes", "parallelism",
)
_CFG = struct.Struct("<11I2d")
_PACKED_META = struct.Struct("<BIIId")


class WeightFileError(Exception):
    pass


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeLengthError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


@dataclass
class WeightRecord:
    config: ModelConfig | None
    tensors: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, WeightRecord):
            return NotImplemented
        if self.config != other.config or list(self.tensors) != list(other.tensors):
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if type(a) is not type(b):
                return False
            if isinstance(a, PackedTernaryMatrix):
                if a != b:
                    return False
            elif a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def _tensor_payload(t) -> tuple[int, tuple[int, ...], bytes]:
    if isinstance(t, PackedTernaryMatrix):
        if 3**t.group_size > 256:
            raise WeightFileError("on-disk indices are one byte each; group_size must be <= 5")
        return TAG_TERNARY, t.indices.shape, t.indices.astype(np.uint8).tobytes()
    arr = np.asarray(t)
    if arr.dtype == np.int8:
        return TAG_INT8, arr.shape, arr.tobytes()
    if arr.dtype == np.float32:
        return TAG_FP32, arr.shape, arr.astype("<f4").tobytes()
    raise WeightFileError(f"unsupported tensor dtype {arr.dtype}")


def encode_record(record: WeightRecord) -> bytes:
    header = bytearray()
    if record.config is None:
        header += b"\x00"
    else:
        cfg = record.config
        header += b"\x01" + _CFG.pack(*(getattr(cfg, f) for f in _CFG_INT_FIELDS), cfg.norm_eps, cfg.rope_theta)
    header += struct.pack("<I", len(record.tensors))
    payloads = []
    offset = 0
    for name, t in record.tensors.items():
        tag, shape, data = _tensor_payload(t)
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<BB", tag, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        header += struct.pack("<QQI", len(data), offset, zlib.crc32(data))
        if tag == TAG_TERNARY:
            header += _PACKED_META.pack(t.group_size, t.tables, t.rows, t.cols, t.scale)
        payloads.append(data)
        offset += len(data)
    head = MAGIC + struct.pack("<II", VERSION, len(header))
    return head + bytes(header) + struct.pack("<I", zlib.crc32(header)) + b"".join(payloads)


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        if self.pos + s.size > self.end:
            raise TruncatedFileError("header ended early")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError("header ended early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def decode_record(buf: bytes) -> WeightRecord:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a TELLME weight file")
    if len(buf) < 16:
        raise TruncatedFileError("file ends inside the preamble")
    version, hdr_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    hdr_start, hdr_end = 16, 16 + hdr_len
    if hdr_end + 4 > len(buf):
        raise TruncatedFileError("file ends inside the header")
    (hdr_crc,) = struct.unpack_from("<I", buf, hdr_end)
    if zlib.crc32(buf[hdr_start:hdr_end]) != hdr_crc:
        raise ChecksumError("header checksum mismatch")

    r = _Reader(buf, hdr_start, hdr_end)
    (has_cfg,) = r.take("<B")
    config = None
    if has_cfg == 1:
        vals = r.take(_CFG)
        ints = dict(zip(_CFG_INT_FIELDS, vals[:11]))
        try:
            config = ModelConfig(**ints, norm_eps=vals[11], rope_theta=vals[12])
        except ValueError as exc:
            raise ShapeLengthError(f"invalid config record: {exc}") from exc
    elif has_cfg != 0:
        raise ShapeLengthError("bad config flag")

    (count,) = r.take("<I")
    entries = []
    for _ in range(count):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode("utf-8", errors="strict")
        tag, ndim = r.take("<BB")
        shape = r.take(f"<{ndim}I")
        nbytes, offset, crc = r.take("<QQI")
        meta = r.take(_PACKED_META) if tag == TAG_TERNARY else None
        entries.append((name, tag, shape, nbytes, offset, crc, meta))
    if r.pos != hdr_end:
        raise ShapeLengthError("header length does not match its contents")

    payload_start = hdr_end + 4
    payload_len = len(buf) - payload_start
    expected = 0
    tensors = {}
    for name, tag, shape, nbytes, offset, crc, meta in entries:
        itemsize = {TAG_TERNARY: 1, TAG_INT8: 1, TAG_FP32: 4}.get(tag)
        if itemsize is None:
            raise ShapeLengthError(f"{name}: unknown element-type tag {tag}")
        if int(np.prod(shape, dtype=np.int64)) * itemsize != nbytes:
            raise ShapeLengthError(f"{name}: shape {shape} disagrees with byte length {nbytes}")
        if offset != expected:
            raise ShapeLengthError(f"{name}: payload offset {offset}, expected {expected}")
        expected += nbytes
        if offset + nbytes > payload_len:
            raise TruncatedFileError(f"{name}: payload runs past end of file")
        data = buf[payload_start + offset:payload_start + offset + nbytes]
        if zlib.crc32(data) != crc:
            raise ChecksumError(f"{name}: payload checksum mismatch")
        if tag == TAG_FP32:
            tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
        elif tag == TAG_INT8:
            tensors[name] = np.frombuffer(data, dtype=np.int8).reshape(shape).copy()
        else:
            group, tables, rows, cols, scale = meta
            idx = np.frombuffer(data, dtype=np.uint8).reshape(shape).copy()
            try:
                tensors[name] = PackedTernaryMatrix(group, tables, rows, cols, idx, scale)
            except (ValueError, IndexError) as exc:
                raise ShapeLengthError(f"{name}: {exc}") from exc
    if expected != payload_len:
        raise ShapeLengthError(f"payload region is {payload_len} bytes, directory declares {expected}")
    return WeightRecord(config, tensors)


def write_weights(path, record: WeightRecord) -> None:
    Path(path).write_bytes(encode_record(record))


def read_weights(path) -> WeightRecord:
    return decode_record(Path(path).read_bytes())
