"""
On-disk formats: LRT1 dense tensors and LRQ1 packed quantized artifacts.

Both are little-endian with 28-byte headers:

    LRT1: magic, u32 version, u8 dtype, u8 ndim, 2 reserved, u64 rows, u64 cols,
          then rows*cols float32 values row-major.
    LRQ1: magic, u32 version, u8 codebook id, u8 repr, 2 reserved, u64 rows,
          u64 cols, then (u32 block size + float32 scales) or
          (u32 rank + float32 B + float32 A), then the packed codes.

float64 values are rounded to nearest-even float32 on write. Writes go to a
temporary file in the target directory and are renamed into place.
"""

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .codebook import build_codebook, pack_codes, unpack_codes
from .errors import (BadMagicError, CodebookError, FormatError, TruncatedFileError,
                     UnsupportedDtypeError, VersionError)
from .matrix import as_matrix, DenseMatrix
from .tensors import BlockScales, CodebookId, FactorPair, QuantizedTensor, ScaleRepr

TENSOR_MAGIC = b"LRT1"
PACKED_MAGIC = b"LRQ1"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIBB2xQQ")
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")

PathLike = Union[str, Path]


def atomic_write(path: PathLike, data: bytes):
    """Write bytes to a sibling temp file, fsync, then rename over path."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_f32_bytes(m: np.ndarray) -> bytes:
    stored = np.ascontiguousarray(m, dtype=np.float64).astype(_F32)
    if not np.all(np.isfinite(stored)):
        raise FormatError("values overflow float32 storage")
    return stored.tobytes()


def to_storage_precision(m: np.ndarray) -> np.ndarray:
    """Round through float32 and back, matching what a file roundtrip yields."""
    return np.asarray(m, dtype=np.float64).astype(_F32).astype(np.float64)


class _Reader:
    """Cursor over a byte buffer that reports truncation uniformly"""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedFileError(
                f"{self.what} truncated: need {self.pos + count} bytes, file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f32_matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 4)
        m = np.frombuffer(raw, dtype=_F32).astype(np.float64).reshape(rows, cols)
        if not np.all(np.isfinite(m)):
            raise FormatError(f"{self.what}: {int(np.sum(~np.isfinite(m)))} non-finite values in payload")
        return m

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what} has {len(self.data) - self.pos} trailing bytes")


def _read_header(reader: _Reader, magic: bytes):
    if len(reader.data) < 4:
        raise TruncatedFileError(f"{reader.what} truncated: no magic")
    if reader.data[:4] != magic:
        raise BadMagicError(f"{reader.what}: bad magic {reader.data[:4]!r}, expected {magic!r}")
    found, version, b1, b2, rows, cols = _HEADER.unpack(reader.take(_HEADER.size))
    if version != FORMAT_VERSION:
        raise VersionError(f"{reader.what}: unsupported version {version}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{reader.what}: empty shape {rows}x{cols}")
    return b1, b2, rows, cols


def encode_tensor(m: DenseMatrix) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return _HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, DTYPE_F32, 2, rows, cols) + to_f32_bytes(m)


def decode_tensor(data: bytes, what: str = "tensor file") -> DenseMatrix:
    reader = _Reader(data, what)
    dtype, ndim, rows, cols = _read_header(reader, TENSOR_MAGIC)
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{what}: unsupported dtype {dtype}")
    if ndim != 2:
        raise FormatError(f"{what}: expected 2 dimensions, header says {ndim}")
    m = reader.f32_matrix(rows, cols)
    reader.finish()
    return m


def encode_packed(q: QuantizedTensor) -> bytes:
    cb = build_codebook(q.codebook_id)
    parts = [_HEADER.pack(PACKED_MAGIC, FORMAT_VERSION, q.codebook_id.value,
                          q.scale_repr_kind.value, q.rows, q.cols)]
    if isinstance(q.scale_repr, FactorPair):
        parts += [_U32.pack(q.scale_repr.rank), to_f32_bytes(q.scale_repr.b), to_f32_bytes(q.scale_repr.a)]
    else:
        parts += [_U32.pack(q.scale_repr.block_size), to_f32_bytes(q.scale_repr.scales)]
    parts.append(pack_codes(q.codes.reshape(-1), cb.bits))
    return b"".join(parts)


def decode_packed(data: bytes, what: str = "packed file") -> QuantizedTensor:
    reader = _Reader(data, what)
    tag, kind, rows, cols = _read_header(reader, PACKED_MAGIC)
    codebook_id = CodebookId.from_tag(tag)
    cb = build_codebook(codebook_id)

    if kind == ScaleRepr.BLOCK.value:
        block_size = reader.u32()
        if block_size < 1 or cols % block_size != 0:
            raise FormatError(f"{what}: block size {block_size} does not divide {cols} columns")
        scale_repr = BlockScales(scales=reader.f32_matrix(rows, cols // block_size), block_size=block_size)
    elif kind == ScaleRepr.FACTOR.value:
        rank = reader.u32()
        if rank < 1:
            raise FormatError(f"{what}: factor rank must be at least 1")
        scale_repr = FactorPair(b=reader.f32_matrix(rows, rank), a=reader.f32_matrix(rank, cols))
    else:
        raise FormatError(f"{what}: unknown scale representation {kind}")

    count = rows * cols
    codes = unpack_codes(reader.take(-(-count * cb.bits // 8)), count, cb.bits)
    reader.finish()
    if codes.size and codes.max() >= cb.size:
        raise CodebookError(f"{what}: code index {codes.max()} out of range for {codebook_id.label}")
    return QuantizedTensor(rows=rows, cols=cols, codebook_id=codebook_id,
                           codes=codes.reshape(rows, cols), scale_repr=scale_repr)


def to_storage(q: QuantizedTensor) -> QuantizedTensor:
    """The artifact exactly as it will read back from disk."""
    if isinstance(q.scale_repr, FactorPair):
        scale_repr = FactorPair(b=to_storage_precision(q.scale_repr.b), a=to_storage_precision(q.scale_repr.a))
    else:
        scale_repr = BlockScales(scales=to_storage_precision(q.scale_repr.scales),
                                 block_size=q.scale_repr.block_size)
    return QuantizedTensor(rows=q.rows, cols=q.cols, codebook_id=q.codebook_id,
                           codes=q.codes, scale_repr=scale_repr)


def read_tensor(path: PathLike) -> DenseMatrix:
    return decode_tensor(Path(path).read_bytes(), what=str(path))


def write_tensor(m: DenseMatrix, path: PathLike):
    atomic_write(path, encode_tensor(m))


def read_packed(path: PathLike) -> QuantizedTensor:
    return decode_packed(Path(path).read_bytes(), what=str(path))


def write_packed(q: QuantizedTensor, path: PathLike):
    atomic_write(path, encode_packed(q))
