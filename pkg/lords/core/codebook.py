"""
Quantization level tables (NF4, NF2, symmetric INT4) and nearest-level search.

NormalFloat tables are checked in as constants; normal_float_levels()
regenerates them from the quantile construction so tests can confirm the
frozen values.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .errors import CodebookError, ShapeError
from .tensors import CodebookId

# Quantile offset of the NormalFloat construction: 0.5 * (1/32 + 1/30)
# away from the tails.
NF_OFFSET = 0.9677083

NF4_LEVELS = (
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
)

NF2_LEVELS = (-1.0, 0.0, 0.33791524171829224, 1.0)

INT4S_LEVELS = tuple(k / 7.0 for k in range(-7, 8))

# Rows per chunk for the vectorized scaled argmin (bounds peak memory).
_ARGMIN_CHUNK = 1 << 18


@dataclass(frozen=True)
class Codebook:
    """Ordered, immutable set of normalized quantization levels"""
    id: CodebookId
    levels: np.ndarray
    bits: int

    @property
    def size(self) -> int:
        return int(self.levels.shape[0])

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])

    @property
    def max_gap(self) -> float:
        return float(np.max(np.diff(self.levels)))

    def values(self, codes: np.ndarray) -> np.ndarray:
        """Map code indices to level values."""
        codes = np.asarray(codes)
        if codes.size and (codes.min() < 0 or codes.max() >= self.size):
            raise CodebookError(f"code index out of range for {self.id.label} ({self.size} levels)")
        return self.levels[codes]


def normal_float_levels(bits: int, offset: float = NF_OFFSET) -> np.ndarray:
    """
    Regenerate a NormalFloat table from standard-normal quantiles.

    The positive half takes 2^(bits-1) quantiles, the negative half one fewer,
    plus an exact zero; the result is sorted and scaled to [-1, 1].

    Args:
        bits: Code width (2 or 4)
        offset: Outermost quantile probability

    Returns:
        Sorted float64 array of 2^bits levels
    """
    half = 2 ** bits // 2
    positive = norm.ppf(np.linspace(offset, 0.5, half + 1)[:-1])
    negative = -norm.ppf(np.linspace(offset, 0.5, half)[:-1])
    values = np.sort(np.concatenate([positive, [0.0], negative]))
    return values / values.max()


@lru_cache(maxsize=None)
def build_codebook(codebook_id: CodebookId) -> Codebook:
    if codebook_id is CodebookId.NF4:
        levels, bits = NF4_LEVELS, 4
    elif codebook_id is CodebookId.NF2:
        levels, bits = NF2_LEVELS, 2
    elif codebook_id is CodebookId.INT4S:
        levels, bits = INT4S_LEVELS, 4
    else:
        raise CodebookError(f"unknown codebook {codebook_id!r}")
    table = np.array(levels, dtype=np.float64)
    table.setflags(write=False)
    return Codebook(id=codebook_id, levels=table, bits=bits)


def nearest_level(x: float, cb: Codebook) -> Tuple[int, float]:
    """Nearest level to x; ties go to the lower index, saturating at the endpoints."""
    index = int(np.argmin((x - cb.levels) ** 2))
    return index, float(cb.levels[index])


def nearest_scaled_level(w: float, s: float, cb: Codebook) -> Tuple[int, float]:
    """Level v minimizing (s*v - w)^2 without dividing by s."""
    index = int(np.argmin((s * cb.levels - w) ** 2))
    return index, float(cb.levels[index])


def nearest_level_indices(u: np.ndarray, cb: Codebook) -> np.ndarray:
    """Vectorized nearest_level over an array of ratios."""
    boundaries = (cb.levels[:-1] + cb.levels[1:]) / 2.0
    # side="left" sends exact midpoints to the lower index
    return np.searchsorted(boundaries, u, side="left").astype(np.int64)


def scaled_codes(w: np.ndarray, s: np.ndarray, cb: Codebook) -> np.ndarray:
    """
    Per-element scaled argmin over the codebook.

    Elements whose scale is exactly zero take the zero level, so all-zero
    blocks dequantize to exact zeros.

    Args:
        w: Weights
        s: Scales, same shape as w

    Returns:
        int64 code indices with the shape of w
    """
    if w.shape != s.shape:
        raise ShapeError(f"weights {w.shape} and scales {s.shape} differ in shape")
    flat_w = w.reshape(-1)
    flat_s = s.reshape(-1)
    codes = np.empty(flat_w.shape[0], dtype=np.int64)
    chunk = max(1, _ARGMIN_CHUNK // cb.size)
    for start in range(0, flat_w.shape[0], chunk):
        stop = start + chunk
        err = (flat_s[start:stop, None] * cb.levels[None, :] - flat_w[start:stop, None]) ** 2
        codes[start:stop] = np.argmin(err, axis=1)
    codes[flat_s == 0.0] = cb.zero_index
    return codes.reshape(w.shape)


def pack_codes(indices: Sequence[int], bits: int) -> bytes:
    """
    Pack level indices little-end first into bytes.

    4-bit: element 2k in the low nibble of byte k. 2-bit: element 4k in
    bits 0-1, ascending. The tail is padded with zero indices.
    """
    if bits not in (2, 4):
        raise CodebookError(f"unsupported code width {bits}")
    codes = np.asarray(indices, dtype=np.int64).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise CodebookError(f"code index out of range for {bits}-bit packing")
    per_byte = 8 // bits
    padded = np.zeros(-(-codes.size // per_byte) * per_byte, dtype=np.uint8)
    padded[:codes.size] = codes
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits)[None, :]
    packed = np.bitwise_or.reduce(padded.reshape(-1, per_byte) << shifts, axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    if bits not in (2, 4):
        raise CodebookError(f"unsupported code width {bits}")
    expected = -(-count * bits // 8)
    if len(data) != expected:
        raise ShapeError(f"expected {expected} packed bytes for {count} codes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    per_byte = 8 // bits
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits)[None, :]
    mask = np.uint8((1 << bits) - 1)
    codes = (raw[:, None] >> shifts) & mask
    return codes.reshape(-1)[:count].astype(np.int64)
