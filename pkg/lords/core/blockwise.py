"""
Block-wise baseline quantization, scale expansion, rank budgets and
mixed-precision layer plans.

Blocks are contiguous runs of block_size elements within a row and never
cross row boundaries.
"""

import math
from enum import Enum
from typing import List

import numpy as np

from .codebook import build_codebook, Codebook, scaled_codes
from .errors import ConfigError, DivisibilityError, RankError, ShapeError
from .matrix import as_matrix, DenseMatrix
from .tensors import BlockScales, CodebookId, FactorPair, QuantizedTensor


class BitConfig(Enum):
    """Mixed-precision configurations: share of leading layers kept at NF4"""
    BITS_3 = "3"
    BITS_2_5 = "2.5"
    BITS_2_25 = "2.25"
    BITS_2 = "2"

    @property
    def nf4_fraction(self) -> float:
        return {
            BitConfig.BITS_3: 0.5,
            BitConfig.BITS_2_5: 0.25,
            BitConfig.BITS_2_25: 0.125,
            BitConfig.BITS_2: 0.0,
        }[self]

    @classmethod
    def from_label(cls, label: str) -> "BitConfig":
        value = label.lower().replace("bit", "").strip()
        for config in cls:
            if config.value == value:
                return config
        raise ConfigError(f"unknown bit configuration '{label}' (choose 3, 2.5, 2.25 or 2)")


def _check_block_size(cols: int, block_size: int):
    if block_size < 1:
        raise DivisibilityError(f"block size must be positive, got {block_size}")
    if cols % block_size != 0:
        raise DivisibilityError(f"block size {block_size} does not divide {cols} columns")


def compute_block_scales(w: DenseMatrix, block_size: int) -> BlockScales:
    """
    Absmax scale of every contiguous block within each row.

    Args:
        w: Weight matrix (n x m)
        block_size: Elements per block, must divide m

    Returns:
        BlockScales of shape n x (m / block_size)
    """
    w = as_matrix(w, "weights")
    n, m = w.shape
    _check_block_size(m, block_size)
    scales = np.abs(w).reshape(n, m // block_size, block_size).max(axis=2)
    return BlockScales(scales=scales, block_size=block_size)


def expand_scales(s: BlockScales) -> DenseMatrix:
    """Repeat every block scale across its block (S = s kron 1_{1 x B})."""
    return np.repeat(s.scales, s.block_size, axis=1)


def scale_matrix(q: QuantizedTensor) -> DenseMatrix:
    """Full n x m scale matrix of either representation."""
    if isinstance(q.scale_repr, FactorPair):
        return q.scale_repr.product()
    return expand_scales(q.scale_repr)


def blockwise_quantize(w: DenseMatrix, block_size: int, cb: Codebook) -> QuantizedTensor:
    w = as_matrix(w, "weights")
    scales = compute_block_scales(w, block_size)
    codes = scaled_codes(w, expand_scales(scales), cb)
    return QuantizedTensor(
        rows=w.shape[0],
        cols=w.shape[1],
        codebook_id=cb.id,
        codes=codes,
        scale_repr=scales,
    )


def dequantize(q: QuantizedTensor) -> DenseMatrix:
    """W_hat = levels[codes] * S."""
    cb = build_codebook(q.codebook_id)
    return cb.values(q.codes) * scale_matrix(q)


def equivalent_rank(n: int, m: int, block_size: int) -> int:
    """
    Rank whose factor budget r(n + m) matches the block budget nm / B.

    Raises:
        RankError: if the budget rounds down to zero
    """
    if n < 1 or m < 1 or block_size < 1:
        raise ShapeError(f"shape ({n}, {m}) and block size {block_size} must be positive")
    r = (n * m) // (block_size * (n + m))
    if r < 1:
        raise RankError(f"shape ({n}, {m}) is too small for block size {block_size}: rank would be 0")
    return r


def aligned_rank(n: int, m: int, block_size: int, adapter_rank: int) -> int:
    """Equivalent rank plus the rank of a LoRA adapter being matched."""
    if adapter_rank < 0:
        raise RankError(f"adapter rank must be non-negative, got {adapter_rank}")
    return equivalent_rank(n, m, block_size) + adapter_rank


def mixed_precision_plan(num_layers: int, config: BitConfig) -> List[CodebookId]:
    """NF4 for the leading floor(p * L) layers, NF2 for the rest."""
    if num_layers < 1:
        raise ShapeError(f"layer count must be positive, got {num_layers}")
    high = math.floor(config.nf4_fraction * num_layers)
    return [CodebookId.NF4 if i < high else CodebookId.NF2 for i in range(num_layers)]
