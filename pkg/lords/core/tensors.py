"""
Core data structures and enums shared across lords.
Defines codebook identities, scale representations and the quantized artifact.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from .errors import CodebookError, ShapeError


class CodebookId(Enum):
    """Codebook identities; values are the 1-byte tags used in packed files"""
    NF4 = 0
    NF2 = 1
    INT4S = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "CodebookId":
        try:
            return cls[label.upper()]
        except KeyError:
            raise CodebookError(f"unknown codebook '{label}' (choose nf4, nf2 or int4s)") from None

    @classmethod
    def from_tag(cls, tag: int) -> "CodebookId":
        try:
            return cls(tag)
        except ValueError:
            raise CodebookError(f"unknown codebook id {tag}") from None


class ScaleRepr(Enum):
    """Scale representation tag used in packed files"""
    BLOCK = 0
    FACTOR = 1


@dataclass(frozen=True)
class BlockScales:
    """Per-block absmax scales, shape n x (m / block_size)"""
    scales: np.ndarray
    block_size: int

    @property
    def rows(self) -> int:
        return int(self.scales.shape[0])

    @property
    def cols(self) -> int:
        return int(self.scales.shape[1]) * self.block_size

    @property
    def float_params(self) -> int:
        return int(self.scales.size)


@dataclass(frozen=True)
class FactorPair:
    """Low-rank scale factorization S = B @ A"""
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"factor shapes {self.b.shape} and {self.a.shape} are inconsistent")
        if self.b.shape[1] < 1:
            raise ShapeError("factor rank must be at least 1")

    @property
    def rank(self) -> int:
        return int(self.b.shape[1])

    @property
    def rows(self) -> int:
        return int(self.b.shape[0])

    @property
    def cols(self) -> int:
        return int(self.a.shape[1])

    @property
    def float_params(self) -> int:
        return self.rank * (self.rows + self.cols)

    def product(self) -> np.ndarray:
        return self.b @ self.a


@dataclass(frozen=True)
class QuantizedTensor:
    """Level codes plus their scale representation; the deployable artifact"""
    rows: int
    cols: int
    codebook_id: CodebookId
    codes: np.ndarray
    scale_repr: Union[BlockScales, FactorPair]

    def __post_init__(self):
        if self.codes.shape != (self.rows, self.cols):
            raise ShapeError(f"codes shape {self.codes.shape} != ({self.rows}, {self.cols})")
        if (self.scale_repr.rows, self.scale_repr.cols) != (self.rows, self.cols):
            raise ShapeError(f"{self.scale_repr_kind.name.lower()} scales do not cover the code matrix")

    @property
    def scale_repr_kind(self) -> ScaleRepr:
        return ScaleRepr.FACTOR if isinstance(self.scale_repr, FactorPair) else ScaleRepr.BLOCK

    @property
    def float_params(self) -> int:
        return self.scale_repr.float_params
