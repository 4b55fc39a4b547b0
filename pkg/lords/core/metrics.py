"""
Quantization-quality metrics and comparison tables.

The reduction ratio compares a method's nuclear-norm residual against the
NF4 block-wise baseline at the same block size: 1 - ||W - W_hat||_* /
||W - nf4(W)||_*. Float-parameter counts cover scale parameters only.
"""

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blockwise import aligned_rank, blockwise_quantize, dequantize
from .codebook import build_codebook
from .errors import ShapeError, UndefinedRatioError
from .matrix import as_matrix, DenseMatrix, frobenius_norm, nuclear_norm
from .refine import refine_to_tensor, RefineConfig
from .tensors import CodebookId, FactorPair, QuantizedTensor

COLUMNS = [
    "matrix", "method", "codebook", "block_size", "rank",
    "float_params", "frob_error", "nuclear_error", "reduction_ratio",
]


def _check_pair(w: DenseMatrix, w_hat: DenseMatrix):
    if w.shape != w_hat.shape:
        raise ShapeError(f"reconstruction {w_hat.shape} does not match weights {w.shape}")


def frob_error(w: DenseMatrix, w_hat: DenseMatrix) -> float:
    _check_pair(w, w_hat)
    return frobenius_norm(w - w_hat)


def quant_error_nuclear(w: DenseMatrix, w_hat: DenseMatrix) -> float:
    _check_pair(w, w_hat)
    return nuclear_norm(w - w_hat)


def reduction_ratio(w: DenseMatrix, w_hat_method: DenseMatrix, w_hat_nf4: DenseMatrix) -> float:
    """
    Quantization error reduction ratio against the NF4 baseline.

    Raises:
        UndefinedRatioError: if the baseline reconstructs w exactly
    """
    baseline = quant_error_nuclear(w, w_hat_nf4)
    if baseline == 0.0:
        raise UndefinedRatioError("NF4 baseline residual is zero; reduction ratio is undefined")
    return 1.0 - quant_error_nuclear(w, w_hat_method) / baseline


def nf4_baseline(w: DenseMatrix, block_size: int) -> DenseMatrix:
    return dequantize(blockwise_quantize(w, block_size, build_codebook(CodebookId.NF4)))


@dataclass(frozen=True)
class MethodSpec:
    """One column of a comparison: block-wise baseline or LoRDS"""
    method: str
    block_size: int
    codebook: CodebookId = CodebookId.NF4
    adapter_rank: int = 0
    steps: int = 500
    lr: float = 0.05

    def __post_init__(self):
        if self.method not in ("blockwise", "lords"):
            raise ShapeError(f"unknown method '{self.method}' (choose blockwise or lords)")


@dataclass
class ReportRow:
    matrix: str
    method: str
    codebook: str
    block_size: int
    rank: Optional[int]
    float_params: float
    frob_error: float
    nuclear_error: float
    reduction_ratio: float

    def cells(self) -> List[str]:
        return [
            self.matrix,
            self.method,
            self.codebook,
            str(self.block_size),
            "" if self.rank is None else str(self.rank),
            f"{self.float_params:g}",
            f"{self.frob_error:.6g}",
            f"{self.nuclear_error:.6g}",
            f"{self.reduction_ratio:.6f}",
        ]


@dataclass
class ComparisonTable:
    rows: List[ReportRow]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows:
            writer.writerow(row.cells())
        return buffer.getvalue()

    def to_markdown(self) -> str:
        cells = [COLUMNS] + [row.cells() for row in self.rows]
        widths = [max(len(line[i]) for line in cells) for i in range(len(COLUMNS))]

        def render(line):
            return "| " + " | ".join(c.ljust(wd) for c, wd in zip(line, widths)) + " |"

        lines = [render(COLUMNS), "|" + "|".join("-" * (wd + 2) for wd in widths) + "|"]
        lines.extend(render(row.cells()) for row in self.rows)
        return "\n".join(lines) + "\n"


def artifact_row(name: str, w: DenseMatrix, q: QuantizedTensor, baseline_block_size: int,
                 baseline: Optional[DenseMatrix] = None) -> ReportRow:
    """Score an existing artifact against the NF4 baseline of w."""
    w = as_matrix(w, "weights")
    if (q.rows, q.cols) != w.shape:
        raise ShapeError(f"artifact {q.rows}x{q.cols} does not match weights {w.shape}")
    if baseline is None:
        baseline = nf4_baseline(w, baseline_block_size)
    w_hat = dequantize(q)
    factored = isinstance(q.scale_repr, FactorPair)
    return ReportRow(
        matrix=name,
        method="lords" if factored else "blockwise",
        codebook=q.codebook_id.label,
        block_size=baseline_block_size if factored else q.scale_repr.block_size,
        rank=q.scale_repr.rank if factored else None,
        float_params=q.float_params,
        frob_error=frob_error(w, w_hat),
        nuclear_error=quant_error_nuclear(w, w_hat),
        reduction_ratio=reduction_ratio(w, w_hat, baseline),
    )


def _quantize_with(w: DenseMatrix, spec: MethodSpec) -> QuantizedTensor:
    if spec.method == "blockwise":
        return blockwise_quantize(w, spec.block_size, build_codebook(spec.codebook))
    n, m = w.shape
    cfg = RefineConfig(
        rank=aligned_rank(n, m, spec.block_size, spec.adapter_rank),
        steps=spec.steps,
        lr=spec.lr,
        codebook=spec.codebook,
    )
    q, _ = refine_to_tensor(w, cfg)
    return q


def comparison_report(matrices: Sequence[Tuple[str, DenseMatrix]],
                      specs: Sequence[MethodSpec]) -> ComparisonTable:
    """
    Run every method on every matrix; append one unweighted mean row per method.

    Args:
        matrices: (name, weights) pairs
        specs: Methods to compare

    Returns:
        ComparisonTable with per-matrix rows followed by aggregate rows
    """
    if not matrices or not specs:
        raise ShapeError("comparison needs at least one matrix and one method")
    rows: List[ReportRow] = []
    per_spec: Dict[int, List[ReportRow]] = {i: [] for i in range(len(specs))}
    for name, w in matrices:
        w = as_matrix(w, name)
        baselines: Dict[int, DenseMatrix] = {}
        for i, spec in enumerate(specs):
            if spec.block_size not in baselines:
                baselines[spec.block_size] = nf4_baseline(w, spec.block_size)
            q = _quantize_with(w, spec)
            row = artifact_row(name, w, q, spec.block_size, baselines[spec.block_size])
            rows.append(row)
            per_spec[i].append(row)

    for i, spec in enumerate(specs):
        group = per_spec[i]
        ranks = {r.rank for r in group}
        rows.append(ReportRow(
            matrix="mean",
            method=spec.method,
            codebook=spec.codebook.label,
            block_size=spec.block_size,
            rank=ranks.pop() if len(ranks) == 1 else None,
            float_params=float(np.mean([r.float_params for r in group])),
            frob_error=float(np.mean([r.frob_error for r in group])),
            nuclear_error=float(np.mean([r.nuclear_error for r in group])),
            reduction_ratio=float(np.mean([r.reduction_ratio for r in group])),
        ))
    return ComparisonTable(rows=rows)
