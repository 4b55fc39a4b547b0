"""
LoRDS post-training refinement: initialisation of the scale factors from
block-wise absmax scales and the alternating quantization / adaptation loop.

The loop minimises ||W - (BA) * Q||_F^2. Each iteration first re-picks every
code by scaled argmin with B, A fixed, then takes one AdamW step on B, A with
the codes fixed. The returned codes are re-synchronised with the final
factors.
"""

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .blockwise import compute_block_scales, expand_scales
from .codebook import build_codebook, Codebook, scaled_codes
from .errors import ConfigError, RankError, ShapeError
from .matrix import as_matrix, DenseMatrix, frobenius_norm, nuclear_norm, svd
from .optim import adamw_step, AdamWState
from .tensors import BlockScales, CodebookId, FactorPair, QuantizedTensor

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, float], None]


@dataclass(frozen=True)
class RefineConfig:
    """Inputs of the refinement loop; the run is fully deterministic"""
    rank: int
    steps: int = 500
    lr: float = 0.05
    codebook: CodebookId = CodebookId.NF4
    init_block_size: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.rank < 1:
            raise RankError(f"rank must be at least 1, got {self.rank}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def key(self) -> str:
        """Stable identity string, used as the run cache key."""
        return (f"rank={self.rank};steps={self.steps};lr={self.lr!r};cb={self.codebook.label};"
                f"init={self.init_block_size};betas={self.beta1!r},{self.beta2!r};"
                f"eps={self.eps!r};wd={self.weight_decay!r}")


@dataclass
class RefineReport:
    """Error trace of one refinement run"""
    rank: int
    steps: int
    lr: float
    codebook: str
    init_block_size: int
    trace: List[float] = field(default_factory=list)
    quant_step_before: List[float] = field(default_factory=list)
    quant_step_after: List[float] = field(default_factory=list)
    final_error: float = 0.0
    nuclear_before: float = 0.0
    nuclear_after: float = 0.0
    wall_seconds: float = 0.0

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["iter", "frob_error"])
        for i, err in enumerate(self.trace):
            writer.writerow([i, repr(err)])
        writer.writerow(["nuclear_residual", repr(self.nuclear_before), repr(self.nuclear_after)])
        return buffer.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RefineReport":
        return cls(**data)


def init_block_size(cols: int, rank: int) -> int:
    """
    Block size for the scale computation that seeds the factors: m / r, or the
    smallest divisor of m above m / r when r does not divide m.
    """
    if rank < 1:
        raise RankError(f"rank must be at least 1, got {rank}")
    for d in range(-(-cols // rank), cols + 1):
        if cols % d == 0:
            return d
    return cols


def init_from_svd(s: DenseMatrix, r: int) -> FactorPair:
    """
    B = U_r sqrt(Sigma_r), A = sqrt(Sigma_r) V_r^T.

    Args:
        s: Scale matrix (n x m)
        r: Target rank, 1 <= r <= min(n, m)

    Returns:
        FactorPair whose product is the best rank-r approximation of s
    """
    s = as_matrix(s, "scales")
    k = min(s.shape)
    if not 1 <= r <= k:
        raise RankError(f"rank {r} outside [1, {k}] for shape {s.shape}")
    full = svd(s)
    root = np.sqrt(full.sigma[:r])
    return FactorPair(b=full.u[:, :r] * root, a=root[:, None] * full.vt[:r, :])


def init_from_blocks(s: BlockScales) -> FactorPair:
    """
    Exact factorisation of expanded block scales: B = s, A = I_k kron 1_{1 x block}.

    The product equals expand_scales(s) bit for bit, since every entry sums
    one scale against zeros.
    """
    k = s.scales.shape[1]
    return FactorPair(b=s.scales.copy(), a=np.repeat(np.eye(k), s.block_size, axis=1))


def initial_factors(w: DenseMatrix, rank: int, block: int) -> FactorPair:
    """
    Starting factors from the absmax scales at the given block size.

    When the scale matrix has exactly rank block columns it is factored
    exactly; otherwise its rank-r SVD truncation is used.
    """
    scales = compute_block_scales(w, block)
    if scales.scales.shape[1] == rank:
        return init_from_blocks(scales)
    return init_from_svd(expand_scales(scales), rank)


def quantization_step(w: DenseMatrix, f: FactorPair, cb: Codebook) -> np.ndarray:
    """Codes minimising (S_ij v - W_ij)^2 per element with S = BA fixed."""
    if (f.rows, f.cols) != w.shape:
        raise ShapeError(f"factors {f.rows}x{f.cols} do not match weights {w.shape}")
    return scaled_codes(w, f.product(), cb)


def mse_loss(w: DenseMatrix, f: FactorPair, codes: np.ndarray, cb: Codebook) -> float:
    residual = w - f.product() * cb.levels[codes]
    return float(np.sum(residual * residual))


def adaptation_gradients(
    w: DenseMatrix, f: FactorPair, codes: np.ndarray, cb: Codebook
) -> Tuple[DenseMatrix, DenseMatrix]:
    """
    Gradients of ||W - (BA) * Q||_F^2 with respect to B and A, Q frozen.

    Returns:
        (g_b, g_a) with g_b = dL/dS A^T and g_a = B^T dL/dS
    """
    if codes.shape != w.shape or (f.rows, f.cols) != w.shape:
        raise ShapeError("weights, codes and factors disagree in shape")
    q = cb.levels[codes]
    grad_s = -2.0 * (w - f.product() * q) * q
    return grad_s @ f.a.T, f.b.T @ grad_s


def refine(
    w: DenseMatrix,
    cfg: RefineConfig,
    progress: Optional[ProgressCallback] = None,
) -> Tuple[FactorPair, np.ndarray, RefineReport]:
    """
    Run the block-scale initialisation followed by cfg.steps alternations.

    Args:
        w: Weight matrix (n x m)
        cfg: Refinement configuration
        progress: Optional callback receiving (iteration, frobenius error)

    Returns:
        (final factors, re-synchronised codes, report)
    """
    started = time.perf_counter()
    w = as_matrix(w, "weights")
    n, m = w.shape
    if cfg.rank > min(n, m):
        raise RankError(f"rank {cfg.rank} exceeds min{w.shape}")
    cb = build_codebook(cfg.codebook)
    block = cfg.init_block_size or init_block_size(m, cfg.rank)

    f = initial_factors(w, cfg.rank, block)
    codes = quantization_step(w, f, cb)
    report = RefineReport(
        rank=cfg.rank,
        steps=cfg.steps,
        lr=cfg.lr,
        codebook=cfg.codebook.label,
        init_block_size=block,
    )
    q = cb.levels[codes]
    report.trace.append(frobenius_norm(w - f.product() * q))
    report.nuclear_before = nuclear_norm(w - f.product() * q)
    logger.debug("refine %dx%d rank=%d init block=%d error=%.6g", n, m, cfg.rank, block, report.trace[0])

    state = AdamWState.zeros_like(
        [f.b, f.a],
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    for t in range(1, cfg.steps + 1):
        s = f.product()
        report.quant_step_before.append(frobenius_norm(w - s * q))
        codes = scaled_codes(w, s, cb)
        q = cb.levels[codes]
        report.quant_step_after.append(frobenius_norm(w - s * q))

        g_b, g_a = adaptation_gradients(w, f, codes, cb)
        (b, a), state = adamw_step(state, [f.b, f.a], [g_b, g_a], cfg.lr)
        f = FactorPair(b=b, a=a)

        err = frobenius_norm(w - f.product() * q)
        report.trace.append(err)
        if progress:
            progress(t, err)

    codes = quantization_step(w, f, cb)
    residual = w - f.product() * cb.levels[codes]
    report.final_error = frobenius_norm(residual)
    report.nuclear_after = nuclear_norm(residual)
    report.wall_seconds = time.perf_counter() - started
    logger.info(
        "refined %dx%d rank=%d steps=%d: frob %.6g -> %.6g, nuclear %.6g -> %.6g",
        n, m, cfg.rank, cfg.steps, report.trace[0], report.final_error,
        report.nuclear_before, report.nuclear_after,
    )
    return f, codes, report


def refine_to_tensor(
    w: DenseMatrix,
    cfg: RefineConfig,
    progress: Optional[ProgressCallback] = None,
) -> Tuple[QuantizedTensor, RefineReport]:
    """refine() packaged as a QuantizedTensor artifact."""
    f, codes, report = refine(w, cfg, progress)
    q = QuantizedTensor(rows=f.rows, cols=f.cols, codebook_id=cfg.codebook, codes=codes, scale_repr=f)
    return q, report
