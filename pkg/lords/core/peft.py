"""
Multiplicative adaptation on frozen codes.

Retuning the scale factors from BA to B'A' changes the weights by
Q * (B'A' - BA); merging simply swaps the factors in the artifact, so the
adapted model dequantizes exactly like the base one.

The toy trainer fine-tunes only B' and A' on a regression task with the
codes frozen.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .blockwise import dequantize
from .codebook import build_codebook, Codebook
from .errors import ConfigError, QatDivergenceError, RankError, ShapeError
from .matrix import DenseMatrix, singular_values
from .optim import adamw_step, AdamWState
from .ste import CLAMP_EPS, clamp_scales, fake_quant_backward, FakeQuantCache, RegressionData, regression_loss
from .tensors import FactorPair, QuantizedTensor

logger = logging.getLogger(__name__)

DEFAULT_RANK_TOL = 1e-6


def _check_pair(codes: np.ndarray, base: FactorPair, tuned: FactorPair):
    if base.rank != tuned.rank:
        raise RankError(f"base rank {base.rank} differs from tuned rank {tuned.rank}")
    if base.b.shape != tuned.b.shape or base.a.shape != tuned.a.shape:
        raise ShapeError("base and tuned factors differ in shape")
    if codes.shape != (base.rows, base.cols):
        raise ShapeError(f"codes {codes.shape} do not match factors {base.rows}x{base.cols}")


def peft_delta(codes: np.ndarray, cb: Codebook, base: FactorPair, tuned: FactorPair) -> DenseMatrix:
    """Delta W = levels[codes] * (B'A' - BA)."""
    _check_pair(codes, base, tuned)
    return cb.values(codes) * (tuned.product() - base.product())


def merged_dequantize(codes: np.ndarray, cb: Codebook, tuned: FactorPair) -> DenseMatrix:
    if codes.shape != (tuned.rows, tuned.cols):
        raise ShapeError(f"codes {codes.shape} do not match factors {tuned.rows}x{tuned.cols}")
    return cb.values(codes) * tuned.product()


def merge_factors(base: QuantizedTensor, tuned: FactorPair) -> QuantizedTensor:
    """Artifact with the tuned factors absorbed; codes are untouched."""
    if not isinstance(base.scale_repr, FactorPair):
        raise ShapeError("merging needs a factored (refined) base artifact, got block scales")
    _check_pair(base.codes, base.scale_repr, tuned)
    return QuantizedTensor(
        rows=base.rows,
        cols=base.cols,
        codebook_id=base.codebook_id,
        codes=base.codes,
        scale_repr=tuned,
    )


def effective_rank(delta: DenseMatrix, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """
    Number of singular values above rel_tol times the largest one.

    Returns:
        Count, 0 for an all-zero delta
    """
    if not 0.0 < rel_tol < 1.0:
        raise ConfigError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    sigma = singular_values(delta)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > rel_tol * sigma[0]))


def additive_delta_rank_reference(b_lora: DenseMatrix, a_lora: DenseMatrix,
                                  rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Effective rank of an additive LoRA update B_lora A_lora, at most its rank."""
    if b_lora.shape[1] != a_lora.shape[0]:
        raise ShapeError(f"LoRA factors {b_lora.shape} and {a_lora.shape} are inconsistent")
    return effective_rank(b_lora @ a_lora, rel_tol)



@dataclass(frozen=True)
class PeftConfig:
    lr: float = 0.005
    steps: int = 200
    clamp_eps: float = CLAMP_EPS

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")


@dataclass
class PeftResult:
    losses: List[float] = field(default_factory=list)
    factors: Optional[FactorPair] = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def make_peft_task(base: QuantizedTensor, seed: int, samples: int = 256, shift: float = 0.1) -> RegressionData:
    """
    Seeded downstream task: the base weights with every element rescaled by
    1 + shift * N(0, 1), observed through Gaussian inputs.
    """
    if samples < 1:
        raise ConfigError(f"samples must be positive, got {samples}")
    rng = np.random.default_rng(seed)
    target = dequantize(base) * (1.0 + shift * rng.standard_normal((base.rows, base.cols)))
    x = rng.standard_normal((base.cols, samples))
    return RegressionData(x=x, y=target @ x)


def frozen_code_cache(codes: np.ndarray, cb: Codebook, f: FactorPair, eps: float = CLAMP_EPS) -> FakeQuantCache:
    """Backward-pass cache for W_hat = Q * S with Q fixed: the ratio term is zero."""
    q = cb.values(codes)
    return FakeQuantCache(q=q, s=clamp_scales(f.product(), eps), u=np.zeros_like(q))


def toy_peft_train(
    data: RegressionData,
    base: QuantizedTensor,
    start: FactorPair,
    cfg: PeftConfig,
    progress: Optional[Callable[[int, float], None]] = None,
) -> PeftResult:
    """
    Scale-only fine-tuning of y = (Q * B'A') x with AdamW on B', A'.

    The codes of base stay frozen. Gradients come from the straight-through
    backward pass; its weight gradient is discarded.

    Args:
        data: Task inputs and targets
        base: Factored artifact whose codes are frozen
        start: Starting factors, usually the base factors
        cfg: Trainer configuration

    Returns:
        PeftResult with the loss before every step plus the final loss

    Raises:
        QatDivergenceError: if the loss becomes non-finite
    """
    if not isinstance(base.scale_repr, FactorPair):
        raise ShapeError("scale fine-tuning needs a factored (refined) artifact, got block scales")
    _check_pair(base.codes, base.scale_repr, start)
    if (base.rows, base.cols) != (data.y.shape[0], data.x.shape[0]):
        raise ShapeError(f"artifact {base.rows}x{base.cols} does not map {data.x.shape[0]} inputs "
                         f"to {data.y.shape[0]} outputs")
    cb = build_codebook(base.codebook_id)
    f = FactorPair(b=np.array(start.b, dtype=np.float64), a=np.array(start.a, dtype=np.float64))
    state = AdamWState.zeros_like([f.b, f.a])
    result = PeftResult()

    for step in range(cfg.steps + 1):
        cache = frozen_code_cache(base.codes, cb, f, cfg.clamp_eps)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, upstream = regression_loss(cache.q * cache.s, data)
        if not np.isfinite(loss):
            raise QatDivergenceError(f"fine-tuning loss diverged at step {step} (lr={cfg.lr})")
        result.losses.append(loss)
        if progress:
            progress(step, loss)
        if step == cfg.steps:
            break
        _, grad_b, grad_a = fake_quant_backward(upstream, cache, f)
        (b, a), state = adamw_step(state, [f.b, f.a], [grad_b, grad_a], cfg.lr)
        f = FactorPair(b=b, a=a)

    logger.info("scale fine-tuning rank %d: loss %.6g -> %.6g", f.rank, result.losses[0], result.losses[-1])
    result.factors = f
    return result
