"""
Fake quantization with straight-through gradients for quantization-aware
training of weights together with their low-rank scale factors.

Forward:  W_hat = Round(W / S) * S with S = BA (magnitude-clamped).
Backward: dL/dW = upstream (STE), dL/dS = upstream * (Q - W / S),
          dL/dB = dL/dS A^T, dL/dA = B^T dL/dS.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .blockwise import compute_block_scales, expand_scales
from .codebook import build_codebook, Codebook, nearest_level_indices
from .errors import BoundaryProximityError, ConfigError, QatDivergenceError, ShapeError
from .matrix import DenseMatrix
from .refine import init_block_size, init_from_svd
from .tensors import CodebookId, FactorPair

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-6


@dataclass(frozen=True)
class FakeQuantCache:
    """Forward-pass values consumed by the backward pass"""
    q: DenseMatrix
    s: DenseMatrix
    u: DenseMatrix


def clamp_scales(s: DenseMatrix, eps: float = CLAMP_EPS) -> DenseMatrix:
    """Sign-preserving magnitude clamp; exact zeros become +eps."""
    signs = np.where(s < 0.0, -1.0, 1.0)
    return np.where(np.abs(s) < eps, signs * eps, s)


def fake_quant_forward(
    w: DenseMatrix, f: FactorPair, cb: Codebook, eps: float = CLAMP_EPS
) -> Tuple[DenseMatrix, FakeQuantCache]:
    if (f.rows, f.cols) != w.shape:
        raise ShapeError(f"factors {f.rows}x{f.cols} do not match weights {w.shape}")
    s = clamp_scales(f.product(), eps)
    u = w / s
    q = cb.levels[nearest_level_indices(u, cb)]
    return q * s, FakeQuantCache(q=q, s=s, u=u)


def fake_quant_backward(
    upstream: DenseMatrix, cache: FakeQuantCache, f: FactorPair
) -> Tuple[DenseMatrix, DenseMatrix, DenseMatrix]:
    """
    Straight-through gradients for W, B and A.

    Args:
        upstream: dL/dW_hat (n x m)
        cache: Values saved by fake_quant_forward
        f: Factors used in the forward pass

    Returns:
        (grad_w, grad_b, grad_a)
    """
    if upstream.shape != cache.q.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match forward output {cache.q.shape}")
    grad_s = upstream * (cache.q - cache.u)
    return upstream, grad_s @ f.a.T, f.b.T @ grad_s


def _boundary_distance(u: DenseMatrix, cb: Codebook) -> DenseMatrix:
    boundaries = (cb.levels[:-1] + cb.levels[1:]) / 2.0
    return np.min(np.abs(u[..., None] - boundaries), axis=-1)


def local_dequant_derivative_check(
    w: DenseMatrix,
    f: FactorPair,
    cb: Codebook,
    margin: float = 1e-4,
    tol: float = 1e-5,
) -> bool:
    """
    Confirm that the true local derivative of W_hat with respect to S is Q.

    Rounding is piecewise constant, so away from decision boundaries the
    element-wise derivative of Round(W / S) * S is Q itself; the STE scale
    gradient differs from it by the -W / S term.

    Raises:
        BoundaryProximityError: if any ratio lies within margin of a boundary
    """
    s = clamp_scales(f.product())
    u = w / s
    closest = float(np.min(_boundary_distance(u, cb)))
    if closest < margin:
        raise BoundaryProximityError(
            f"ratio within {closest:.3g} of a rounding boundary (need at least {margin:g})"
        )
    h = 1e-7 * np.abs(s)

    def w_hat(scales):
        return cb.levels[nearest_level_indices(w / scales, cb)] * scales

    fd = (w_hat(s + h) - w_hat(s - h)) / (2.0 * h)
    q = cb.levels[nearest_level_indices(u, cb)]
    return bool(np.all(np.abs(fd - q) <= tol))


@dataclass(frozen=True)
class RegressionData:
    """Synthetic regression pairs as columns: y = W* x"""
    x: DenseMatrix
    y: DenseMatrix

    def __post_init__(self):
        if self.x.shape[1] != self.y.shape[1] or self.x.shape[1] < 1:
            raise ShapeError("regression inputs and targets must hold the same non-zero sample count")


@dataclass(frozen=True)
class QatConfig:
    """B and A step at lr * scale_lr_ratio; W steps at lr"""
    lr: float = 0.05
    steps: int = 500
    scale_lr_ratio: float = 0.02
    train_scales: bool = True
    codebook: CodebookId = CodebookId.INT4S
    clamp_eps: float = CLAMP_EPS

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.scale_lr_ratio < 0:
            raise ConfigError(f"scale_lr_ratio must be non-negative, got {self.scale_lr_ratio}")


@dataclass
class QatResult:
    losses: List[float] = field(default_factory=list)
    w: Optional[DenseMatrix] = None
    factors: Optional[FactorPair] = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def regression_loss(w_hat: DenseMatrix, data: RegressionData) -> Tuple[float, DenseMatrix]:
    """Mean squared prediction error and its gradient with respect to W_hat."""
    samples = data.x.shape[1]
    err = w_hat @ data.x - data.y
    loss = float(np.sum(err * err)) / samples
    return loss, (2.0 / samples) * err @ data.x.T


def toy_qat_train(
    data: RegressionData,
    w: DenseMatrix,
    factors: FactorPair,
    cfg: QatConfig,
    progress: Optional[Callable[[int, float], None]] = None,
) -> QatResult:
    """
    Plain SGD on a single fake-quantized linear layer y = W_hat x.

    W always trains; B and A train only when cfg.train_scales is set, with
    the smaller step lr * scale_lr_ratio: a step on B moves S through B B^T,
    whose top eigenvalue is the leading singular value of S.
    The loss trace holds the loss before every step plus the final loss.

    Raises:
        QatDivergenceError: if the loss becomes non-finite
    """
    cb = build_codebook(cfg.codebook)
    if w.shape != (data.y.shape[0], data.x.shape[0]):
        raise ShapeError(f"layer {w.shape} does not map {data.x.shape[0]} inputs to {data.y.shape[0]} outputs")
    w = np.array(w, dtype=np.float64)
    f = factors
    result = QatResult()
    scale_lr = cfg.lr * cfg.scale_lr_ratio

    for step in range(cfg.steps + 1):
        w_hat, cache = fake_quant_forward(w, f, cb, cfg.clamp_eps)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, upstream = regression_loss(w_hat, data)
        if not np.isfinite(loss):
            raise QatDivergenceError(f"QAT loss diverged at step {step} (lr={cfg.lr})")
        result.losses.append(loss)
        if progress:
            progress(step, loss)
        if step == cfg.steps:
            break
        grad_w, grad_b, grad_a = fake_quant_backward(upstream, cache, f)
        w = w - cfg.lr * grad_w
        if cfg.train_scales:
            f = FactorPair(b=f.b - scale_lr * grad_b, a=f.a - scale_lr * grad_a)

    logger.info("toy QAT (%s): loss %.6g -> %.6g",
                "joint" if cfg.train_scales else "weights only",
                result.losses[0], result.losses[-1])
    result.w = w
    result.factors = f
    return result


def make_regression_instance(
    seed: int,
    rows: int = 8,
    cols: int = 16,
    samples: int = 256,
    rank: int = 2,
    codebook: CodebookId = CodebookId.INT4S,
    representable: bool = False,
    coarse_scale: float = 8.0,
) -> Tuple[RegressionData, DenseMatrix, FactorPair]:
    """
    Seeded toy problem: data, starting weights and starting factors.

    The starting factors are the rank-r SVD of coarse_scale times the
    block-wise absmax scales of the target (block size cols / rank), so the
    grid starts coarse and only scale training can refine it; the weights
    start at the target. With representable=True the factors are the plain
    absmax SVD, the target is placed exactly on their grid and the start is
    a small perturbation of it.
    """
    if coarse_scale <= 0:
        raise ConfigError(f"coarse_scale must be positive, got {coarse_scale}")
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((rows, cols))
    x = rng.standard_normal((cols, samples))
    scales = expand_scales(compute_block_scales(target, init_block_size(cols, rank)))
    if representable:
        cb = build_codebook(codebook)
        factors = init_from_svd(scales, rank)
        s = clamp_scales(factors.product())
        target = cb.levels[rng.integers(0, cb.size, size=(rows, cols))] * s
        start = target + 0.01 * cb.max_gap * np.abs(s) * rng.uniform(-1.0, 1.0, size=(rows, cols))
    else:
        factors = init_from_svd(coarse_scale * scales, rank)
        start = target.copy()
    return RegressionData(x=x, y=target @ x), start, factors
