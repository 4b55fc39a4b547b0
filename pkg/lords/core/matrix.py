"""
Dense matrix primitives: products, Hadamard products and the spectral
operations (SVD, truncated SVD, nuclear norm) the rest of lords builds on.

Matrices are 2-D float64 numpy arrays. Stored tensors are float32 on disk;
conversion happens only in the formats module.
"""

from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeError, SvdConvergenceError

DenseMatrix = np.ndarray


def as_matrix(data, name: str = "matrix") -> DenseMatrix:
    """
    Validate and convert input into a float64 matrix.

    Args:
        data: Anything numpy can turn into a 2-D array
        name: Operand name used in error messages

    Returns:
        C-contiguous float64 array of shape (rows, cols)
    """
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {m.ndim}-D")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD triple with non-increasing singular values"""
    u: DenseMatrix
    sigma: np.ndarray
    vt: DenseMatrix

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> DenseMatrix:
        return (self.u * self.sigma) @ self.vt


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape != b.shape:
        raise ShapeError(f"Hadamard product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def _fix_signs(u: DenseMatrix, vt: DenseMatrix):
    # Largest-magnitude entry of every left singular vector is positive;
    # argmax returns the lowest row index on ties.
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(m: DenseMatrix) -> SvdResult:
    """
    Full thin SVD with the deterministic sign convention.

    Args:
        m: Finite matrix (rows x cols)

    Returns:
        SvdResult with k = min(rows, cols) triples
    """
    m = as_matrix(m)
    try:
        u, sigma, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise SvdConvergenceError(f"SVD of {m.shape} matrix did not converge: {e}") from e
    u, vt = _fix_signs(u, vt)
    return SvdResult(u=u, sigma=np.maximum(sigma, 0.0), vt=vt)


def truncated_svd(m: DenseMatrix, r: int) -> SvdResult:
    """Top-r singular triples (best rank-r approximation)."""
    m = as_matrix(m)
    k = min(m.shape)
    if not 1 <= r <= k:
        raise RankError(f"rank {r} outside [1, {k}] for shape {m.shape}")
    full = svd(m)
    return SvdResult(u=full.u[:, :r].copy(), sigma=full.sigma[:r].copy(), vt=full.vt[:r, :].copy())


def singular_values(m: DenseMatrix) -> np.ndarray:
    m = as_matrix(m)
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as e:
        raise SvdConvergenceError(f"SVD of {m.shape} matrix did not converge: {e}") from e


def nuclear_norm(m: DenseMatrix) -> float:
    return float(np.sum(singular_values(m)))


def frobenius_norm(m: DenseMatrix) -> float:
    return float(np.linalg.norm(m, "fro"))
