"""Dense float64 linear algebra used by the rest of the package.

Plain numpy arrays are the carriers: a matrix is a 2-D float64 array, a
vector 1-D.  Every function is pure and deterministic for fixed inputs;
nothing here mutates its arguments.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "NotSPDError",
    "as_matrix",
    "as_vector",
    "matmul",
    "khatri_rao",
    "hadamard",
    "cholesky",
    "cho_solve",
    "solve_spd",
    "sym_eigvals",
    "frobenius_norm",
]


class NotSPDError(ValueError):
    """A symmetric factorization met a non-positive pivot.

    The offending diagonal position is kept in ``pivot`` so callers can
    point at the block that produced the bad matrix.
    """

    def __init__(self, pivot: int, value: float):
        super().__init__(
            f"matrix is not symmetric positive definite: "
            f"pivot {pivot} came out {value:.6e}"
        )
        self.pivot = pivot
        self.value = value


def as_matrix(a) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, copying only when needed."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ValueError("matrix entries must all be finite")
    return out


def as_vector(a) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"expected a 1-D array, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ValueError("vector entries must all be finite")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product.

    Column m of the result is kron(a[:, m], b[:, m]); inputs of shape
    (p, m) and (q, m) give a (p*q, m) result.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"khatri_rao: column counts differ: {a.shape} and {b.shape}")
    p, cols = a.shape
    q = b.shape[0]
    return (a[:, None, :] * b[None, :, :]).reshape(p * q, cols)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise product of two equal-shape matrices."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shapes differ: {a.shape} and {b.shape}")
    return a * b


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor, no pivoting.

    Raises NotSPDError with the pivot index as soon as a diagonal entry
    fails to be positive; nothing is silently regularized.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky: matrix must be square, got {a.shape}")
    n = a.shape[0]
    low = np.zeros((n, n))
    for j in range(n):
        d = float(a[j, j] - low[j, :j] @ low[j, :j])
        if d <= 0.0 or not math.isfinite(d):
            raise NotSPDError(j, d)
        ljj = math.sqrt(d)
        low[j, j] = ljj
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / ljj
    return low


def cho_solve(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b given the lower Cholesky factor L."""
    n = low.shape[0]
    if b.shape != (n,):
        raise ValueError(f"cho_solve: rhs shape {b.shape} does not match factor {low.shape}")
    y = np.empty(n)
    for i in range(n):
        y[i] = (b[i] - low[i, :i] @ y[:i]) / low[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - low[i + 1 :, i] @ x[i + 1 :]) / low[i, i]
    return x


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a via Cholesky."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_spd: matrix must be square, got {a.shape}")
    if b.shape != (a.shape[0],):
        raise ValueError(f"solve_spd: rhs shape {b.shape} does not match matrix {a.shape}")
    return cho_solve(cholesky(a), b)


# Relative asymmetry above this is rejected rather than symmetrized.
_SYM_TOL = 1e-12


def sym_eigvals(a: np.ndarray) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eigvals: matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    asym = float(np.abs(a - a.T).max(initial=0.0))
    if asym > _SYM_TOL * scale:
        raise ValueError(f"sym_eigvals: matrix is not symmetric (max asymmetry {asym:.3e})")
    return np.linalg.eigvalsh(a)


def frobenius_norm(a: np.ndarray) -> float:
    """Square root of the sum of squared entries."""
    return float(np.sqrt(np.sum(np.asarray(a) ** 2)))
