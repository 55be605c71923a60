"""Small dense complex matrix kernels used by the pilot protocol and estimators.

Matrices are plain ``numpy.ndarray`` objects of dtype ``complex128``.  Every
function accepts optional leading batch dimensions where that is cheap to
support (``matmul``, ``conj_transpose``, ``fro_norm_sq``).
"""
from __future__ import annotations

import numpy as np
from scipy import linalg as sla

# Reciprocal condition number below which p @ p^H is treated as singular.
RCOND_FLOOR = 1e-12


class LinAlgError(ValueError):
    """Raised for dimension mismatches and (numerically) singular systems."""


def as_cmatrix(a) -> np.ndarray:
    """Coerce ``a`` to a 2-D (or batched) complex128 array with finite entries."""
    arr = np.asarray(a, dtype=np.complex128)
    if arr.ndim < 2:
        raise LinAlgError(f"expected a matrix, got array of shape {arr.shape}")
    if 0 in arr.shape[-2:]:
        raise LinAlgError(f"matrix dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinAlgError("matrix has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.shape[-1] != b.shape[-2]:
        raise LinAlgError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conj_transpose(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    return np.conj(np.swapaxes(a, -1, -2))


def fro_norm_sq(a) -> float | np.ndarray:
    """Sum of squared magnitudes over the last two axes."""
    a = np.asarray(a)
    return np.sum(a.real**2 + a.imag**2, axis=(-2, -1))


def _rcond_hermitian(a: np.ndarray) -> float:
    w = np.linalg.eigvalsh(a)
    top = np.max(np.abs(w))
    if top == 0.0:
        return 0.0
    return float(np.min(np.abs(w)) / top)


def right_pseudoinverse(p) -> np.ndarray:
    """Return ``p^H (p p^H)^{-1}`` for a wide, full-row-rank ``p``.

    The Gram matrix is factorized (Cholesky) rather than inverted.
    """
    p = as_cmatrix(p)
    r, c = p.shape
    if r > c:
        raise LinAlgError(f"right pseudoinverse needs rows <= cols, got {p.shape}")
    gram = p @ conj_transpose(p)
    if _rcond_hermitian(gram) < RCOND_FLOOR:
        raise LinAlgError("p p^H is rank deficient")
    # (p p^H)^{-1} p  solved, then conjugate-transposed: p^H (p p^H)^{-1}
    return conj_transpose(hermitian_solve(gram, p))


def hermitian_solve(a, b, *, check: bool = True) -> np.ndarray:
    """Solve ``a x = b`` for Hermitian positive definite ``a``.

    Raises ``LinAlgError`` when ``a`` is not Hermitian (relative tolerance
    1e-10) or its Cholesky factorization fails.
    """
    a = as_cmatrix(a)
    b = as_cmatrix(b)
    n = a.shape[0]
    if a.shape != (n, n):
        raise LinAlgError(f"a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise LinAlgError(f"rhs has {b.shape[0]} rows, expected {n}")
    if check:
        scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
        if np.max(np.abs(a - conj_transpose(a))) > 1e-10 * scale:
            raise LinAlgError("a is not Hermitian")
    try:
        factor = sla.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise LinAlgError("a is not positive definite") from exc
    return sla.cho_solve(factor, b, check_finite=False)
