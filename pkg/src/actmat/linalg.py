"""Dense float64 kernels: SVD, pseudoinverse, Frobenius geometry, Pearson."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "SvdFactors",
    "LinalgError",
    "as_matrix",
    "svd",
    "pinv",
    "default_rtol",
    "frobenius_inner",
    "frobenius_norm",
    "frobenius_cosine",
    "angular_distance",
    "spectral_norm",
    "pearson",
]


class LinalgError(ArithmeticError):
    pass


class SvdFactors(NamedTuple):
    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.Vt


def as_matrix(A, name: str = "matrix") -> np.ndarray:
    """Validate a finite 2-D array and return it as float64."""
    arr = np.asarray(A, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def svd(A) -> SvdFactors:
    """Thin SVD with a deterministic sign convention.

    Each left singular vector is flipped so that its largest-magnitude entry
    is positive (first such entry on ties); the matching row of ``Vt`` is
    flipped with it.
    """
    A = as_matrix(A)
    m, n = A.shape
    if m == 0 or n == 0:
        r = 0
        return SvdFactors(np.zeros((m, r)), np.zeros(r), np.zeros((r, n)))
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"SVD did not converge for {m}x{n} input: {exc}") from exc
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return SvdFactors(U * signs, s, Vt * signs[:, None])


def default_rtol(shape: tuple[int, ...]) -> float:
    return max(shape) * np.finfo(np.float64).eps


def pinv(A, rtol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values <= rtol * s_max count as zero."""
    A = as_matrix(A)
    if rtol is None:
        rtol = default_rtol(A.shape)
    if rtol <= 0:
        raise ValueError("rtol must be positive")
    U, s, Vt = svd(A)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(A.shape[::-1])
    keep = s > rtol * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def _same_shape(A: np.ndarray, B: np.ndarray) -> None:
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")


def frobenius_inner(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _same_shape(A, B)
    return float(np.dot(A.ravel(), B.ravel()))


def frobenius_norm(A) -> float:
    return float(np.linalg.norm(np.asarray(A, dtype=np.float64)))


def frobenius_cosine(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _same_shape(A, B)
    na, nb = frobenius_norm(A), frobenius_norm(B)
    if na == 0.0 or nb == 0.0:
        raise ValueError("undefined angle: zero-norm argument")
    return float(np.clip(frobenius_inner(A, B) / (na * nb), -1.0, 1.0))


def angular_distance(A, B) -> float:
    """Angle in [0, pi] between A and B under the Frobenius inner product.

    Equal to ``arccos`` of the clamped Frobenius cosine, but evaluated as
    ``2 * atan2(|a - b|, |a + b|)`` on the unit-normalised matrices, which
    stays accurate for nearly parallel or antiparallel arguments where
    ``arccos`` loses half the significant digits.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _same_shape(A, B)
    na, nb = frobenius_norm(A), frobenius_norm(B)
    if not (np.isfinite(na) and np.isfinite(nb)):
        raise ValueError("undefined angle: non-finite argument")
    if na == 0.0 or nb == 0.0:
        raise ValueError("undefined angle: zero-norm argument")
    a = A / na
    b = B / nb
    angle = 2.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b))
    return float(min(max(angle, 0.0), np.pi))


def spectral_norm(A) -> float:
    A = as_matrix(A)
    if A.size == 0:
        return 0.0
    return float(svd(A).singular_values[0])


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; raises ValueError on a constant series."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson needs at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("zero variance")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))
