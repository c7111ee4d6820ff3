"""Numerical kernels: symmetric eigenvalues, singular values, Gaussian
fitting, Mahalanobis distance, radix-2 3D FFT, vector distances and seeded
random streams.

Arrays are plain ``numpy.ndarray``; statistics are accumulated in float64
regardless of the storage dtype.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import ConvergenceError, NumericalError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
DEFAULT_SHRINKAGE = 1e-3
RIDGE_FLOOR = 1e-8


# --------------------------------------------------------------------------
# random streams


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(parent: int, *path: int | str) -> int:
    """Child seed for a worker / sample / kind, stable across platforms."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(parent)).encode())
    for p in path:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF


# --------------------------------------------------------------------------
# eigen / singular values


def _round_robin(m: int) -> list[list[tuple[int, int]]]:
    # m even; every pair appears exactly once over m - 1 rounds, pairs in a
    # round are disjoint so their rotations commute.
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        rounds.append([(players[i], players[m - 1 - i]) for i in range(m // 2)])
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigvalsh(a: np.ndarray, tol: float = JACOBI_TOL,
                    max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Uses the parallel (round-robin) ordering so every round applies a batch
    of disjoint rotations as one orthogonal similarity transform. Iterates
    until the off-diagonal Frobenius norm drops below ``tol`` times the
    Frobenius norm of the input. Returns eigenvalues in ascending order.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericalError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite entries in matrix")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    if n == 1:
        return a.diagonal().copy()
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n)
    m = n + (n % 2)
    rounds = []
    for pairs in _round_robin(m):
        pq = np.array([(p, q) for p, q in pairs if p < n and q < n], dtype=np.intp)
        rounds.append((pq[:, 0], pq[:, 1]))

    off_mask = ~np.eye(n, dtype=bool)
    for sweep in range(max_sweeps + 1):
        off = math.sqrt(float(np.sum(a[off_mask] ** 2)))
        if off <= tol * scale:
            return np.sort(a.diagonal())
        if sweep == max_sweeps:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            g = np.eye(n)
            g[p, p] = c
            g[q, q] = c
            g[p, q] = s
            g[q, p] = -s
            a = g.T @ a @ g
            a[p, q] = 0.0
            a[q, p] = 0.0
    raise ConvergenceError(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
        f"(off-diagonal norm {off:.3e})", iterations=max_sweeps, residual=off)


def svd_singular_values(matrix: np.ndarray) -> np.ndarray:
    """Singular values of an N x K matrix with N <= K, descending.

    Computed as square roots of the eigenvalues of the N x N Gram matrix,
    clamped at zero. Callers with N > K pass the transpose.
    """
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise NumericalError(f"expected a non-empty rank-2 matrix, got shape {m.shape}")
    if m.shape[0] > m.shape[1]:
        raise NumericalError(f"need rows <= columns, got {m.shape}; pass the transpose")
    m = m.astype(np.float64, copy=False)
    if not np.all(np.isfinite(m)):
        raise NumericalError("non-finite entries in matrix")
    eig = jacobi_eigvalsh(m @ m.T)
    return np.sqrt(np.clip(eig, 0.0, None))[::-1]


# --------------------------------------------------------------------------
# Gaussian model


@dataclass(frozen=True)
class GaussianModel:
    """Multivariate Gaussian with a ridge-regularized covariance.

    Two factored forms are used, both exact:

    * primal (``basis is None``): ``chol`` is the lower Cholesky factor of
      ``covariance + ridge * I`` (M x M);
    * low-rank (n - 1 < M): ``basis`` holds the centered samples scaled by
      ``1/sqrt(n-1)`` (n x M), so ``covariance = basis.T @ basis``, and
      ``chol`` factors the n x n matrix ``ridge * I + basis @ basis.T``.
      Distances then follow from the Woodbury identity without ever forming
      the M x M covariance.
    """

    mean: np.ndarray
    ridge: float
    chol: np.ndarray
    basis: np.ndarray | None = None
    cov: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        if self.cov is not None:
            return self.cov
        return self.basis.T @ self.basis

    @property
    def regularized_covariance(self) -> np.ndarray:
        return self.covariance + self.ridge * np.eye(self.dim)


def fit_gaussian(samples: np.ndarray, shrinkage: float = DEFAULT_SHRINKAGE) -> GaussianModel:
    """Fit mean and unbiased covariance of ``samples`` (n x M).

    The covariance is regularized by ``lam * I`` with
    ``lam = max(shrinkage * trace(cov) / M, 1e-8)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise NumericalError(f"expected n x M samples with n, M >= 1, got {x.shape}")
    if shrinkage < 0:
        raise NumericalError("shrinkage must be non-negative")
    n, m = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    if n >= 2:
        centered /= math.sqrt(n - 1)
    else:
        centered[:] = 0.0
    trace = float(np.sum(centered * centered))
    ridge = max(shrinkage * trace / m, RIDGE_FLOOR)
    try:
        if n - 1 < m:
            inner = centered @ centered.T
            inner[np.diag_indices(n)] += ridge
            chol = cholesky(inner, lower=True)
            return GaussianModel(mean=mean, ridge=ridge, chol=chol, basis=centered)
        cov = centered.T @ centered
        cov = 0.5 * (cov + cov.T)
        reg = cov.copy()
        reg[np.diag_indices(m)] += ridge
        chol = cholesky(reg, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance is not positive definite after regularization: {exc}") from exc
    return GaussianModel(mean=mean, ridge=ridge, chol=chol, cov=cov)


def mahalanobis(model: GaussianModel, x: np.ndarray) -> float | np.ndarray:
    """Mahalanobis distance of ``x`` (length M, or k x M) to ``model``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim or x.ndim > 2:
        raise NumericalError(f"dimension mismatch: model dim {model.dim}, input shape {x.shape}")
    d = x - model.mean
    dt = np.atleast_2d(d).T  # M x k
    if model.basis is None:
        y = solve_triangular(model.chol, dt, lower=True)
        sq = np.sum(y * y, axis=0)
    else:
        y = solve_triangular(model.chol, model.basis @ dt, lower=True)
        sq = (np.sum(dt * dt, axis=0) - np.sum(y * y, axis=0)) / model.ridge
    out = np.sqrt(np.clip(sq, 0.0, None))
    return float(out[0]) if d.ndim == 1 else out


# --------------------------------------------------------------------------
# FFT


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last_axis(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    x = x[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = x.reshape(x.shape[:-1] + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * w
        x = np.concatenate((even + odd, even - odd), axis=-1).reshape(x.shape)
        m *= 2
    return x / math.sqrt(n)


def _fft3(v: np.ndarray, inverse: bool) -> np.ndarray:
    if v.ndim != 3:
        raise NumericalError(f"expected a rank-3 volume, got shape {v.shape}")
    for n in v.shape:
        if not _is_pow2(n):
            raise NumericalError(f"FFT extents must be powers of two, got {v.shape}")
    out = v.astype(np.complex128)
    for axis in range(3):
        out = np.moveaxis(_fft_last_axis(np.moveaxis(out, axis, -1), inverse), -1, axis)
    return out


def fft3(v: np.ndarray) -> np.ndarray:
    """Unitary 3D DFT of a real or complex volume with power-of-two extents."""
    return _fft3(np.asarray(v), inverse=False)


def ifft3(c: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft3`; returns the complex result (take ``.real``)."""
    return _fft3(np.asarray(c), inverse=True)


# --------------------------------------------------------------------------
# distances


def cosine_dissimilarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise NumericalError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericalError("cosine dissimilarity undefined for a zero-norm vector")
    cos = float(u @ v) / (nu * nv)
    return 1.0 - min(1.0, max(-1.0, cos))


def euclidean(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise NumericalError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(np.linalg.norm(u - v))
