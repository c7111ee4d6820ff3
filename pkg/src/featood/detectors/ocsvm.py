"""One-class SVM detector with an SMO solver.

Solves the nu-one-class dual

    min 1/2 a^T K a   s.t.  0 <= a_i <= 1/(nu n),  sum a_i = 1

with an RBF kernel, by repeatedly moving weight between the maximal
violating pair (i with a_i below the box and smallest gradient, j with
a_j above zero and largest gradient). A point's OOD score is
``rho - sum_i a_i k(x_i, x)``: negative inside the boundary, positive
outside.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConvergenceError
from .common import FeatureStack, channel_means, layer

KKT_TOL = 1e-4
STD_FLOOR = 1e-8


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class OcsvmLayer:
    alpha: np.ndarray      # weights of the support vectors
    support: np.ndarray    # standardized support vectors (n_sv x d_active)
    rho: float
    gamma: float
    nu: float
    mean: np.ndarray       # standardization over all input features
    std: np.ndarray
    active: np.ndarray     # bool mask of features with non-degenerate spread
    iterations: int = 0

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return ((x - self.mean) / self.std)[:, self.active]

    def score(self, x: np.ndarray) -> np.ndarray:
        k = rbf_kernel(self.standardize(x), self.support, self.gamma)
        return self.rho - k @ self.alpha


def dual_objective(alpha: np.ndarray, kernel: np.ndarray) -> float:
    return 0.5 * float(alpha @ kernel @ alpha)


def smo_solve(kernel: np.ndarray, nu: float, tol: float = KKT_TOL,
              max_iter: int | None = None) -> tuple[np.ndarray, float, int]:
    """Return ``(alpha, rho, iterations)`` for a precomputed kernel matrix."""
    n = kernel.shape[0]
    c = 1.0 / (nu * n)
    max_iter = 100_000 * n if max_iter is None else max_iter
    alpha = np.zeros(n)
    full = int(np.floor(nu * n))
    alpha[:full] = c
    if full < n:
        alpha[full] = 1.0 - full * c
    alpha = np.clip(alpha, 0.0, c)
    grad = kernel @ alpha
    diag = np.diag(kernel)
    it = 0
    gap = np.inf
    while it < max_iter:
        up = alpha < c - 1e-15
        low = alpha > 1e-15
        gi = np.where(up, grad, np.inf)
        gj = np.where(low, grad, -np.inf)
        i = int(np.argmin(gi))
        j = int(np.argmax(gj))
        gap = gj[j] - gi[i]
        if gap < tol:
            break
        quad = diag[i] + diag[j] - 2.0 * kernel[i, j]
        step = gap / max(quad, 1e-12)
        step = min(step, c - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        grad += step * (kernel[:, i] - kernel[:, j])
        it += 1
    else:
        raise ConvergenceError(f"SMO did not reach KKT tolerance {tol} in {max_iter} iterations "
                               f"(duality gap {gap:.3e})", iterations=it, residual=float(gap))
    alpha[alpha < 1e-15] = 0.0
    free = (alpha > 0) & (alpha < c - 1e-12)
    if np.any(free):
        rho = float(np.mean(grad[free]))
    else:
        at_bound = grad[alpha > 0]
        at_zero = grad[alpha == 0]
        hi = at_zero.min() if at_zero.size else at_bound.max()
        lo = at_bound.max() if at_bound.size else at_zero.min()
        rho = 0.5 * float(hi + lo)
    return alpha, rho, it


def ocsvm_train(vectors: np.ndarray, nu: float = 0.1, gamma: float | None = None,
                tol: float = KKT_TOL) -> OcsvmLayer:
    """Standardize ``vectors`` (n x d) and fit a nu-one-class SVM.

    Features whose calibration std falls below the floor carry no
    information and are left out; ``gamma`` defaults to 1 / (number of
    remaining features).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"OCSVM needs at least 2 training vectors, got shape {x.shape}")
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    mean = x.mean(axis=0)
    raw_std = x.std(axis=0)
    active = raw_std > STD_FLOOR
    std = np.maximum(raw_std, STD_FLOOR)
    z = ((x - mean) / std)[:, active]
    d = max(int(active.sum()), 1)
    gamma = 1.0 / d if gamma is None else float(gamma)
    kernel = rbf_kernel(z, z, gamma)
    alpha, rho, it = smo_solve(kernel, nu, tol)
    sv = alpha > 0
    return OcsvmLayer(alpha[sv], z[sv], rho, gamma, nu, mean, std, active, it)


@dataclass
class OcsvmModel:
    layers: list[str]
    machines: dict[str, OcsvmLayer]


def fit_ocsvm(stacks: Sequence[FeatureStack], layers: Sequence[str], nu: float = 0.1,
              gamma: float | None = None) -> OcsvmModel:
    machines = {}
    for l in layers:
        try:
            machines[l] = ocsvm_train(np.stack([channel_means(layer(s, l)) for s in stacks]), nu, gamma)
        except ConvergenceError as exc:
            raise ConvergenceError(f"layer {l!r}: {exc}", exc.iterations, exc.residual) from exc
    return OcsvmModel(list(layers), machines)


def ocsvm_layer_scores(model: OcsvmModel, stack: FeatureStack) -> list[float]:
    return [float(model.machines[l].score(channel_means(layer(stack, l)))[0]) for l in model.layers]


def score_ocsvm(model: OcsvmModel, stack: FeatureStack) -> float:
    return max(ocsvm_layer_scores(model, stack))
