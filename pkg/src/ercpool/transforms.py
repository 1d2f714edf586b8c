"""Unconstrained-space parameter plumbing: layouts, positive transforms, and
the correlation-factor transform used by the hierarchical curve prior.

The correlation matrix is parameterized through canonical partial
correlations: unconstrained reals -> tanh -> a lower-triangular factor with
unit-norm rows whose product L L^T is a valid correlation matrix. All
log-Jacobian terms are closed forms in the tanh'd values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TransformError(ValueError):
    """Invalid constrained value or transform inconsistency."""


@dataclass(frozen=True)
class ParamSlice:
    name: str
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


class ParamLayout:
    """Ordered mapping from parameter names to slices of a flat vector."""

    def __init__(self, sizes: list[tuple[str, int]]):
        self.slices: dict[str, ParamSlice] = {}
        off = 0
        for name, size in sizes:
            if size < 0:
                raise TransformError(f"negative size for parameter {name!r}")
            self.slices[name] = ParamSlice(name, off, off + size)
            off += size
        self.dim = off

    def __contains__(self, name: str) -> bool:
        return name in self.slices and self.slices[name].size > 0

    def get(self, vec: np.ndarray, name: str) -> np.ndarray:
        s = self.slices[name]
        return vec[..., s.start : s.stop]

    def set_(self, vec: np.ndarray, name: str, values) -> None:
        s = self.slices[name]
        vec[..., s.start : s.stop] = values

    def flat_names(self) -> list[str]:
        out = []
        for s in self.slices.values():
            if s.size == 1:
                out.append(s.name)
            else:
                out.extend(f"{s.name}[{i}]" for i in range(s.size))
        return out

    def to_dict(self) -> dict:
        return {s.name: [s.start, s.stop] for s in self.slices.values()}


# ---------------------------------------------------------------------------
# positive scalars
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HalfNormal:
    """Half-normal (truncated at zero) hyperprior: m is the center, v the variance."""

    m: float = 0.0
    v: float = 1.0

    def __post_init__(self):
        if self.v <= 0:
            raise TransformError("half-normal variance must be > 0")


def positive_constrain(u):
    return np.exp(u)


def positive_unconstrain(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise TransformError("positive-constrained value must be > 0")
    return np.log(x)


def halfnormal_logpdf(x, m: float, v: float):
    """Unnormalized truncated-normal log density on x > 0 (variance v)."""
    return -0.5 * (x - m) ** 2 / v


# ---------------------------------------------------------------------------
# correlation factor via canonical partial correlations
# ---------------------------------------------------------------------------

def n_corr_free(k: int) -> int:
    return k * (k - 1) // 2


def _z_matrix(y: np.ndarray, k: int) -> np.ndarray:
    """tanh of the unconstrained vector, arranged strictly-lower row-major."""
    z = np.zeros((k, k))
    idx = 0
    for i in range(1, k):
        z[i, :i] = np.tanh(y[idx : idx + i])
        idx += i
    return z


def corr_factor_from_unconstrained(y, k: int) -> np.ndarray:
    """Lower-triangular factor L with unit-norm rows; Sigma = L L^T."""
    y = np.asarray(y, dtype=float)
    if y.size != n_corr_free(k):
        raise TransformError(f"expected {n_corr_free(k)} unconstrained entries for k={k}")
    z = _z_matrix(y, k)
    return _factor_from_z(z, k)


def _factor_from_z(z: np.ndarray, k: int) -> np.ndarray:
    ell = np.zeros((k, k))
    ell[0, 0] = 1.0
    for i in range(1, k):
        rem = 1.0
        for j in range(i):
            ell[i, j] = z[i, j] * np.sqrt(rem)
            rem *= 1.0 - z[i, j] ** 2
        ell[i, i] = np.sqrt(rem)
    return ell


def corr_factor_to_unconstrained(ell: np.ndarray) -> np.ndarray:
    """Inverse of corr_factor_from_unconstrained (row-wise peel-off)."""
    ell = np.asarray(ell, dtype=float)
    k = ell.shape[0]
    validate_corr_factor(ell)
    out = np.empty(n_corr_free(k))
    idx = 0
    for i in range(1, k):
        rem = 1.0
        for j in range(i):
            zij = ell[i, j] / np.sqrt(rem)
            zij = min(max(zij, -1 + 1e-15), 1 - 1e-15)
            out[idx] = np.arctanh(zij)
            rem *= 1.0 - zij**2
            idx += 1
    return out


def validate_corr_factor(ell: np.ndarray, tol: float = 1e-8) -> None:
    ell = np.asarray(ell, dtype=float)
    if ell.ndim != 2 or ell.shape[0] != ell.shape[1]:
        raise TransformError("correlation factor must be square")
    if np.any(np.triu(ell, 1) != 0):
        raise TransformError("correlation factor must be lower triangular")
    if np.any(np.diag(ell) <= 0):
        raise TransformError("correlation factor diagonal must be positive")
    norms = np.sqrt((ell**2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > tol):
        raise TransformError("correlation factor rows must have unit norm")


def lkj_log_density(ell: np.ndarray, eta: float) -> float:
    """Unnormalized LKJ log density (eta - 1) * log det(Sigma) at Sigma = L L^T."""
    if eta <= 0:
        raise TransformError("LKJ shape must be > 0")
    validate_corr_factor(ell)
    return float((eta - 1.0) * 2.0 * np.sum(np.log(np.diag(ell))))


def corr_prior_logdensity_and_grad(y, k: int, eta: float):
    """LKJ prior plus all transform log-Jacobians, as a function of y.

    Collapses to sum_m [eta + (k - 2 - col)/2] * log(1 - z^2) over the free
    entries, whose gradient in y is -2 z times the coefficient.
    """
    y = np.asarray(y, dtype=float)
    if y.size != n_corr_free(k):
        raise TransformError(f"expected {n_corr_free(k)} unconstrained entries for k={k}")
    z = np.tanh(y)
    coef = np.empty_like(y)
    idx = 0
    for i in range(1, k):
        coef[idx : idx + i] = eta + (k - 2 - np.arange(i)) / 2.0
        idx += i
    val = float(np.sum(coef * np.log1p(-z**2)))
    grad = -2.0 * coef * z
    return val, grad


def corr_factor_pullback(y, k: int):
    """Factor L plus a pullback mapping d(logp)/dL to d(logp)/dy.

    Needed when the likelihood itself depends on L (hierarchical curve
    coefficients); the prior/Jacobian terms are handled separately by
    corr_prior_logdensity_and_grad.
    """
    y = np.asarray(y, dtype=float)
    z = _z_matrix(y, k)
    ell = _factor_from_z(z, k)
    # r[i, j]: remaining row norm before entry j; L[i, j] = z[i, j] * r[i, j]
    r = np.zeros((k, k))
    for i in range(k):
        rem = 1.0
        for j in range(i + 1):
            r[i, j] = np.sqrt(rem)
            if j < i:
                rem *= 1.0 - z[i, j] ** 2

    def pullback(gl: np.ndarray) -> np.ndarray:
        gy = np.zeros_like(y)
        idx = 0
        for i in range(1, k):
            gz_row = np.zeros(i)
            for m in range(i):
                acc = gl[i, m] * r[i, m]
                zm = z[i, m]
                denom = 1.0 - zm**2
                tail = 0.0
                for j in range(m + 1, i + 1):
                    tail += gl[i, j] * ell[i, j]
                acc -= zm / denom * tail
                gz_row[m] = acc
            gy[idx : idx + i] = gz_row * (1.0 - z[i, :i] ** 2)
            idx += i
        return gy

    return ell, pullback
