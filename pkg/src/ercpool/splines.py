"""Spline bases: B-splines, centered natural cubic splines, and monotone I-splines.

All evaluators are pure functions of immutable inputs. Knot placement is
quantile-based; boundary knots are repeated to full multiplicity internally.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class SplineError(ValueError):
    """Invalid knot configuration or out-of-domain evaluation."""


class BasisKind(enum.Enum):
    BSPLINE = "bspline"
    NATURAL_CUBIC_CENTERED = "natural_cubic_centered"
    ISPLINE = "ispline"


@dataclass(frozen=True)
class KnotSet:
    """Boundary pair plus strictly interior knots, all in domain units."""

    lower: float
    upper: float
    interior: tuple[float, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.lower) or not np.isfinite(self.upper):
            raise SplineError("knot boundaries must be finite")
        if not self.lower < self.upper:
            raise SplineError(
                f"degenerate knot boundaries: lower={self.lower!r} >= upper={self.upper!r}"
            )
        interior = np.asarray(self.interior, dtype=float)
        if interior.size:
            if np.any(np.diff(interior) <= 0):
                raise SplineError("interior knots must be strictly increasing")
            if interior[0] <= self.lower or interior[-1] >= self.upper:
                raise SplineError("interior knots must lie strictly inside the boundary")

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    def all_knots(self) -> np.ndarray:
        return np.concatenate([[self.lower], self.interior, [self.upper]])


@dataclass(frozen=True)
class BasisMatrix:
    """Evaluated basis: n_points x n_basis values plus provenance."""

    values: np.ndarray
    knots: KnotSet
    kind: BasisKind
    degree: int
    column_means: np.ndarray | None = field(default=None, compare=False)

    @property
    def n_basis(self) -> int:
        return self.values.shape[1]


def quantile_knots(values, n_interior: int) -> KnotSet:
    """Knots from data: boundary at (min, max), interior at k/(n+1) quantiles.

    Quantiles use linear interpolation of order statistics. Interior knots are
    deduplicated and any that collide with the boundary are dropped.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise SplineError("cannot place knots on an empty vector")
    lo, hi = float(np.min(values)), float(np.max(values))
    if n_interior < 0:
        raise SplineError("n_interior must be >= 0")
    if lo == hi:
        if n_interior > 0:
            raise SplineError("all values identical: degenerate zero-width knot domain")
        raise SplineError("all values identical: degenerate zero-width knot domain")
    if n_interior == 0:
        return KnotSet(lo, hi)
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    qs = np.quantile(values, probs, method="linear")
    qs = np.unique(qs)
    qs = qs[(qs > lo) & (qs < hi)]
    return KnotSet(lo, hi, tuple(float(q) for q in qs))


def _augmented_knots(knots: KnotSet, degree: int) -> np.ndarray:
    """Boundary knots repeated degree+1 times around the interior knots."""
    return np.concatenate(
        [
            np.full(degree + 1, knots.lower),
            np.asarray(knots.interior, dtype=float),
            np.full(degree + 1, knots.upper),
        ]
    )


def _bspline_design(x: np.ndarray, t: np.ndarray, degree: int) -> np.ndarray:
    """Cox-de Boor recursion on knot vector t; returns len(x) x (len(t)-degree-1).

    The support intervals are half-open except at the global right boundary,
    where evaluation is right-closed so the last basis reaches 1.
    """
    x = np.asarray(x, dtype=float)
    n_fun = len(t) - degree - 1
    n_int = len(t) - 1
    b = np.zeros((x.size, n_int))
    for i in range(n_int):
        if t[i + 1] > t[i]:
            b[:, i] = np.where((x >= t[i]) & (x < t[i + 1]), 1.0, 0.0)
    # right-closure: x exactly at the last knot lands in the final nonempty interval
    at_end = x == t[-1]
    if np.any(at_end):
        last = max(i for i in range(n_int) if t[i + 1] > t[i])
        b[at_end, last] = 1.0
    for d in range(1, degree + 1):
        nb = np.zeros((x.size, len(t) - 1 - d))
        for i in range(len(t) - 1 - d):
            denom_l = t[i + d] - t[i]
            denom_r = t[i + d + 1] - t[i + 1]
            term = 0.0
            if denom_l > 0:
                term = (x - t[i]) / denom_l * b[:, i]
            if denom_r > 0:
                term = term + (t[i + d + 1] - x) / denom_r * b[:, i + 1]
            nb[:, i] = term
        b = nb
    return b[:, :n_fun]


def _bspline_derivative_design(
    x: np.ndarray, t: np.ndarray, degree: int, deriv: int
) -> np.ndarray:
    """deriv-th derivative of each degree-`degree` B-spline on knot vector t."""
    if deriv == 0:
        return _bspline_design(x, t, degree)
    if deriv > degree:
        return np.zeros((np.asarray(x).size, len(t) - degree - 1))
    lower = _bspline_derivative_design(x, t, degree - 1, deriv - 1)
    n_fun = len(t) - degree - 1
    out = np.zeros((np.asarray(x).size, n_fun))
    for i in range(n_fun):
        denom_l = t[i + degree] - t[i]
        denom_r = t[i + degree + 1] - t[i + 1]
        term = 0.0
        if denom_l > 0:
            term = degree / denom_l * lower[:, i]
        if denom_r > 0:
            term = term - degree / denom_r * lower[:, i + 1]
        out[:, i] = term
    return out


def bspline_basis(x, degree: int, knots: KnotSet) -> BasisMatrix:
    """B-spline basis with full boundary multiplicity; no extrapolation."""
    if degree < 0:
        raise SplineError("degree must be >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < knots.lower) or np.any(x > knots.upper):
        raise SplineError(
            f"x outside the B-spline domain [{knots.lower}, {knots.upper}]"
        )
    t = _augmented_knots(knots, degree)
    values = _bspline_design(x, t, degree)
    return BasisMatrix(values=values, knots=knots, kind=BasisKind.BSPLINE, degree=degree)


def _natural_null_space(t: np.ndarray, knots: KnotSet) -> np.ndarray:
    """Coefficient directions with zero second derivative at both boundaries."""
    bounds = np.array([knots.lower, knots.upper])
    c = _bspline_derivative_design(bounds, t, 3, 2)  # 2 x m constraint matrix
    q, _ = np.linalg.qr(c.T, mode="complete")
    return q[:, 2:]


def natural_cubic_centered(x, df: int, knots: KnotSet) -> BasisMatrix:
    """Natural cubic spline basis, intercept removed, columns centered over x.

    df columns require df-1 interior knots. Beyond the boundary knots the
    basis continues linearly (zero second derivative), so it is safe to
    evaluate outside [lower, upper].
    """
    if df < 1:
        raise SplineError("df must be >= 1")
    if knots.n_interior != df - 1:
        raise SplineError(
            f"natural cubic basis with df={df} needs {df - 1} interior knots, "
            f"got {knots.n_interior}"
        )
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = _augmented_knots(knots, 3)
    q2 = _natural_null_space(t, knots)

    inside = np.clip(x, knots.lower, knots.upper)
    n = _bspline_design(inside, t, 3) @ q2
    below = x < knots.lower
    above = x > knots.upper
    for mask, bound in ((below, knots.lower), (above, knots.upper)):
        if np.any(mask):
            b0 = _bspline_design(np.array([bound]), t, 3) @ q2
            b1 = _bspline_derivative_design(np.array([bound]), t, 3, 1) @ q2
            n[mask] = b0 + np.outer(x[mask] - bound, b1[0])
    n = n[:, 1:]  # drop one column: the retained span plus a constant is the full space
    means = n.mean(axis=0)
    return BasisMatrix(
        values=n - means,
        knots=knots,
        kind=BasisKind.NATURAL_CUBIC_CENTERED,
        degree=3,
        column_means=means,
    )


def ispline_basis(x, order: int, knots: KnotSet) -> BasisMatrix:
    """Monotone I-spline basis: integrated normalized M-splines.

    Each of the n_interior + order basis functions is non-decreasing from 0 to
    1. Evaluation clamps outside the boundary knots: rows of zeros below,
    rows of ones above.
    """
    if order < 1:
        raise SplineError("order must be >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_basis = knots.n_interior + order
    values = np.zeros((x.size, n_basis))
    above = x >= knots.upper
    values[above] = 1.0
    inner = (x > knots.lower) & ~above
    if np.any(inner):
        # I-splines of order k are reverse cumulative sums of degree-k B-splines
        # on the order-(k+1) augmented knot vector, dropping the first column.
        t = _augmented_knots(knots, order)
        b = _bspline_design(x[inner], t, order)
        cum = np.cumsum(b[:, ::-1], axis=1)[:, ::-1]
        values[inner] = cum[:, 1:]
    return BasisMatrix(
        values=np.clip(values, 0.0, 1.0),
        knots=knots,
        kind=BasisKind.ISPLINE,
        degree=order,
    )
