"""Cubic B-spline basis with quantile knots and a second-difference penalty.

The basis uses an open (clamped) knot vector, so the spline interpolates
its first and last coefficients at the boundary knots.  A coefficient
vector that is nondecreasing yields a nondecreasing spline, which is how
monotonicity of the fitted transformation is enforced downstream.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SplineBasis",
    "PenaltyMatrix",
    "make_knots",
    "basis_eval",
    "basis_matrix",
    "spline_eval",
    "penalty_matrix",
]

DEGREE = 3


@dataclass(frozen=True)
class SplineBasis:
    """Immutable cubic B-spline basis description."""

    interior_knots: tuple
    boundary_knots: tuple
    degree: int = DEGREE
    # full open knot vector, built once in __post_init__
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = self.boundary_knots
        interior = tuple(float(t) for t in self.interior_knots)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"boundary knots must satisfy lo < hi, got ({lo}, {hi})")
        if any(not np.isfinite(t) for t in interior):
            raise ValueError("interior knots must be finite")
        if interior:
            if interior[0] <= lo or interior[-1] >= hi:
                raise ValueError("interior knots must lie strictly inside the boundary")
            if any(b < a for a, b in zip(interior, interior[1:])):
                raise ValueError("interior knots must be sorted")
        object.__setattr__(self, "interior_knots", interior)
        object.__setattr__(self, "boundary_knots", (float(lo), float(hi)))
        full = np.concatenate([
            np.full(self.degree + 1, lo),
            np.asarray(interior, dtype=float),
            np.full(self.degree + 1, hi),
        ])
        full.setflags(write=False)
        object.__setattr__(self, "knots", full)

    @property
    def q_n(self) -> int:
        """Basis dimension: number of interior knots + degree + 1."""
        return len(self.interior_knots) + self.degree + 1


@dataclass(frozen=True)
class PenaltyMatrix:
    """Second-difference operator D and its Gram matrix D'D."""

    d_matrix: np.ndarray
    gram: np.ndarray


def default_interior_count(n: int) -> int:
    """Ceiling of the cube root of the sample size."""
    return int(math.ceil(n ** (1.0 / 3.0) - 1e-12))


def make_knots(times, n: int, n_interior: int | None = None) -> SplineBasis:
    """Build a cubic basis with quantile-placed interior knots.

    Interior knot count defaults to ceil(n^(1/3)); knots sit at the
    equally-spaced empirical quantiles k/(m+1) of the pooled finite
    observation endpoints (type-7 linear interpolation).  Boundary knots
    are the min and max of the pooled endpoints.

    ``n_interior`` overrides the count (used by sensitivity studies).
    """
    times = np.asarray(times, dtype=float)
    times = times[np.isfinite(times)]
    if times.size == 0:
        raise ValueError("no finite observation endpoints to place knots on")
    if np.any(times <= 0):
        raise ValueError("observation endpoints must be positive")
    if n < 2:
        raise ValueError("sample size must be at least 2")
    m = default_interior_count(n) if n_interior is None else int(n_interior)
    if m < 0:
        raise ValueError("interior knot count must be >= 0")
    if np.unique(times).size < m + 2:
        raise ValueError(
            f"need at least {m + 2} distinct endpoint values for {m} interior knots, "
            f"got {np.unique(times).size}"
        )
    lo = float(times.min())
    hi = float(times.max())
    if m == 0:
        return SplineBasis(interior_knots=(), boundary_knots=(lo, hi))
    levels = np.arange(1, m + 1) / (m + 1)
    interior = np.quantile(times, levels)  # numpy default = type-7
    interior = _separate_ties(interior, lo, hi)
    return SplineBasis(interior_knots=tuple(interior), boundary_knots=(lo, hi))


def _separate_ties(interior: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Nudge coincident quantile knots apart (midpoint toward the next
    distinct position); ties-heavy data would otherwise collapse spans."""
    interior = interior.copy()
    # clip quantiles that landed on a boundary into the open interval first
    span = hi - lo
    interior = np.clip(interior, lo + 1e-9 * span, hi - 1e-9 * span)
    for k in range(1, len(interior)):
        if interior[k] <= interior[k - 1]:
            nxt = hi
            for j in range(k + 1, len(interior)):
                if interior[j] > interior[k - 1]:
                    nxt = interior[j]
                    break
            interior[k] = 0.5 * (interior[k - 1] + nxt)
    return interior


def _find_span(knots: np.ndarray, degree: int, t: float) -> int:
    """Index k with knots[k] <= t < knots[k+1], last span closed on the right."""
    n_basis = len(knots) - degree - 1
    k = int(np.searchsorted(knots, t, side="right")) - 1
    return min(max(k, degree), n_basis - 1)


def basis_eval(basis: SplineBasis, t: float) -> np.ndarray:
    """All q_n basis functions at a single point.

    Out-of-range t is clamped to the boundary, giving constant
    extrapolation of any spline built on this basis.  Entries are
    nonnegative and sum to one.
    """
    out = np.zeros(basis.q_n)
    lo, hi = basis.boundary_knots
    t = min(max(float(t), lo), hi)
    span = _find_span(basis.knots, basis.degree, t)
    out[span - basis.degree : span + 1] = _nonzero_basis(basis.knots, basis.degree, span, t)
    return out


def basis_matrix(basis: SplineBasis, ts) -> np.ndarray:
    """Rows of basis values for each point in ts (shape len(ts) x q_n)."""
    ts = np.asarray(ts, dtype=float).ravel()
    out = np.zeros((ts.size, basis.q_n))
    lo, hi = basis.boundary_knots
    clamped = np.clip(ts, lo, hi)
    degree = basis.degree
    knots = basis.knots
    for i, t in enumerate(clamped):
        span = _find_span(knots, degree, t)
        out[i, span - degree : span + 1] = _nonzero_basis(knots, degree, span, t)
    return out


def _nonzero_basis(knots: np.ndarray, degree: int, span: int, t: float) -> np.ndarray:
    """Cox-de Boor triangle: the degree+1 basis values that are nonzero on
    the span, with the 0/0 := 0 convention handled by construction."""
    vals = np.zeros(degree + 1)
    left = np.zeros(degree)
    right = np.zeros(degree)
    vals[0] = 1.0
    for j in range(1, degree + 1):
        left[j - 1] = t - knots[span + 1 - j]
        right[j - 1] = knots[span + j] - t
        saved = 0.0
        for r in range(j):
            denom = right[r] + left[j - 1 - r]
            term = vals[r] / denom if denom != 0.0 else 0.0
            vals[r] = saved + right[r] * term
            saved = left[j - 1 - r] * term
        vals[j] = saved
    return vals


def spline_eval(basis: SplineBasis, gamma, t):
    """Evaluate sum_j gamma_j B_j(t); t may be a scalar or an array."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (basis.q_n,):
        raise ValueError(f"gamma must have length {basis.q_n}, got {gamma.shape}")
    if np.ndim(t) == 0:
        return float(basis_eval(basis, t) @ gamma)
    return basis_matrix(basis, t) @ gamma


def greville_sites(basis: SplineBasis) -> np.ndarray:
    """Knot averages; a coefficient vector affine in these sites
    reproduces the same affine function of t."""
    k = basis.knots
    d = basis.degree
    return np.array([k[j + 1 : j + d + 1].mean() for j in range(basis.q_n)])


def penalty_matrix(q_n: int) -> PenaltyMatrix:
    """Order-2 difference matrix (q_n-2 rows) and its Gram matrix.

    The Gram matrix is positive semi-definite with rank q_n - 2; the
    null space is exactly the coefficient vectors affine in the index.
    """
    if q_n < 3:
        raise ValueError("penalty needs q_n >= 3")
    d = np.zeros((q_n - 2, q_n))
    for r in range(q_n - 2):
        d[r, r : r + 3] = (1.0, -2.0, 1.0)
    return PenaltyMatrix(d_matrix=d, gram=d.T @ d)
