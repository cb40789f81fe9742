"""Parametric link family for linear transformation models.

The family is indexed by ``alpha >= 0``.  ``alpha = 0`` gives the
complementary log-log link (proportional hazards), ``alpha = 1`` the
logit link (proportional odds); intermediate values interpolate between
the two.  All functions accept scalars or numpy arrays and are pure.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinkSpec",
    "PH",
    "PO",
    "link_eval",
    "link_inv",
    "link_inv_deriv",
    "cum_rate",
]

# Below this, the alpha > 0 branch loses precision to cancellation and the
# alpha = 0 closed forms are used instead.
_ALPHA_ZERO_TOL = 1e-8

# Beyond this exponent the rate is computed in log space to dodge overflow
# of exp(eta) inside log1p.
_LOG_SPACE_CUTOVER = 30.0


@dataclass(frozen=True)
class LinkSpec:
    """Family index.  alpha=0 is the PH link, alpha=1 the PO link."""

    alpha: float

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"link alpha must be finite and >= 0, got {self.alpha}")

    @property
    def is_ph(self) -> bool:
        return self.alpha < _ALPHA_ZERO_TOL


PH = LinkSpec(0.0)
PO = LinkSpec(1.0)


def _as_array(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("link argument must be finite")
    return arr


def _scalar_like(x, result):
    return float(result) if np.isscalar(x) or np.ndim(x) == 0 else result


def link_eval(spec: LinkSpec, u):
    """Evaluate the link g(u) for u in (0, 1).

    g(u) = log{((1-u)^(-alpha) - 1) / alpha} for alpha > 0 and
    log(-log(1-u)) in the alpha -> 0 limit.  Strictly increasing in u.
    """
    arr = _as_array(u)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("link_eval requires 0 < u < 1")
    log1mu = np.log1p(-arr)
    if spec.is_ph:
        out = np.log(-log1mu)
    else:
        # (1-u)^(-alpha) - 1 == expm1(-alpha * log(1-u)), exact for small alpha
        out = np.log(np.expm1(-spec.alpha * log1mu) / spec.alpha)
    return _scalar_like(u, out)


def link_inv(spec: LinkSpec, x):
    """Inverse link g^{-1}(x), a CDF-valued map onto (0, 1).

    Closed forms: 1 - exp(-e^x) for the PH link and
    1 - (1 + alpha e^x)^(-1/alpha) otherwise (power taken in log space).
    """
    return _scalar_like(x, raw_link_inv(spec.alpha, _as_array(x)))


def link_inv_deriv(spec: LinkSpec, x):
    """Derivative of the inverse link; strictly positive."""
    return _scalar_like(x, raw_link_inv_deriv(spec.alpha, _as_array(x)))


def _log1p_a_exp(a: float, eta):
    """log(1 + a * exp(eta)) without overflowing exp."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 0:
        if eta <= _LOG_SPACE_CUTOVER:
            return np.log1p(a * np.exp(eta))
        return eta + np.log(a + np.exp(-eta))
    big = eta > _LOG_SPACE_CUTOVER
    if not big.any():
        return np.log1p(a * np.exp(eta))
    out = np.log1p(a * np.exp(np.minimum(eta, _LOG_SPACE_CUTOVER)))
    out[big] = eta[big] + np.log(a + np.exp(-eta[big]))
    return out


# Unchecked array kernels for the fitter's hot loops; same formulas as the
# public functions minus input validation and scalar packaging.

def raw_link_inv(alpha: float, x: np.ndarray) -> np.ndarray:
    if alpha < _ALPHA_ZERO_TOL:
        return -np.expm1(-np.exp(x))
    return -np.expm1(-_log1p_a_exp(alpha, x) / alpha)


def raw_link_inv_deriv(alpha: float, x: np.ndarray) -> np.ndarray:
    if alpha < _ALPHA_ZERO_TOL:
        return np.exp(x - np.exp(x))
    return np.exp(x - (1.0 / alpha + 1.0) * _log1p_a_exp(alpha, x))


def raw_cum_rate(alpha: float, eta: np.ndarray):
    if alpha < _ALPHA_ZERO_TOL:
        h = np.exp(eta)
        return h, h
    lg = _log1p_a_exp(alpha, eta)
    return lg / alpha, np.exp(eta - lg)


def cum_rate(spec: LinkSpec, eta):
    """Cumulative rate H(eta) = -log(1 - g^{-1}(eta)) and its derivative.

    Returns the pair (H, dH/deta); both components are positive.  For the
    PH link H(eta) = exp(eta); for alpha > 0,
    H(eta) = log(1 + alpha*exp(eta)) / alpha, and
    dH/deta = e^eta / (1 + alpha e^eta).
    """
    h, dh = raw_cum_rate(spec.alpha, _as_array(eta))
    if dh is h and isinstance(h, np.ndarray):
        dh = h.copy()
    return _scalar_like(eta, h), _scalar_like(eta, dh)
