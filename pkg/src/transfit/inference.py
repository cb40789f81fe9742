"""Efficient-score variance estimation, Wald intervals, bootstrap bands.

The information matrix for the regression coefficients is the empirical
outer product of the residuals from regressing the coefficient scores on
the spline scores (least-squares projection onto the nuisance space).
"""

import concurrent.futures as cf
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import emfit, linkfam, spline, streams
from .dataio import Censoring, Dataset, IntervalObservation
from .errors import BootstrapError, SingularInformationError, TransfitError

__all__ = [
    "ScoreRows",
    "score_beta",
    "score_phi_basis",
    "compute_score_rows",
    "estimate_info",
    "wald_ci",
    "BandResult",
    "bootstrap_band",
]

EIG_CUTOFF = 1e-9
MAX_FAILED_FRACTION = 0.2


@dataclass(frozen=True)
class ScoreRows:
    """Per-subject score rows: coefficients (n x d) and spline basis
    directions (n x q_n)."""

    beta_scores: np.ndarray
    phi_scores: np.ndarray


def _subject_weights(theta: emfit.ParamState, obs: IntervalObservation, basis, link):
    """Scalar endpoint weights for one subject (clamped like the fitter)."""
    eps = emfit.PROB_EPS
    zb = float(obs.covariates @ theta.beta)

    def cdf_parts(t):
        eta = spline.spline_eval(basis, theta.gamma, t) + zb
        pi = min(max(linkfam.link_inv(link, eta), eps), 1.0 - eps)
        return pi, linkfam.link_inv_deriv(link, eta)

    if obs.status == Censoring.LEFT:
        pi_r, dv_r = cdf_parts(obs.right)
        return dv_r / pi_r, 0.0
    if obs.status == Censoring.INTERVAL:
        pi_l, dv_l = cdf_parts(obs.left)
        pi_r, dv_r = cdf_parts(obs.right)
        gap = max(pi_r - pi_l, eps)
        return dv_r / gap, -dv_l / gap
    pi_l, dv_l = cdf_parts(obs.left)
    return 0.0, -dv_l / (1.0 - pi_l)


def score_beta(theta: emfit.ParamState, obs: IntervalObservation, basis, link) -> np.ndarray:
    """Score for the regression coefficients from a single subject."""
    w_r, w_l = _subject_weights(theta, obs, basis, link)
    return (w_r + w_l) * obs.covariates


def score_phi_basis(theta: emfit.ParamState, obs: IntervalObservation, basis, link) -> np.ndarray:
    """Score operator applied to each B-spline basis function for one
    subject; equals the gradient of the subject log-likelihood in gamma."""
    w_r, w_l = _subject_weights(theta, obs, basis, link)
    out = np.zeros(basis.q_n)
    if w_r != 0.0:
        out += w_r * spline.basis_eval(basis, obs.right)
    if w_l != 0.0:
        out += w_l * spline.basis_eval(basis, obs.left)
    return out


def compute_score_rows(theta: emfit.ParamState, ds: Dataset, basis, link, workspace=None) -> ScoreRows:
    """All subjects' score rows in one pass (vectorized)."""
    ws = emfit._workspace(ds, basis, link, workspace)
    w_r, w_l = emfit.likelihood_endpoint_weights(theta, ds, basis, link, workspace=ws)
    beta_scores = (w_r + w_l)[:, None] * ws.z
    phi_scores = w_r[:, None] * ws.b_right + w_l[:, None] * ws.b_left
    return ScoreRows(beta_scores=beta_scores, phi_scores=phi_scores)


def _pinv_solve(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve m @ x = rhs through an eigendecomposition pseudo-inverse."""
    eigvals, eigvecs = np.linalg.eigh(m)
    cutoff = EIG_CUTOFF * float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    inv = np.where(eigvals > cutoff, 1.0, 0.0) / np.where(eigvals > cutoff, eigvals, 1.0)
    return eigvecs @ (inv[:, None] * (eigvecs.T @ rhs))


def estimate_info(fit, ds: Dataset):
    """Least-squares efficient-score information matrix and standard errors.

    For each coefficient, the spline-score regression residual is formed;
    the empirical outer product of the residual rows estimates the
    information, and its inverse scaled by n gives squared standard errors.
    """
    rows = compute_score_rows(fit.theta, ds, fit.basis, fit.link)
    ps = rows.phi_scores
    bs = rows.beta_scores
    n = ds.n
    coef = _pinv_solve(ps.T @ ps, ps.T @ bs)
    resid = bs - ps @ coef
    info = (resid.T @ resid) / n
    eigvals = np.linalg.eigvalsh(info)
    if eigvals[0] <= 1e-12 * float(np.trace(info)):
        raise SingularInformationError(
            f"efficient information is singular (min eigenvalue {eigvals[0]:.3e})"
        )
    variances = np.diag(np.linalg.inv(info)) / n
    return info, np.sqrt(variances)


def wald_ci(fit, level: float = 0.95):
    """Per-coefficient Wald intervals at the given confidence level."""
    if fit.std_errors is None:
        raise TransfitError("fit has no standard errors")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    z = float(ndtri(0.5 * (1.0 + level)))
    return [
        (float(b - z * s), float(b + z * s))
        for b, s in zip(fit.theta.beta, fit.std_errors)
    ]


@dataclass
class BandResult:
    grid: np.ndarray
    phi_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_used: int
    n_failed: int

    def to_csv(self) -> str:
        lines = ["t,phi_hat,lower,upper"]
        for t, p, lo, hi in zip(self.grid, self.phi_hat, self.lower, self.upper):
            lines.append(f"{t!r},{p!r},{lo!r},{hi!r}")
        return "\n".join(lines) + "\n"


def resample_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    """Nonparametric bootstrap draw: n subject indices with replacement."""
    return rng.integers(0, n, size=n)


def _band_curve(ds, link, grid, options, seed, b):
    from . import nested  # local import; nested depends on this module

    rng = streams.stream_rng(seed, streams.BOOTSTRAP, b)
    idx = resample_indices(rng, ds.n)
    try:
        res = nested.fit(ds.subset(idx), link, options)
    except TransfitError:
        return b, None
    if not res.converged:
        return b, None
    return b, spline.spline_eval(res.basis, res.theta.gamma, grid)


_BAND_CTX = {}


def _band_worker_init(ds, link, grid, options, seed):
    _BAND_CTX.update(ds=ds, link=link, grid=grid, options=options, seed=seed)


def _band_worker(b):
    c = _BAND_CTX
    return _band_curve(c["ds"], c["link"], c["grid"], c["options"], c["seed"], b)


def bootstrap_band(ds: Dataset, link, grid, n_boot: int, seed: int,
                   threads: int = 1, options=None) -> BandResult:
    """Pointwise 2.5%/97.5% percentile band for the transformation function.

    Each replicate refits the full nested procedure on a resample drawn
    from its own seeded stream; replicates that fail to converge are
    dropped and counted, with more than 20% failures treated as an error.
    """
    from . import nested

    if n_boot < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    grid = np.asarray(grid, dtype=float)
    opts = nested.FitOptions() if options is None else options
    opts_boot = nested.FitOptions(**{**opts.__dict__, "compute_se": False})

    full = nested.fit(ds, link, opts_boot)
    phi_hat = spline.spline_eval(full.basis, full.theta.gamma, grid)

    if threads > 1:
        with cf.ProcessPoolExecutor(
            max_workers=threads,
            initializer=_band_worker_init,
            initargs=(ds, link, grid, opts_boot, seed),
        ) as pool:
            results = list(pool.map(_band_worker, range(n_boot), chunksize=8))
    else:
        results = [_band_curve(ds, link, grid, opts_boot, seed, b) for b in range(n_boot)]

    curves = [c for _, c in sorted(results, key=lambda t: t[0]) if c is not None]
    n_failed = n_boot - len(curves)
    if n_failed > MAX_FAILED_FRACTION * n_boot:
        raise BootstrapError(
            f"{n_failed} of {n_boot} bootstrap refits failed; band is unreliable"
        )
    stack = np.vstack(curves)
    lower = np.percentile(stack, 2.5, axis=0)
    upper = np.percentile(stack, 97.5, axis=0)
    return BandResult(grid=grid, phi_hat=phi_hat, lower=lower, upper=upper,
                      n_used=len(curves), n_failed=n_failed)
