import numpy as np
import pytest

from conftest import random_feasible_state, synth_dataset
from transfit import emfit, inference, linkfam, nested, spline
from transfit.dataio import Censoring, Dataset, IntervalObservation
from transfit.inference import (
    bootstrap_band,
    compute_score_rows,
    estimate_info,
    score_beta,
    score_phi_basis,
    wald_ci,
)


def subject_loglik(theta, obs, basis, link):
    """Independent transliteration of one subject's log-likelihood."""
    eps = 1e-12
    zb = float(obs.covariates @ theta.beta)

    def cdf(t):
        eta = spline.spline_eval(basis, theta.gamma, t) + zb
        return min(max(linkfam.link_inv(link, eta), eps), 1 - eps)

    if obs.status == Censoring.LEFT:
        return np.log(cdf(obs.right))
    if obs.status == Censoring.INTERVAL:
        return np.log(max(cdf(obs.right) - cdf(obs.left), eps))
    return np.log(1.0 - cdf(obs.left))


@pytest.fixture
def scored_pieces():
    ds = synth_dataset(n=25, seed=14, alpha=0.5)
    link = linkfam.LinkSpec(0.5)
    basis = spline.make_knots(ds.finite_endpoints(), ds.n)
    ws = emfit.FitWorkspace(ds, basis, link)
    rng = np.random.default_rng(6)
    theta = random_feasible_state(ws, rng)
    return ds, basis, link, ws, theta


class TestScores:
    def test_score_beta_matches_finite_differences(self, scored_pieces):
        ds, basis, link, ws, theta = scored_pieces
        for obs in ds.observations[:12]:
            got = score_beta(theta, obs, basis, link)
            for l in range(ds.d):
                h = 1e-6
                bp = theta.beta.copy()
                bp[l] += h
                bm = theta.beta.copy()
                bm[l] -= h
                fd = (
                    subject_loglik(emfit.ParamState(bp, theta.gamma), obs, basis, link)
                    - subject_loglik(emfit.ParamState(bm, theta.gamma), obs, basis, link)
                ) / (2 * h)
                assert got[l] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_score_phi_matches_finite_differences_in_gamma(self, scored_pieces):
        # gamma gaps in the fixture are >= 0.05, so +-1e-6 keeps monotonicity
        ds, basis, link, ws, theta = scored_pieces
        for obs in ds.observations[:8]:
            got = score_phi_basis(theta, obs, basis, link)
            for j in range(basis.q_n):
                h = 1e-6
                gp = theta.gamma.copy()
                gp[j] += h
                gm = theta.gamma.copy()
                gm[j] -= h
                fd = (
                    subject_loglik(emfit.ParamState(theta.beta, gp), obs, basis, link)
                    - subject_loglik(emfit.ParamState(theta.beta, gm), obs, basis, link)
                ) / (2 * h)
                assert got[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_zero_covariates_give_zero_beta_score(self, scored_pieces):
        ds, basis, link, ws, theta = scored_pieces
        obs = IntervalObservation(Censoring.INTERVAL, 1.0, 2.0, np.zeros(ds.d))
        np.testing.assert_array_equal(score_beta(theta, obs, basis, link), 0.0)

    def test_right_censored_uses_only_left_endpoint(self, scored_pieces):
        ds, basis, link, ws, theta = scored_pieces
        obs = IntervalObservation(Censoring.RIGHT, 2.0, np.inf, np.ones(ds.d))
        rows = score_phi_basis(theta, obs, basis, link)
        support = spline.basis_eval(basis, 2.0) > 0
        assert np.all(rows[~support] == 0)
        assert np.any(rows[support] != 0)

    def test_batch_matches_per_subject(self, scored_pieces):
        ds, basis, link, ws, theta = scored_pieces
        rows = compute_score_rows(theta, ds, basis, link, workspace=ws)
        for i, obs in enumerate(ds.observations):
            np.testing.assert_allclose(rows.beta_scores[i], score_beta(theta, obs, basis, link),
                                       rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(rows.phi_scores[i], score_phi_basis(theta, obs, basis, link),
                                       rtol=1e-10, atol=1e-12)

    def test_location_shift_identity(self, scored_pieces):
        # summing the score operator over the basis equals the derivative of
        # the total log-likelihood under phi -> phi + t (partition of unity)
        ds, basis, link, ws, theta = scored_pieces
        rows = compute_score_rows(theta, ds, basis, link, workspace=ws)
        shift_score = rows.phi_scores.sum()
        h = 1e-6
        up = emfit.ParamState(theta.beta, theta.gamma + h)
        dn = emfit.ParamState(theta.beta, theta.gamma - h)
        ll_up = sum(subject_loglik(up, o, basis, link) for o in ds.observations)
        ll_dn = sum(subject_loglik(dn, o, basis, link) for o in ds.observations)
        assert shift_score == pytest.approx((ll_up - ll_dn) / (2 * h), rel=1e-6, abs=1e-6)

    def test_score_sums_vanish_at_unpenalized_maximum(self):
        ds = synth_dataset(n=40, seed=8)
        link = linkfam.PH
        basis = spline.make_knots(ds.finite_endpoints(), ds.n)
        ws = emfit.FitWorkspace(ds, basis, link)
        theta0 = emfit.default_initial_state(ds, basis, link)
        res = emfit.em_fixed_lambda(ds, 0.0, theta0, basis, link, workspace=ws, max_iter=4000)
        rows = compute_score_rows(res.theta, ds, basis, link, workspace=ws)
        assert np.max(np.abs(rows.beta_scores.sum(axis=0))) < 1e-4


class TestEstimateInfo:
    def test_psd_orthogonality_and_positive_se(self):
        ds = synth_dataset(n=80, seed=19)
        res = nested.fit(ds, linkfam.PH)
        info, se = estimate_info(res, ds)
        eigvals = np.linalg.eigvalsh(info)
        assert np.all(eigvals > 0)
        assert np.all(se > 0)
        rows = compute_score_rows(res.theta, ds, res.basis, res.link)
        coef = np.linalg.pinv(rows.phi_scores.T @ rows.phi_scores, rcond=1e-9) @ (
            rows.phi_scores.T @ rows.beta_scores)
        resid = rows.beta_scores - rows.phi_scores @ coef
        cross = resid.T @ rows.phi_scores / ds.n
        assert np.max(np.abs(cross)) < 1e-8


class TestWaldCI:
    def test_standard_normal_quantile(self):
        class Dummy:
            pass

        f = Dummy()
        f.theta = emfit.ParamState(beta=np.array([0.0]), gamma=np.array([0.0, 1.0]))
        f.std_errors = np.array([1.0])
        (lo, hi), = wald_ci(f, 0.95)
        assert lo == pytest.approx(-1.959964, abs=1e-5)
        assert hi == pytest.approx(1.959964, abs=1e-5)

    def test_zero_se_gives_zero_width(self):
        class Dummy:
            pass

        f = Dummy()
        f.theta = emfit.ParamState(beta=np.array([2.0]), gamma=np.array([0.0, 1.0]))
        f.std_errors = np.array([0.0])
        (lo, hi), = wald_ci(f, 0.95)
        assert lo == hi == 2.0


class TestBootstrapBand:
    def test_identity_resamples_give_zero_width(self, monkeypatch):
        ds = synth_dataset(n=35, seed=23)
        monkeypatch.setattr(inference, "resample_indices", lambda rng, n: np.arange(n))
        grid = np.linspace(*_range(ds), 12)
        band = bootstrap_band(ds, linkfam.PH, grid, n_boot=2, seed=1)
        np.testing.assert_allclose(band.lower, band.upper, atol=1e-12)
        np.testing.assert_allclose(band.lower, band.phi_hat, atol=1e-12)

    def test_deterministic_and_contains_estimate(self):
        ds = synth_dataset(n=60, seed=77)
        grid = np.linspace(*_range(ds), 25)
        band1 = bootstrap_band(ds, linkfam.PH, grid, n_boot=24, seed=9)
        band2 = bootstrap_band(ds, linkfam.PH, grid, n_boot=24, seed=9)
        np.testing.assert_array_equal(band1.lower, band2.lower)
        np.testing.assert_array_equal(band1.upper, band2.upper)
        inside = (band1.phi_hat >= band1.lower - 1e-9) & (band1.phi_hat <= band1.upper + 1e-9)
        assert inside.mean() >= 0.90

    def test_csv_schema(self):
        ds = synth_dataset(n=35, seed=23)
        grid = np.linspace(*_range(ds), 5)
        band = bootstrap_band(ds, linkfam.PH, grid, n_boot=3, seed=2)
        lines = band.to_csv().strip().split("\n")
        assert lines[0] == "t,phi_hat,lower,upper"
        assert len(lines) == 6


def _range(ds):
    times = ds.finite_endpoints()
    return float(times.min()), float(times.max())
