import math

import numpy as np
import pytest
from scipy import stats

from transfit import linkfam, simlab, streams
from transfit.dataio import Censoring, serialize_dataset
from transfit.simlab import SimConfig, mc_replicate, phi_inverse, phi_true, power_curve, simulate_dataset


class TestPhiFunctions:
    def test_c2_log(self):
        assert phi_true("C2", 1.0) == 0.0
        assert phi_inverse("C2", 0.0) == 1.0

    def test_c1_inverse_closed_form(self):
        want = 0.5 * (-1.0 + math.sqrt(21.0))
        assert phi_inverse("C1", 0.0) == pytest.approx(want, rel=1e-12)
        assert phi_true("C1", phi_inverse("C1", 0.0)) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("config", ["C1", "C2", "C3"])
    def test_round_trip_grid(self, config):
        vs = np.linspace(-3.0, 3.0, 61)
        ts = phi_inverse(config, vs)
        assert np.all(ts > 0)
        np.testing.assert_allclose(phi_true(config, ts), vs, atol=1e-9)

    def test_defaults(self):
        assert SimConfig("C1", 0.0, 10, 1).beta_true == (-1.0, -1.0)
        assert SimConfig("C2", 0.0, 10, 1).beta_true == (-1.0, 1.0)
        assert SimConfig("C3", 0.0, 10, 1).beta_true == (1.0, -1.0)


class TestSimulateDataset:
    def test_deterministic(self):
        sc = SimConfig("C1", 0.0, 100, seed=7)
        assert serialize_dataset(simulate_dataset(sc)) == serialize_dataset(simulate_dataset(sc))

    def test_c1_censoring_rates(self):
        for alpha, target in [(0.0, 74.0), (0.5, 76.0), (1.0, 78.0)]:
            sc = SimConfig("C1", alpha, 10000, seed=2024)
            ds = simulate_dataset(sc)
            rate = 100.0 * np.mean(ds.status == int(Censoring.RIGHT))
            assert abs(rate - target) <= 2.0

    @pytest.mark.parametrize("config,alpha", [("C1", 0.0), ("C2", 1.0), ("C3", 0.5)])
    def test_event_time_distribution(self, config, alpha):
        # Kolmogorov-Smirnov against the model CDF at two fixed covariates
        link = linkfam.LinkSpec(alpha)
        beta = SimConfig(config, alpha, 10, 1).beta_true
        rng = streams.stream_rng(7, 99)
        n = 100_000
        for z in [(0.0, 0.3), (1.0, -0.5)]:
            u = rng.uniform(size=n)
            zb = z[0] * beta[0] + z[1] * beta[1]
            t = phi_inverse(config, linkfam.link_eval(link, u) - zb)
            ks = stats.kstest(t, lambda tt: linkfam.link_inv(link, phi_true(config, np.maximum(tt, 1e-300)) + zb))
            assert ks.statistic < 0.01

    def test_classification(self):
        sc = SimConfig("C3", 0.0, 400, seed=5)
        ds = simulate_dataset(sc)
        left = ds.status == int(Censoring.LEFT)
        interval = ds.status == int(Censoring.INTERVAL)
        right = ds.status == int(Censoring.RIGHT)
        assert np.all(ds.left[left] == 0)
        assert np.all(np.isinf(ds.right[right]))
        assert np.all(ds.left[interval] < ds.right[interval])
        assert left.sum() + interval.sum() + right.sum() == 400


class TestMCReplicate:
    def test_single_replicate_has_missing_sd(self):
        sc = SimConfig("C1", 0.0, 40, seed=13)
        summary = mc_replicate(sc, 1)
        assert np.all(np.isnan(summary.sd))
        assert summary.replications + summary.failures == 1

    def test_aggregate_identities_and_determinism(self):
        sc = SimConfig("C1", 0.0, 40, seed=13)
        s1 = mc_replicate(sc, 6, threads=1)
        s2 = mc_replicate(sc, 6, threads=2)
        np.testing.assert_array_equal(s1.bias, s2.bias)
        np.testing.assert_array_equal(s1.sd, s2.sd)
        np.testing.assert_array_equal(s1.ase, s2.ase)
        np.testing.assert_array_equal(s1.cp95, s2.cp95)
        assert s1.right_censor_rate == s2.right_censor_rate
        assert np.all(s1.mse >= 0.99 * s1.bias ** 2)
        assert s1.diagnostics["fs_numerator_min"] >= 0.0
        assert s1.diagnostics["all_phi_monotone"]

    def test_fit_alpha_override(self):
        sc = SimConfig("C1", 0.2, 40, seed=31)
        summary = mc_replicate(sc, 2, fit_alpha=0.0)
        assert summary.replications >= 1

    def test_csv_schema(self):
        sc = SimConfig("C1", 0.0, 40, seed=13)
        text = simlab.mc_summary_csv(mc_replicate(sc, 2))
        lines = text.strip().split("\n")
        assert lines[0].startswith("coefficient,bias,sd,ase,mse,cp95")
        assert len(lines) == 3


class TestPowerCurve:
    def test_size_and_power(self):
        sc = SimConfig("C1", 0.0, 50, seed=2)
        points = power_curve(sc, [0.0, 1.5], reps=100, threads=2)
        (b0, rate0), (b1, rate1) = points
        assert b0 == 0.0 and b1 == 1.5
        # size close to the nominal 5% (binomial 3-sigma at R=100 is 0.065)
        assert rate0 == pytest.approx(0.05, abs=0.07)
        assert rate1 > rate0 + 0.2

    def test_csv(self):
        text = simlab.power_curve_csv([(0.0, 0.05), (1.0, 0.8)])
        assert text.splitlines()[0] == "beta1,rejection_rate"
