import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfit import linkfam
from transfit.linkfam import PH, PO, LinkSpec, cum_rate, link_eval, link_inv, link_inv_deriv

ALPHAS = [0.0, 1e-6, 0.25, 0.5, 1.0, 2.5]


def central_diff(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


class TestLinkEval:
    def test_ph_at_known_point(self):
        assert link_eval(PH, 1.0 - np.exp(-1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_po_median(self):
        assert link_eval(PO, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_alpha_half(self):
        # ((1-0.75)^-0.5 - 1)/0.5 = 2, so the link value is log 2
        assert link_eval(LinkSpec(0.5), 0.75) == pytest.approx(np.log(2.0), rel=1e-12)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            link_eval(PH, 0.0)
        with pytest.raises(ValueError):
            link_eval(PH, 1.0)
        with pytest.raises(ValueError):
            LinkSpec(-0.1)

    @given(st.floats(0.001, 0.999), st.floats(0.001, 0.999),
           st.sampled_from(ALPHAS))
    @settings(max_examples=200, deadline=None)
    def test_strictly_increasing(self, u1, u2, alpha):
        if u1 == u2:
            return
        lo, hi = min(u1, u2), max(u1, u2)
        spec = LinkSpec(alpha)
        assert link_eval(spec, lo) < link_eval(spec, hi)


class TestLinkInv:
    def test_ph_at_zero(self):
        assert link_inv(PH, 0.0) == pytest.approx(1.0 - np.exp(-1.0), rel=1e-12)

    def test_po_at_zero(self):
        assert link_inv(PO, 0.0) == pytest.approx(0.5, rel=1e-12)

    def test_alpha_half(self):
        # 1 - (1 + 0.5 * 2)^(-2) = 3/4
        assert link_inv(LinkSpec(0.5), np.log(2.0)) == pytest.approx(0.75, rel=1e-12)
        assert link_eval(LinkSpec(0.5), link_inv(LinkSpec(0.5), np.log(2.0))) == pytest.approx(
            np.log(2.0), rel=1e-10)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_round_trip(self, alpha):
        # tested where the CDF has not saturated in double precision; beyond
        # that point 1 - u is not representable and the composition is
        # undefined (see the basis for the 1e-6 guard in the project notes)
        spec = LinkSpec(alpha)
        xs = np.linspace(-10.0, 10.0, 201)
        u = link_inv(spec, xs)
        keep = (1.0 - u) >= 1e-6
        assert keep.sum() > 50
        back = link_eval(spec, u[keep])
        assert np.max(np.abs(back - xs[keep]) / np.maximum(1.0, np.abs(xs[keep]))) <= 1e-10

    def test_output_in_unit_interval(self):
        for alpha in ALPHAS:
            u = link_inv(LinkSpec(alpha), np.linspace(-30, 30, 101))
            assert np.all(u >= 0.0) and np.all(u <= 1.0)


class TestLinkInvDeriv:
    def test_po_at_zero(self):
        assert link_inv_deriv(PO, 0.0) == pytest.approx(0.25, rel=1e-12)

    def test_ph_at_zero_vs_finite_difference(self):
        want = central_diff(lambda x: link_inv(PH, x), 0.0)
        got = link_inv_deriv(PH, 0.0)
        assert got == pytest.approx(np.exp(-1.0), rel=1e-9)
        assert got == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_matches_finite_differences_on_grid(self, alpha):
        spec = LinkSpec(alpha)
        for x in np.linspace(-5.0, 5.0, 41):
            fd = central_diff(lambda t: link_inv(spec, t), x)
            assert link_inv_deriv(spec, x) == pytest.approx(fd, rel=1e-6, abs=1e-12)
            assert link_inv_deriv(spec, x) > 0


class TestCumRate:
    def test_ph_at_zero(self):
        h, dh = cum_rate(PH, 0.0)
        assert h == pytest.approx(1.0, rel=1e-12)
        assert dh == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.parametrize("alpha,expected", [(1.0, np.log(2.0)), (0.5, 2.0 * np.log(1.5))])
    def test_values_against_inverse_link_oracle(self, alpha, expected):
        spec = LinkSpec(alpha)
        h, _ = cum_rate(spec, 0.0)
        assert h == pytest.approx(expected, rel=1e-12)
        assert h == pytest.approx(-np.log(1.0 - link_inv(spec, 0.0)), rel=1e-10)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_derivative_and_positivity(self, alpha):
        spec = LinkSpec(alpha)
        for x in np.linspace(-5.0, 5.0, 21):
            h, dh = cum_rate(spec, x)
            assert h > 0 and dh > 0
            fd = central_diff(lambda t: cum_rate(spec, t)[0], x)
            assert dh == pytest.approx(fd, rel=1e-6, abs=1e-12)

    def test_overflow_guard(self):
        h, dh = cum_rate(LinkSpec(0.5), 500.0)
        assert np.isfinite(h) and np.isfinite(dh)
        assert h == pytest.approx((500.0 + np.log(0.5)) / 0.5, rel=1e-10)


def test_alpha_continuity_at_zero():
    us = np.linspace(0.01, 0.99, 99)
    tiny = LinkSpec(1e-6)
    diffs = np.abs(link_eval(tiny, us) - link_eval(PH, us))
    assert np.max(diffs) <= 1e-4


def test_raw_kernels_match_public_api():
    xs = np.linspace(-8, 8, 57)
    for alpha in ALPHAS:
        spec = LinkSpec(alpha)
        np.testing.assert_allclose(linkfam.raw_link_inv(alpha, xs), link_inv(spec, xs), rtol=1e-15)
        np.testing.assert_allclose(linkfam.raw_link_inv_deriv(alpha, xs),
                                   link_inv_deriv(spec, xs), rtol=1e-15)
        h, dh = linkfam.raw_cum_rate(alpha, xs)
        h2, dh2 = cum_rate(spec, xs)
        np.testing.assert_allclose(h, h2, rtol=1e-15)
        np.testing.assert_allclose(dh, dh2, rtol=1e-15)
