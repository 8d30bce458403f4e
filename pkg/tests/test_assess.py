import math

import numpy as np
import pytest

from convospat.assess import (ParameterSummary, fit_statistics, lmpl, summarize,
                              summarize_samples, waic)


def naive_waic(ll):
    # independently coded direct formulas, no stabilisation tricks
    S = ll.shape[0]
    lppd_c = np.log(np.exp(ll).mean(axis=0))
    p_c = ll.var(axis=0, ddof=1)
    lppd, p_w = lppd_c.sum(), p_c.sum()
    return -2 * (lppd - p_w), p_w, lppd


def naive_lmpl(ll):
    S = ll.shape[0]
    cpo = S / np.exp(-ll).sum(axis=0)
    return np.log(cpo).sum()


class TestWaic:
    def test_identical_draws_zero_pw(self):
        ll = np.tile(np.array([-1.3, -0.2, -4.0]), (5, 1))
        w, p_w, lppd = waic(ll)
        assert p_w == 0.0
        assert w == pytest.approx(-2.0 * ll[0].sum())

    def test_two_draw_hand_case(self):
        # one cell, draws (-1, -3): lppd = log((e^-1 + e^-3)/2), p_c = 2
        ll = np.array([[-1.0], [-3.0]])
        w, p_w, lppd = waic(ll)
        expected_lppd = math.log((math.exp(-1) + math.exp(-3)) / 2.0)
        assert lppd == pytest.approx(expected_lppd, abs=1e-12)
        assert lppd == pytest.approx(-1.5662192, abs=1e-6)
        assert p_w == pytest.approx(2.0)
        assert w == pytest.approx(-2.0 * (expected_lppd - 2.0), abs=1e-12)
        assert w == pytest.approx(7.1324383, abs=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        ll = rng.normal(-2.0, 1.0, (5, 6))
        w, p_w, lppd = waic(ll)
        ow, op, ol = naive_waic(ll)
        assert w == pytest.approx(ow, abs=1e-10)
        assert p_w == pytest.approx(op, abs=1e-10)
        assert lppd == pytest.approx(ol, abs=1e-10)

    def test_single_draw_rejected(self):
        with pytest.raises(ValueError):
            waic(np.zeros((1, 3)))

    def test_jensen_inequality_per_cell(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            ll = rng.normal(-3, 2, (8, 5))
            from scipy.special import logsumexp
            lppd_c = logsumexp(ll, axis=0) - np.log(8)
            assert np.all(lppd_c >= ll.mean(axis=0) - 1e-12)

    def test_constant_shift_property(self):
        rng = np.random.default_rng(2)
        ll = rng.normal(-2, 1, (6, 7))
        kappa = 0.37
        w0, p0, l0 = waic(ll)
        w1, p1, l1 = waic(ll + kappa)
        assert l1 == pytest.approx(l0 + 7 * kappa, abs=1e-9)
        assert p1 == pytest.approx(p0, abs=1e-9)


class TestLmpl:
    def test_identical_draws(self):
        row = np.array([-1.3, -0.2, -4.0])
        ll = np.tile(row, (4, 1))
        assert lmpl(ll) == pytest.approx(row.sum(), abs=1e-12)

    def test_two_draw_hand_case(self):
        # CPO = 2 / (e^1 + e^3) = 0.0877..., log CPO = -2.4338...
        ll = np.array([[-1.0], [-3.0]])
        cpo = 2.0 / (math.exp(1) + math.exp(3))
        assert cpo == pytest.approx(0.0877, abs=5e-5)
        assert lmpl(ll) == pytest.approx(math.log(cpo), abs=1e-12)
        assert lmpl(ll) == pytest.approx(-2.4338, abs=5e-5)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        ll = rng.normal(-2.0, 1.0, (5, 6))
        assert lmpl(ll) == pytest.approx(naive_lmpl(ll), abs=1e-10)

    def test_extreme_values_stay_finite(self):
        # the log-scale computation survives likelihoods that underflow as
        # plain numbers
        ll = np.array([[-800.0], [-1000.0]])
        out = lmpl(ll)
        assert np.isfinite(out)
        # ln 2 - logsumexp(800, 1000) = ln 2 - 1000 - ln(1 + e^-200)
        assert out == pytest.approx(np.log(2.0) - 1000.0, abs=1e-9)

    def test_zero_likelihood_cell_warns(self):
        ll = np.array([[-1.0], [-np.inf]])
        with pytest.warns(UserWarning, match="CPO"):
            out = lmpl(ll)
        assert out == -np.inf

    def test_constant_shift_property(self):
        rng = np.random.default_rng(4)
        ll = rng.normal(-2, 1, (6, 7))
        assert lmpl(ll + 0.5) == pytest.approx(lmpl(ll) + 7 * 0.5, abs=1e-9)

    def test_fit_statistics_consistency(self):
        rng = np.random.default_rng(5)
        ll = rng.normal(-2, 1, (5, 4))
        stats = fit_statistics(ll)
        assert stats.waic == pytest.approx(-2 * (stats.lppd - stats.p_w), abs=1e-12)
        assert stats.p_w >= 0


class TestSummarize:
    def test_null_effect(self):
        rows = summarize({"x": np.zeros(100)}, {"x": 1.0})
        r = rows[0]
        assert r.median == 0.0 and r.lo95 == 0.0 and r.hi95 == 0.0
        assert r.rr_median == 1.0 and r.rr_lo95 == 1.0 and r.rr_hi95 == 1.0

    def test_constant_standardised_draws(self):
        # covariate standardised at load with SD 1.23; internal beta 0.02
        # means RR for a one-SD increase is e^0.02
        rows = summarize({"x": np.full(50, 0.02)}, {"x": 1.23})
        r = rows[0]
        assert r.median == pytest.approx(0.02 / 1.23)
        assert r.rr_median == pytest.approx(math.exp(0.02), abs=1e-12)
        assert r.rr_median == pytest.approx(1.0202, abs=1e-4)

    def test_rr_interval_is_transformed_beta_interval(self):
        rng = np.random.default_rng(6)
        draws = rng.normal(0.1, 0.05, 5000)
        sd = 2.2
        r = summarize({"x": draws}, {"x": sd})[0]
        assert r.rr_lo95 == pytest.approx(math.exp(sd * r.lo95), rel=1e-12)
        assert r.rr_hi95 == pytest.approx(math.exp(sd * r.hi95), rel=1e-12)
        assert r.rr_median == pytest.approx(math.exp(sd * r.median), rel=1e-12)

    def test_non_covariate_rows_have_no_rr(self):
        r = summarize({"gamma": np.linspace(0, 1, 101)})[0]
        assert r.rr_median is None
        assert r.median == pytest.approx(0.5)
        assert r.lo95 == pytest.approx(0.025)
        assert r.hi95 == pytest.approx(0.975)

    def test_interval_endpoints_ordered(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            r = summarize({"x": rng.standard_normal(200)}, {"x": 1.0})[0]
            assert r.lo95 <= r.median <= r.hi95
            assert r.rr_lo95 <= r.rr_median <= r.rr_hi95
