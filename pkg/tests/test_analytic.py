import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from tbtwin.analytic import (
    BELL_THRESHOLD,
    calibrate_jitter,
    car_with_jitter,
    coincidence_fringe,
    estimate_car,
    fringe_with_jitter,
    is_bell_violating,
    jitter_leakage,
    pair_flux,
    predict_visibility,
    two_point_visibility,
    visibility_from_car,
    window_capture,
)
from tbtwin.errors import DomainError, NoSolution
from tbtwin.physics_core import (
    FWHM_PER_SIGMA,
    JitterSpec,
    LossBudget,
    reference_budget,
)

ETA = 10 ** -1.3 * 0.02


class TestFringe:
    def test_constructive_and_destructive(self):
        assert coincidence_fringe(0.4, 0.4, 0.0) == pytest.approx(1.0)
        assert coincidence_fringe(0.4 + math.pi, 0.4, 0.0) == pytest.approx(0.0, abs=1e-15)
        assert coincidence_fringe(0.4 + math.pi, 0.4, 0.01) == pytest.approx(0.01)

    def test_domain(self):
        with pytest.raises(DomainError):
            coincidence_fringe(0, 0, 0.6)

    @given(st.floats(0, 0.5))
    def test_grid_visibility_is_one_minus_two_eps(self, eps):
        theta = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
        p = np.array([coincidence_fringe(t, 0.0, eps) for t in theta])
        v = (p.max() - p.min()) / (p.max() + p.min())
        assert v == pytest.approx(1 - 2 * eps, abs=1e-12)

    @given(st.floats(-20, 20), st.floats(-5, 5), st.floats(0, 0.5))
    def test_period_two_pi(self, theta, phi, eps):
        assert coincidence_fringe(theta + 2 * math.pi, phi, eps) == pytest.approx(
            coincidence_fringe(theta, phi, eps), abs=1e-12)


class TestCar:
    def test_baseline_defaults(self):
        car = estimate_car(0.03, 1.0024e-3, 1.0024e-3, 3e-6, 3e-6)
        assert car == pytest.approx(28.5, abs=0.1)

    @given(st.floats(1e-4, 0.5), st.floats(1e-4, 1), st.floats(1e-4, 1))
    def test_dark_free_limit(self, mu, es, ei):
        assert estimate_car(mu, es, ei, 0, 0) - 1 == pytest.approx(1 / mu, rel=1e-12)

    def test_noise_limit(self):
        assert estimate_car(1e-12, 1e-3, 1e-3, 3e-6, 3e-6) == pytest.approx(1.0, abs=1e-6)
        assert estimate_car(0.0, 1e-3, 1e-3, 3e-6, 3e-6) == 1.0

    def test_zero_accidental_is_infinite(self):
        assert estimate_car(0.0, 0.1, 0.1, 0.0, 0.0) == math.inf

    @given(st.floats(1e-4, 0.3), st.floats(0, 1e-4), st.floats(1e-9, 1e-4))
    def test_monotone_in_dark(self, mu, d, extra):
        assert estimate_car(mu, ETA, ETA, d + extra, d) < estimate_car(mu, ETA, ETA, d, d)

    @given(st.floats(1e-4, 0.5))
    def test_visibility_composition(self, mu):
        v = visibility_from_car(estimate_car(mu, 0.3, 0.7, 0, 0))
        assert v == pytest.approx(1 / (1 + 2 * mu), rel=1e-12)

    def test_negative_inputs(self):
        with pytest.raises(DomainError):
            estimate_car(-1, 1, 1, 0, 0)


class TestVisibilityFromCar:
    def test_values(self):
        assert visibility_from_car(1.0) == 0.0
        assert visibility_from_car(26.0) == pytest.approx(0.9259, abs=1e-4)
        assert visibility_from_car(math.inf) == 1.0

    def test_domain(self):
        with pytest.raises(DomainError):
            visibility_from_car(0.5)


class TestFlux:
    def test_table1_chain(self):
        b = reference_budget()
        assert pair_flux(0.03, 1e10, b, 0.02).detected_hz == pytest.approx(301.4, abs=0.1)
        assert pair_flux(0.03, 1e10, b, 1.0).detected_hz == pytest.approx(753.6e3, rel=1e-3)
        assert pair_flux(0.03, 1e10, b.improved(7), 1.0).detected_hz == pytest.approx(
            3.777e6, rel=1e-3)

    def test_per_arm_total_reading(self):
        b = LossBudget(reference_budget().items, "per_arm_total")
        f = pair_flux(0.03, 1e10, b, 0.02)
        assert f.detected_hz == pytest.approx(3e8 * (10 ** -2.6 * 0.02) ** 2)

    def test_empty_budget(self):
        f = pair_flux(0.03, 1e10, LossBudget(), 0.02)
        assert f.detected_hz == pytest.approx(3e8 * 0.02 ** 2)

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=5), st.floats(0, 1),
           st.floats(0.01, 1), st.integers(1, 5))
    def test_only_total_and_qe_squared_matter(self, losses, frac, qe, k):
        moved = list(losses)
        x = frac * moved[0]
        moved[0] -= x
        moved[1] += x
        a = LossBudget(tuple((str(i), v) for i, v in enumerate(losses)))
        b = LossBudget(tuple((str(i), v) for i, v in enumerate(moved)))
        assert pair_flux(0.03, 1e10, a, qe).detected_hz == pytest.approx(
            pair_flux(0.03, 1e10, b, qe).detected_hz, rel=1e-9)
        assume(qe * k <= 1)
        assert pair_flux(0.03, 1e10, a, qe * k).detected_hz == pytest.approx(
            k ** 2 * pair_flux(0.03, 1e10, a, qe).detected_hz, rel=1e-9)

    def test_qe_domain(self):
        with pytest.raises(DomainError):
            pair_flux(0.03, 1e10, LossBudget(), 0.0)


class TestJitterLeakage:
    def test_none_and_infinite_window(self):
        assert jitter_leakage(JitterSpec(), 75.0) == 0.0
        assert jitter_leakage(JitterSpec("gaussian", 80.0), math.inf) == 0.0

    def test_gaussian_value(self):
        sigma = 80 / FWHM_PER_SIGMA
        expect = 2 * (1 - norm.cdf(50 / sigma))
        assert jitter_leakage(JitterSpec("gaussian", 80.0), 100.0) == pytest.approx(expect)
        assert expect == pytest.approx(0.141, abs=5e-4)

    def test_tail_matches_numerical_integration(self):
        j = JitterSpec("gaussian_exp_tail", 80, tail_weight=0.35, tail_scale_ps=90)
        inside, _ = integrate.quad(lambda x: float(j.pdf(x)), -37.5, 37.5, epsabs=1e-13)
        assert jitter_leakage(j, 75.0) == pytest.approx(1 - inside, abs=1e-9)

    @given(st.floats(1, 500), st.floats(0, 500), st.floats(10, 200))
    def test_monotone_in_window(self, w, dw, fwhm):
        j = JitterSpec("gaussian", fwhm)
        assert jitter_leakage(j, w + dw) <= jitter_leakage(j, w) + 1e-15

    @given(st.floats(10, 200), st.floats(0, 100), st.floats(10, 300))
    def test_monotone_in_fwhm(self, fwhm, df, window):
        a = jitter_leakage(JitterSpec("gaussian", fwhm), window)
        b = jitter_leakage(JitterSpec("gaussian", fwhm + df), window)
        assert b >= a - 1e-15

    def test_window_domain(self):
        with pytest.raises(DomainError):
            jitter_leakage(JitterSpec("gaussian", 80.0), 0.0)


class TestCalibration:
    def test_gaussian_ratio_returns_gaussian(self):
        j = calibrate_jitter(80.0, 145.8)
        assert j.model == "gaussian"
        assert j.core_sigma_ps == pytest.approx(33.97, abs=0.01)

    def test_tail_targets(self):
        j = calibrate_jitter(80.0, 200.0)
        assert j.model == "gaussian_exp_tail"
        # widths from an independent dense evaluation of the density
        x = np.linspace(0, 400, 400_001)
        pdf = j.pdf(x)
        half = x[np.argmax(pdf < 0.5 * pdf[0])]
        tenth = x[np.argmax(pdf < 0.1 * pdf[0])]
        assert 2 * half == pytest.approx(80.0, rel=0.02)
        assert 190 <= 2 * tenth <= 210

    def test_minimum_weight_solution(self):
        # no smaller tail weight can reach the target, whatever the tail scale
        j = calibrate_jitter(80.0, 200.0)
        w = j.tail_weight * 0.98
        best = 0.0
        for b in np.geomspace(5, 4000, 300):
            try:
                cand = JitterSpec("gaussian_exp_tail", 80.0, tail_weight=w, tail_scale_ps=b)
            except Exception:
                continue
            best = max(best, cand.realized_widths()[1])
        assert best < 200.0

    def test_below_gaussian_ratio_infeasible(self):
        with pytest.raises(NoSolution):
            calibrate_jitter(80.0, 100.0)

    def test_excessive_ratio_infeasible(self):
        with pytest.raises(NoSolution):
            calibrate_jitter(80.0, 5000.0)

    def test_scale_covariance(self):
        a, b = calibrate_jitter(80.0, 200.0), calibrate_jitter(40.0, 100.0)
        assert b.tail_weight == pytest.approx(a.tail_weight)
        assert b.tail_scale_ps == pytest.approx(a.tail_scale_ps / 2)


class TestVisibilityPredictors:
    def test_predict_visibility_examples(self):
        assert predict_visibility(1, 0, 0) == 1
        assert predict_visibility(0.926, 0, 0.01) == pytest.approx(0.907, abs=5e-4)
        assert predict_visibility(0.926, 0.05, 0.01) == pytest.approx(0.821, abs=5e-4)

    def test_predict_domain(self):
        with pytest.raises(DomainError):
            predict_visibility(1.2, 0, 0)

    def test_bell(self):
        assert is_bell_violating(0.8532)
        assert not is_bell_violating(0.70)
        assert not is_bell_violating(BELL_THRESHOLD)

    def test_two_point(self):
        assert two_point_visibility(100, 10) == pytest.approx(90 / 110)


class TestJitterAwareOracles:
    def test_car_reduces_to_first_order_without_jitter(self):
        got = car_with_jitter(0.03, ETA, ETA, 4e4, 4e4, JitterSpec(), 100.0, 75.0)
        assert got == pytest.approx(estimate_car(0.03, ETA, ETA, 3e-6, 3e-6), rel=1e-12)

    def test_capture_mass_for_broad_jitter(self):
        # jitter much wider than a slot spreads evenly: window / period per slot sum
        j = JitterSpec("gaussian", 2000.0)
        total = sum(window_capture(j, 100.0 * m, 75.0) for m in range(-400, 401))
        assert total == pytest.approx(0.75, rel=1e-9)

    def test_car_accidentals_count_every_slot(self):
        j = JitterSpec("gaussian_exp_tail", 80, tail_weight=0.4, tail_scale_ps=120)
        f_all = sum(window_capture(j, 100.0 * m, 75.0) for m in range(-400, 401))
        f0 = window_capture(j, 0.0, 75.0)
        mu, es, ei = 0.05, 2e-3, 3e-3
        expect = (f0 * mu * es * ei + f_all * mu * es * mu * ei) / (f_all * mu * es * mu * ei)
        assert car_with_jitter(mu, es, ei, 0.0, 0.0, j, 100.0, 75.0) == pytest.approx(
            expect, rel=1e-9)

    def test_fringe_without_jitter_matches_fringe_law(self):
        cmax, cmin = fringe_with_jitter(0.001, 1.0, 1.0, 0.0, 0.0, JitterSpec(), 100.0, 75.0, 0.0)
        # residual floor comes from multi-pair accidentals only
        assert two_point_visibility(cmax, cmin) == pytest.approx(1 / (1 + 2 * 0.001 * 1.0), rel=1e-3)

    def test_jitter_lowers_car_and_visibility(self):
        j = calibrate_jitter(80.0, 200.0)
        assert car_with_jitter(0.03, ETA, ETA, 4e4, 4e4, j, 100.0, 75.0) < estimate_car(
            0.03, ETA, ETA, 3e-6, 3e-6)
        v0 = two_point_visibility(*fringe_with_jitter(0.03, ETA, ETA, 4e4, 4e4, JitterSpec(),
                                                      100.0, 75.0, 0.0198))
        v1 = two_point_visibility(*fringe_with_jitter(0.03, ETA, ETA, 4e4, 4e4, j,
                                                      100.0, 75.0, 0.0198))
        assert v1 < v0
