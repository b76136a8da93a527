"""Acceptance criteria, each run at its stated tolerance with the shipped defaults.

Every test carries a ``criterion`` mark; the conftest hook folds the outcomes
into one PASS/FAIL line per criterion at the end of the session.
"""

import math
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tbtwin.analysis import build_histogram, leakage_free_slot
from tbtwin.analytic import (
    coincidence_fringe,
    estimate_car,
    fringe_with_jitter,
    is_bell_violating,
    pair_flux,
    two_point_visibility,
)
from tbtwin.cli import main
from tbtwin.config import load_scenario
from tbtwin.montecarlo import ExperimentConfig, RunControl, simulate
from tbtwin.physics_core import (
    DetectorSpec,
    MziSpec,
    PulseTrainSpec,
    SourceSpec,
    apply_interferometers,
    build_sequential_state,
    reference_budget,
)

C1 = pytest.mark.criterion(1, "flux chain")
C2 = pytest.mark.criterion(2, "end-to-end CAR")
C3 = pytest.mark.criterion(3, "fringe visibility")
C4 = pytest.mark.criterion(4, "jitter histogram")
C5 = pytest.mark.criterion(5, "property suites")
C6 = pytest.mark.criterion(6, "non-reproducible items")
DIAG = pytest.mark.criterion("D", "diagnostics: Monte Carlo vs jitter-aware oracles")


def cli(tmp_path_factory, *argv):
    out = tmp_path_factory.mktemp("acc") / "out.csv"
    code = main([str(a) for a in argv] + ["--out", str(out)])
    text = out.read_text()
    print(text if len(text) < 4000 else text[-1500:])
    return code, text


def parse(text):
    rows, foot = {}, {}
    for line in text.splitlines():
        if line.startswith("# ") and "=" in line and " " not in line[2:].split("=")[0]:
            k, v = line[2:].split("=", 1)
            foot[k] = v
        elif line and not line.startswith("#"):
            k, v = line.split(",")[:2]
            rows[k] = v
    return rows, foot


# -- 1. flux chain -------------------------------------------------------------

@C1
@pytest.mark.parametrize("qe, improve_db, target, tol", [
    (0.02, 0.0, 313.0, 0.15),
    (1.0, 0.0, 780e3, 0.10),
    (1.0, 7.0, 4e6, 0.10),
])
def test_flux_chain(qe, improve_db, target, tol):
    budget = reference_budget("split_evenly")
    if improve_db:
        budget = budget.improved(improve_db)
    got = pair_flux(0.03, 10e9, budget, qe).detected_hz
    print(f"flux qe={qe} improve={improve_db} dB: {got:.4g} Hz vs {target:.4g} Hz")
    assert got == pytest.approx(target, rel=tol)


# -- 2. CAR --------------------------------------------------------------------

@pytest.fixture(scope="module")
def car_run(tmp_path_factory):
    code, text = cli(tmp_path_factory, "car", "--seed", 1)
    assert code == 0
    rows = parse(text)[0]
    rows["pulses"] = re.search(r"pulses=(\d+)", text).group(1)
    return rows


@C2
@pytest.mark.slow
def test_car_in_band(car_run):
    assert int(car_run["pulses"]) >= 10 ** 8
    assert 22.0 <= float(car_run["car_measured"]) <= 32.0


@C2
@pytest.mark.slow
def test_car_matches_first_order_estimate(car_run):
    exp = load_scenario().experiment
    d = exp.det_s.dark_probability_per_window
    want = estimate_car(0.03, exp.arm_efficiency("signal"), exp.arm_efficiency("idler"), d, d)
    assert float(car_run["car_first_order"]) == pytest.approx(want)
    assert float(car_run["car_measured"]) == pytest.approx(want, rel=0.15)


# -- 3. fringe visibility ------------------------------------------------------

def fringe(tmp_path_factory, *extra):
    code, text = cli(tmp_path_factory, "fringe", "--seed", 1, *extra)
    assert code == 0
    return parse(text)[1]


@pytest.fixture(scope="module")
def baseline_scans(tmp_path_factory):
    return {theta: fringe(tmp_path_factory, "--theta-s", theta, "--starts", 10 ** 6)
            for theta in (0.0, math.pi / 2)}


@C3
def test_ideal_visibility(tmp_path_factory):
    assert float(fringe(tmp_path_factory, "--preset", "ideal")["visibility"]) > 0.99


@C3
@pytest.mark.slow
def test_baseline_visibility_in_band(baseline_scans):
    v = float(baseline_scans[0.0]["visibility"])
    assert 0.80 <= v <= 0.90
    assert abs(v - 0.8532) <= 0.0577


@C3
@pytest.mark.slow
@pytest.mark.parametrize("theta_s", [0.0, math.pi / 2])
def test_two_scans_violate_bell(baseline_scans, theta_s):
    v = float(baseline_scans[theta_s]["visibility"])
    assert baseline_scans[theta_s]["bell_violating"] == "true"
    assert is_bell_violating(v)


# -- 4. jitter histogram -------------------------------------------------------

@C4
@pytest.mark.slow
def test_jitter_widths(tmp_path_factory):
    code, text = cli(tmp_path_factory, "jitter", "--seed", 1, "--coincidences", 100_000)
    foot = parse(text)[1]
    assert code == 0 and int(foot["coincidences"]) >= 100_000
    assert float(foot["fwhm_ps"]) == pytest.approx(80.0, abs=4.0)
    assert float(foot["fwtm_ps"]) == pytest.approx(200.0, abs=10.0)


# -- 5. property suites --------------------------------------------------------

@C5
@given(st.integers(1, 60), st.floats(-7, 7), st.floats(-7, 7), st.floats(-7, 7))
def test_state_normalization(n, phi_p, th_s, th_i):
    s0 = build_sequential_state(PulseTrainSpec(n_pulses=n, inter_pulse_phase_rad=phi_p))
    s1 = apply_interferometers(s0, MziSpec(phase_rad=th_s), MziSpec(phase_rad=th_i))
    for s in (s0, s1):
        assert s.probabilities.sum() == pytest.approx(1.0, abs=1e-12)


@C5
@given(st.integers(2, 60), st.floats(-7, 7), st.floats(-7, 7))
def test_interior_uniform_and_edges_phase_free(n, phi_p, theta):
    s0 = build_sequential_state(PulseTrainSpec(n_pulses=n, inter_pulse_phase_rad=phi_p))
    s = apply_interferometers(s0, MziSpec(phase_rad=theta), MziSpec())
    p = s.probabilities * (1 - s.discarded_weight)  # undo renormalisation
    np.testing.assert_allclose(p[1:-1], p[1], rtol=1e-9, atol=1e-15)
    # edge weights are |1/4|^2 / n whatever the phases
    np.testing.assert_allclose([p[0], p[-1]], 1 / (16 * n), rtol=1e-9)


@C5
@given(st.floats(0, 0.5), st.floats(-7, 7))
def test_fringe_visibility_is_one_minus_two_eps(eps, phi_p):
    v = two_point_visibility(coincidence_fringe(phi_p, phi_p, eps),
                             coincidence_fringe(phi_p + math.pi, phi_p, eps))
    assert v == pytest.approx(1 - 2 * eps, abs=1e-12)


@C5
def test_monte_carlo_bit_identical_across_workers():
    cfg = ExperimentConfig(source=SourceSpec(0.05),
                           run=RunControl(n_pulses=3 * 10 ** 8, rng_seed=9, stop_after_starts=None,
                                          chunk_size=2 * 10 ** 7),
                           mzi_s=MziSpec(), mzi_i=MziSpec(phase_rad=1.0))
    ref = simulate(cfg, threads=1)
    for workers in (2, 4, 7):
        s, i, _ = simulate(cfg, threads=workers)
        assert s.times_ps.tobytes() == ref[0].times_ps.tobytes()
        assert i.times_ps.tobytes() == ref[1].times_ps.tobytes()


@C5
def test_histogram_equals_brute_force():
    rng = np.random.default_rng(5)
    a = np.sort(rng.integers(0, 2_000_000, 10_000))
    b = np.sort(rng.integers(0, 2_000_000, 10_000))
    h = build_histogram(a, b, 10.0, (-500.0, 500.0))
    d = (b[None, :] - a[:, None]).ravel()
    d = d[(d >= -500) & (d < 500)]
    ref = np.bincount(((d + 500) // 10).astype(int), minlength=100)
    np.testing.assert_array_equal(h.counts, ref)


@C5
def test_dark_window_product():
    det = DetectorSpec(dark_rate_hz=40e3, window_ps=75.0)
    assert det.dark_probability_per_window == pytest.approx(3.0e-6, rel=1e-12)


# -- 6. items left as commentary -----------------------------------------------

@C6
def test_commentary_only():
    # The CAR-derived visibility quoted alongside the measured CAR cannot be
    # rebuilt from any stated formula, and the heater temperature to phase
    # coefficient is never given.  Neither is asserted; this only records that
    # the CAR-to-visibility map in use is the plain (CAR-1)/(CAR+1).
    from tbtwin.analytic import visibility_from_car
    assert visibility_from_car(26.0) == pytest.approx(25 / 27)


# -- diagnostics ---------------------------------------------------------------
# Not criteria.  They show that the end-to-end numbers above follow the
# jitter-aware closed forms, so any shortfall against the criteria bands comes
# from the stated jitter widths rather than from the simulator.

@DIAG
@pytest.mark.slow
def test_car_follows_jitter_oracle(car_run):
    assert float(car_run["car_measured"]) == pytest.approx(float(car_run["car_with_jitter"]), rel=0.1)


@DIAG
@pytest.mark.slow
def test_visibility_follows_jitter_oracle(baseline_scans):
    exp = load_scenario().experiment
    hi, lo = fringe_with_jitter(0.03, exp.arm_efficiency("signal"), exp.arm_efficiency("idler"),
                                4e4, 4e4, exp.det_i.jitter, 100.0, 75.0, exp.fringe_epsilon)
    want = two_point_visibility(hi, lo)
    for foot in baseline_scans.values():
        assert abs(float(foot["visibility"]) - want) < 3 * float(foot["visibility_sigma"])


@DIAG
@pytest.mark.slow
def test_gaussian_jitter_reaches_bands(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("gauss") / "g.toml"
    cfg.write_text('[detector_idler]\njitter_model = "gaussian"\njitter_fwhm_ps = 80.0\n')
    code, text = cli(tmp_path_factory, "car", cfg, "--seed", 1)
    car = float(parse(text)[0]["car_measured"])
    v = float(fringe(tmp_path_factory, cfg, "--starts", 10 ** 6)["visibility"])
    assert code == 0 and 22 <= car <= 32 and 0.80 <= v <= 0.90


@DIAG
def test_leakage_free_slot_default():
    assert leakage_free_slot(load_scenario().experiment.det_i.jitter, 100.0, 75.0) == 11
