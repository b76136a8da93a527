"""Closed-form predictions: fringe law, CAR, visibility, jitter leakage, flux chain.

These double as oracles for the Monte Carlo engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import ndtr

from .errors import DomainError, NoSolution, UnknownModel
from .physics_core import (
    GAUSSIAN_FWTM_RATIO,
    JITTER_MODELS,
    JitterSpec,
    LossBudget,
    db_to_transmission,
    mixture_width,
)

BELL_THRESHOLD = 1.0 / math.sqrt(2.0)
MAX_TAIL_WEIGHT = 0.5


def coincidence_fringe(theta_sum: float, phi_p: float, epsilon: float = 0.0) -> float:
    """Interior-bin coincidence probability, normalised to 1 at the ideal maximum."""
    if not 0 <= epsilon <= 0.5:
        raise DomainError("epsilon must lie in [0, 0.5]")
    return 0.5 * (1.0 + (1.0 - 2.0 * epsilon) * math.cos(theta_sum - phi_p))


def estimate_car(mu: float, eta_s: float, eta_i: float, dark_s: float, dark_i: float) -> float:
    """First-order coincidence-to-accidental ratio.

    ``dark_s``/``dark_i`` are dark-count probabilities per coincidence window.
    Returns ``math.inf`` when the accidental probability vanishes.
    """
    if min(mu, eta_s, eta_i, dark_s, dark_i) < 0:
        raise DomainError("all inputs must be non-negative")
    p_acc = (mu * eta_s + dark_s) * (mu * eta_i + dark_i)
    if p_acc == 0:
        return math.inf
    return (mu * eta_s * eta_i + p_acc) / p_acc


def visibility_from_car(car: float) -> float:
    if car < 1:
        raise DomainError(f"CAR must be >= 1, got {car}")
    if math.isinf(car):
        return 1.0
    return (car - 1.0) / (car + 1.0)


@dataclass(frozen=True)
class FluxEstimate:
    source_hz: float
    detected_hz: float
    ideal_qe_hz: float
    arm_transmission: float


def pair_flux(mu: float, rep_rate_hz: float, budget: LossBudget, qe: float) -> FluxEstimate:
    if not 0 < qe <= 1:
        raise DomainError("qe must lie in (0, 1]")
    source = mu * rep_rate_hz
    t_arm = budget.per_arm_transmission
    return FluxEstimate(source, source * (t_arm * qe) ** 2, source * t_arm ** 2, t_arm)


def jitter_leakage(jitter: JitterSpec, window_ps: float) -> float:
    """Probability that a coincidence delay falls outside +/- window_ps/2."""
    if jitter.model not in JITTER_MODELS:
        raise UnknownModel(jitter.model)
    if window_ps <= 0:
        raise DomainError("window_ps must be positive")
    if jitter.model == "none" or math.isinf(window_ps):
        return 0.0
    half = window_ps / 2
    gauss_out = 2.0 * ndtr(-half / jitter.core_sigma_ps)
    if jitter.model == "gaussian":
        return float(gauss_out)
    w, b = jitter.tail_weight, jitter.tail_scale_ps
    return float((1 - w) * gauss_out + w * math.exp(-half / b))


def window_capture(jitter: JitterSpec, center_ps: float, window_ps: float) -> float:
    """Jitter probability mass inside ``center +/- window/2``."""
    half = window_ps / 2
    return float(jitter.cdf(center_ps + half) - jitter.cdf(center_ps - half))


def calibrate_jitter(fwhm_ps: float, fwtm_ps: float) -> JitterSpec:
    """Gaussian core plus Laplace tail matching a measured FWHM and FWTM.

    Among the mixtures that reproduce both widths, the one with the smallest
    tail weight is returned: bisection on the weight, where for each weight the
    tail scale maximising the FWTM is found (core width re-solved each time so
    the FWHM stays fixed).
    """
    if fwhm_ps <= 0 or fwtm_ps <= 0:
        raise DomainError("widths must be positive")
    ratio = fwtm_ps / fwhm_ps
    if ratio < GAUSSIAN_FWTM_RATIO * (1 - 1e-3):
        raise NoSolution(f"fwtm/fwhm = {ratio:.4f} is below the Gaussian ratio")
    if ratio <= GAUSSIAN_FWTM_RATIO * (1 + 1e-3):
        return JitterSpec("gaussian", fwhm_ps)
    w, b_unit, s_unit = _solve_tail_shape(round(ratio, 12))
    spec = JitterSpec("gaussian_exp_tail", fwhm_ps, fwtm_ps, w, b_unit * fwhm_ps,
                      s_unit * fwhm_ps)
    got_hm, got_tm = spec.realized_widths()
    if abs(got_hm / fwhm_ps - 1) > 0.02 or abs(got_tm / fwtm_ps - 1) > 0.05:
        raise NoSolution(f"calibration missed targets: {got_hm:.2f}/{got_tm:.2f} ps")
    return spec


def _core_sigma(w: float, b: float) -> float:
    """Core sigma giving unit FWHM, or nan when no core width can."""
    f = lambda s: mixture_width(s, w, b, 0.5) - 1.0
    lo, hi = 1e-3, 2.0
    if f(lo) * f(hi) > 0:
        return math.nan
    return brentq(f, lo, hi, xtol=1e-13)


def _max_fwtm(w: float) -> tuple[float, float]:
    def neg_fwtm(log_b):
        b = math.exp(log_b)
        sigma = _core_sigma(w, b)
        if math.isnan(sigma):
            return 0.0
        return -mixture_width(sigma, w, b, 0.1)

    res = minimize_scalar(neg_fwtm, bounds=(math.log(0.05), math.log(50.0)),
                          method="bounded", options={"xatol": 1e-9})
    return -float(res.fun), math.exp(float(res.x))


@lru_cache(maxsize=64)
def _solve_tail_shape(ratio: float) -> tuple[float, float, float]:
    if _max_fwtm(MAX_TAIL_WEIGHT)[0] < ratio:
        raise NoSolution(
            f"fwtm/fwhm = {ratio:.3f} needs a tail weight above {MAX_TAIL_WEIGHT}")
    lo, hi = 0.0, MAX_TAIL_WEIGHT
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if _max_fwtm(mid)[0] >= ratio:
            hi = mid
        else:
            lo = mid
    _, b = _max_fwtm(hi)
    return hi, b, _core_sigma(hi, b)


def predict_visibility(v0: float, leakage: float, epsilon: float) -> float:
    """First-order visibility predictor; the Monte Carlo is the ground truth."""
    for name, val in (("v0", v0), ("leakage", leakage), ("epsilon", epsilon)):
        if not 0 <= val <= 1:
            raise DomainError(f"{name} must lie in [0, 1]")
    return v0 * (1 - 2 * epsilon) * (1 - leakage) / (1 + leakage)


def is_bell_violating(v: float) -> bool:
    return v > BELL_THRESHOLD


def two_point_visibility(c_max: float, c_min: float) -> float:
    return (c_max - c_min) / (c_max + c_min)


def fringe_visibility_on_grid(epsilon: float, n: int = 4096) -> float:
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    p = 0.5 * (1.0 + (1.0 - 2.0 * epsilon) * np.cos(theta))
    return float((p.max() - p.min()) / (p.max() + p.min()))


__all__ = [
    "BELL_THRESHOLD", "FluxEstimate", "calibrate_jitter", "car_with_jitter", "coincidence_fringe",
    "db_to_transmission", "estimate_car", "fringe_with_jitter", "is_bell_violating", "jitter_leakage",
    "pair_flux", "predict_visibility", "two_point_visibility", "visibility_from_car",
    "window_capture",
]


def _slot_captures(jitter: JitterSpec, slot_period_ps: float, window_ps: float):
    """Jitter mass in the matched window, one slot over, and summed over all slots."""
    if jitter.model == "none":
        return 1.0, 0.0, 1.0
    spread = max(jitter.fwtm_ps or 0.0, 50 * jitter.core_sigma_ps,
                 60 * jitter.tail_scale_ps if jitter.model == "gaussian_exp_tail" else 0.0)
    n = int(spread // slot_period_ps) + 2
    centers = slot_period_ps * np.arange(-n, n + 1)
    half = window_ps / 2
    caps = jitter.cdf(centers + half) - jitter.cdf(centers - half)
    return float(caps[n]), float(caps[n + 1]), float(caps.sum())


def car_with_jitter(mu: float, eta_s: float, eta_i: float, dark_rate_s_hz: float,
                    dark_rate_i_hz: float, jitter: JitterSpec, slot_period_ps: float,
                    window_ps: float) -> float:
    """CAR for a finite window when the coincidence delay is smeared by ``jitter``.

    Unlike ``estimate_car`` this keeps the true-peak capture fraction and the
    photons of neighbouring pulses that jitter into an unmatched window.
    """
    f0, _, f_all = _slot_captures(jitter, slot_period_ps, window_ps)
    ds = dark_rate_s_hz * window_ps * 1e-12
    di = dark_rate_i_hz * window_ps * 1e-12
    acc = f_all * mu * eta_s * mu * eta_i + mu * eta_s * di + mu * eta_i * ds + ds * di
    if acc == 0:
        return math.inf
    return (f0 * mu * eta_s * eta_i + acc) / acc


def fringe_with_jitter(mu: float, eta_s: float, eta_i: float, dark_rate_s_hz: float,
                       dark_rate_i_hz: float, jitter: JitterSpec, slot_period_ps: float,
                       window_ps: float, epsilon: float) -> tuple[float, float]:
    """Expected matched-window coincidences per pulse at the fringe maximum and minimum.

    Both photons pass unbalanced interferometers whose monitored port keeps half
    of each photon; the side peaks one slot away leak into the window through
    the jitter tails.
    """
    f0, f1, f_all = _slot_captures(jitter, slot_period_ps, window_ps)
    ds = dark_rate_s_hz * window_ps * 1e-12
    di = dark_rate_i_hz * window_ps * 1e-12
    ps, pi = mu * eta_s / 2, mu * eta_i / 2
    acc = f_all * ps * pi + ps * di + pi * ds + ds * di
    unit = mu * eta_s * eta_i / 16
    c = 1 - 2 * epsilon
    side = 2 * f1 * unit
    return ((2 + 2 * c) * f0 * unit + side + acc, (2 - 2 * c) * f0 * unit + side + acc)
