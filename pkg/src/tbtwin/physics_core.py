"""Domain types and exact two-photon state bookkeeping.

All times are in picoseconds and all phases in radians.  The value types are
frozen dataclasses; functions here never mutate their inputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .errors import ConfigError, DelayMismatch, UnknownModel

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.35482...
FWTM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(10.0))  # 4.29193...
GAUSSIAN_FWTM_RATIO = FWTM_PER_SIGMA / FWHM_PER_SIGMA  # 1.82262...

SPEED_OF_LIGHT = 299_792_458.0

JITTER_MODELS = ("none", "gaussian", "gaussian_exp_tail")
PAIR_NUMBER_MODELS = ("poisson", "thermal")
ARM_SPLITS = ("per_arm_total", "split_evenly")


@dataclass(frozen=True)
class PulseTrainSpec:
    period_ps: float = 100.0
    pulse_fwhm_ps: float = 40.0
    n_pulses: int = 1
    inter_pulse_phase_rad: float = 0.0
    rep_rate_hz: Optional[float] = None

    def __post_init__(self):
        if self.period_ps <= 0:
            raise ConfigError("period_ps must be positive")
        if not 0 <= self.pulse_fwhm_ps < self.period_ps:
            raise ConfigError(
                f"pulse_fwhm_ps={self.pulse_fwhm_ps} must be below period_ps={self.period_ps}")
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ConfigError("n_pulses must be an integer >= 1")
        expected = 1e12 / self.period_ps
        if self.rep_rate_hz is None:
            object.__setattr__(self, "rep_rate_hz", expected)
        elif abs(self.rep_rate_hz - expected) > 1e-9 * expected:
            raise ConfigError(
                f"rep_rate_hz={self.rep_rate_hz} inconsistent with period_ps={self.period_ps}")


@dataclass(frozen=True)
class SourceSpec:
    mean_pairs_per_pulse: float = 0.03
    pair_number_model: str = "poisson"

    def __post_init__(self):
        if self.mean_pairs_per_pulse < 0:
            raise ConfigError("mean_pairs_per_pulse must be >= 0")
        if self.pair_number_model not in PAIR_NUMBER_MODELS:
            raise UnknownModel(f"pair_number_model {self.pair_number_model!r}")
        if self.mean_pairs_per_pulse > 1:
            warnings.warn("mean_pairs_per_pulse > 1 is outside the perturbative regime",
                          stacklevel=3)


@dataclass(frozen=True)
class MziSpec:
    delay_ps: float = 100.0
    phase_rad: float = 0.0
    insertion_loss_db: float = 5.0
    extinction_error: float = 0.01

    def __post_init__(self):
        if not 0 <= self.extinction_error <= 0.5:
            raise ConfigError("extinction_error must lie in [0, 0.5]")
        if self.delay_ps <= 0:
            raise ConfigError("delay_ps must be positive")

    @property
    def fringe_factor(self) -> float:
        return 1.0 - 2.0 * self.extinction_error


def check_delay(mzi: MziSpec, period_ps: float) -> None:
    if abs(mzi.delay_ps - period_ps) > 1e-9 * period_ps:
        raise DelayMismatch(
            f"interferometer delay {mzi.delay_ps} ps != bin spacing {period_ps} ps")


@dataclass(frozen=True)
class JitterSpec:
    """Timing jitter distribution.

    ``gaussian_exp_tail`` is the mixture ``(1-w) N(0, core_sigma) + w Laplace(0, b)``
    with ``w = tail_weight`` and ``b = tail_scale_ps``.  When ``core_sigma_ps`` is
    omitted it is solved so that the mixture FWHM equals ``fwhm_ps``.
    """

    model: str = "none"
    fwhm_ps: float = 0.0
    fwtm_ps: Optional[float] = None
    tail_weight: float = 0.0
    tail_scale_ps: float = 1.0
    core_sigma_ps: Optional[float] = None

    def __post_init__(self):
        if self.model not in JITTER_MODELS:
            raise UnknownModel(f"jitter model {self.model!r}")
        if self.model == "none":
            object.__setattr__(self, "core_sigma_ps", 0.0)
            return
        if self.fwhm_ps <= 0:
            raise ConfigError("jitter fwhm_ps must be positive")
        if self.model == "gaussian":
            sigma = self.fwhm_ps / FWHM_PER_SIGMA
            object.__setattr__(self, "core_sigma_ps", sigma)
            fwtm = sigma * FWTM_PER_SIGMA
            if self.fwtm_ps is not None and abs(self.fwtm_ps / fwtm - 1) > 1e-3:
                raise ConfigError(
                    f"gaussian jitter requires fwtm/fwhm = {GAUSSIAN_FWTM_RATIO:.4f}")
            object.__setattr__(self, "fwtm_ps", fwtm)
            return
        if not 0 <= self.tail_weight < 1:
            raise ConfigError("tail_weight must lie in [0, 1)")
        if self.tail_scale_ps <= 0:
            raise ConfigError("tail_scale_ps must be positive")
        if self.core_sigma_ps is None:
            w, b = self.tail_weight, self.tail_scale_ps
            f = lambda s: mixture_width(s, w, b, 0.5) - self.fwhm_ps
            lo, hi = 1e-6 * self.fwhm_ps, 10 * self.fwhm_ps
            if f(lo) * f(hi) > 0:
                raise ConfigError(
                    f"no core width gives fwhm {self.fwhm_ps} ps with tail weight {w} "
                    f"and scale {b} ps")
            sigma = brentq(f, lo, hi, xtol=1e-12)
            object.__setattr__(self, "core_sigma_ps", sigma)
        if self.fwtm_ps is None:
            object.__setattr__(self, "fwtm_ps", self.realized_widths()[1])

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.model == "none":
            return np.where(x == 0, np.inf, 0.0)
        return mixture_pdf(x, self.core_sigma_ps, self._w, self._b)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.model == "none":
            return (x >= 0).astype(float)
        s, w, b = self.core_sigma_ps, self._w, self._b
        lap = np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / b),
                       1.0 - 0.5 * np.exp(-np.maximum(x, 0) / b))
        return (1 - w) * ndtr(x / s) + w * lap

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.model == "none" or size == 0:
            return np.zeros(size)
        out = rng.normal(0.0, self.core_sigma_ps, size)
        if self._w > 0:
            in_tail = rng.random(size) < self._w
            out[in_tail] = rng.laplace(0.0, self._b, int(in_tail.sum()))
        return out

    def realized_widths(self) -> tuple[float, float]:
        """Full width at half and at tenth maximum of the density."""
        if self.model == "none":
            return 0.0, 0.0
        s, w, b = self.core_sigma_ps, self._w, self._b
        return mixture_width(s, w, b, 0.5), mixture_width(s, w, b, 0.1)

    @property
    def _w(self) -> float:
        return self.tail_weight if self.model == "gaussian_exp_tail" else 0.0

    @property
    def _b(self) -> float:
        return self.tail_scale_ps


def mixture_pdf(x, sigma, w, b):
    x = np.asarray(x, dtype=float)
    gauss = np.exp(-0.5 * (x / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    if w == 0:
        return gauss
    return (1 - w) * gauss + w * np.exp(-np.abs(x) / b) / (2 * b)


def mixture_width(sigma: float, w: float, b: float, level: float) -> float:
    """Full width of the symmetric mixture density at ``level`` times its peak."""
    target = level * float(mixture_pdf(0.0, sigma, w, b))
    hi = sigma
    while float(mixture_pdf(hi, sigma, w, b)) > target:
        hi *= 2
    return 2 * brentq(lambda x: float(mixture_pdf(x, sigma, w, b)) - target, 0.0, hi,
                      xtol=1e-12, rtol=1e-14)


@dataclass(frozen=True)
class DetectorSpec:
    arm_loss_db: float = 0.0
    quantum_efficiency: float = 0.02
    dark_rate_hz: float = 4.0e4
    window_ps: float = 75.0
    jitter: JitterSpec = field(default_factory=JitterSpec)
    dead_time_ps: float = 0.0

    def __post_init__(self):
        if not 0 <= self.quantum_efficiency <= 1:
            raise ConfigError("quantum_efficiency must lie in [0, 1]")
        if self.arm_loss_db < 0 or self.dark_rate_hz < 0 or self.dead_time_ps < 0:
            raise ConfigError("arm_loss_db, dark_rate_hz and dead_time_ps must be >= 0")
        if self.window_ps <= 0:
            raise ConfigError("window_ps must be positive")

    @property
    def dark_probability_per_window(self) -> float:
        return self.dark_rate_hz * self.window_ps * 1e-12

    @property
    def survival(self) -> float:
        return db_to_transmission(self.arm_loss_db) * self.quantum_efficiency


@dataclass(frozen=True)
class LossBudget:
    items: tuple = ()
    arm_split: str = "split_evenly"

    def __post_init__(self):
        items = tuple((str(label), float(db)) for label, db in self.items)
        for label, db in items:
            if db < 0 or not math.isfinite(db):
                raise ConfigError(f"loss item {label!r} must be a finite non-negative dB value")
        if self.arm_split not in ARM_SPLITS:
            raise UnknownModel(f"arm_split {self.arm_split!r}")
        object.__setattr__(self, "items", items)

    @property
    def total_db(self) -> float:
        return sum(db for _, db in self.items)

    @property
    def per_arm_db(self) -> float:
        if self.arm_split == "split_evenly":
            return self.total_db / 2
        return self.total_db

    @property
    def per_arm_transmission(self) -> float:
        return db_to_transmission(self.per_arm_db)

    def without(self, *labels: str) -> "LossBudget":
        return LossBudget(tuple(i for i in self.items if i[0] not in labels), self.arm_split)

    def improved(self, db: float) -> "LossBudget":
        """Budget with ``db`` removed from the total (as one negative-free rescale)."""
        total = self.total_db
        if not 0 <= db <= total:
            raise ConfigError("improvement must lie between 0 and the budget total")
        scale = (total - db) / total if total else 1.0
        return LossBudget(tuple((lbl, v * scale) for lbl, v in self.items), self.arm_split)


TABLE1_ITEMS = (
    ("Fiber pigtailling and propagation loss", 10.0),
    ("Fiber U-bench and filtering loss", 11.0),
    ("Insertion loss of PLC MZI", 5.0),
)


def reference_budget(arm_split: str = "split_evenly") -> LossBudget:
    return LossBudget(TABLE1_ITEMS, arm_split)


def db_to_transmission(db: float) -> float:
    return 10.0 ** (-db / 10.0)


def phase_from_wavelength(wavelength_nm: float, period_ps: float) -> float:
    """Pump phase advance between consecutive pulses, reduced mod 2*pi."""
    cycles = SPEED_OF_LIGHT * period_ps * 1e-12 / (wavelength_nm * 1e-9)
    return 2 * math.pi * (cycles % 1.0)


@dataclass(frozen=True)
class TimeBinPairState:
    """Coincident (diagonal) part of a two-photon time-bin state.

    ``amplitudes[k]`` multiplies |t_k>_s |t_k>_i.  ``discarded_weight`` is the
    fraction of the original probability that left the coincident subspace.
    """

    amplitudes: np.ndarray
    discarded_weight: float = 0.0
    bin_spacing_ps: float = 100.0

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        if not 0 <= self.discarded_weight <= 1 + 1e-12:
            raise ConfigError("discarded_weight must lie in [0, 1]")

    @property
    def n_bins(self) -> int:
        return len(self.amplitudes)

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def normalize(self) -> "TimeBinPairState":
        norm = math.sqrt(float(self.probabilities.sum()))
        if norm == 0:
            raise ConfigError("cannot normalize a null state")
        return TimeBinPairState(self.amplitudes / norm, self.discarded_weight,
                                self.bin_spacing_ps)


def build_sequential_state(train: PulseTrainSpec) -> TimeBinPairState:
    n = int(train.n_pulses)
    k = np.arange(n)
    amps = np.exp(1j * k * train.inter_pulse_phase_rad) / math.sqrt(n)
    return TimeBinPairState(amps, 0.0, train.period_ps)


def apply_interferometers(state: TimeBinPairState, mzi_s: MziSpec,
                          mzi_i: MziSpec) -> TimeBinPairState:
    """Pass both photons through their unbalanced interferometers and post-select.

    Only the monitored output port and same-slot (coincident) terms are kept;
    every other amplitude is booked into ``discarded_weight``.
    """
    check_delay(mzi_s, state.bin_spacing_ps)
    check_delay(mzi_i, state.bin_spacing_ps)
    a = state.amplitudes
    both_long = np.exp(1j * (mzi_s.phase_rad + mzi_i.phase_rad))
    out = np.zeros(len(a) + 1, dtype=complex)
    out[:-1] += a
    out[1:] += a * both_long
    out *= 0.25  # 1/2 per photon per interferometer
    kept = float(np.sum(np.abs(out) ** 2)) / float(np.sum(np.abs(a) ** 2))
    discarded = 1.0 - (1.0 - state.discarded_weight) * kept
    return TimeBinPairState(out, min(max(discarded, 0.0), 1.0),
                            state.bin_spacing_ps).normalize()
