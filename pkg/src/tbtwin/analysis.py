"""Time-interval analysis: start-stop histograms, CAR, peak widths, fringe fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .analytic import window_capture
from .errors import ConfigError, DegenerateFit, NoPeak, SimulationError
from .montecarlo import ExperimentConfig, TimestampStream, simulate
from .physics_core import JitterSpec


def _times(stream) -> np.ndarray:
    if isinstance(stream, TimestampStream):
        return stream.times_ps
    return np.asarray(stream, dtype=np.int64)


def _n_bins(bin_width_ps: float, range_ps) -> int:
    lo, hi = range_ps
    n = (hi - lo) / bin_width_ps
    if bin_width_ps <= 0 or hi <= lo or abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ConfigError(f"range {range_ps} is not a whole number of {bin_width_ps}-ps bins")
    return int(round(n))


@dataclass(frozen=True)
class CoincidenceHistogram:
    bin_width_ps: float
    range_ps: tuple
    counts: np.ndarray
    n_starts: int

    def __post_init__(self):
        n = _n_bins(self.bin_width_ps, self.range_ps)
        counts = np.asarray(self.counts, dtype=np.int64)
        if len(counts) != n:
            raise ConfigError(f"expected {n} bins, got {len(counts)}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "range_ps", tuple(float(v) for v in self.range_ps))

    @property
    def edges(self) -> np.ndarray:
        return self.range_ps[0] + self.bin_width_ps * np.arange(len(self.counts) + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.range_ps[0] + self.bin_width_ps * (np.arange(len(self.counts)) + 0.5)

    def total_in(self, lo: float, hi: float) -> int:
        """Counts in bins whose centres fall in [lo, hi]."""
        c = self.centers
        return int(self.counts[(c >= lo - 1e-9) & (c <= hi + 1e-9)].sum())


def _pair_delays(starts, stops, lo, hi, first_stop_only=False):
    left = np.searchsorted(stops, starts + lo, side="left")
    right = np.searchsorted(stops, starts + hi, side="left")
    if first_stop_only:
        right = np.minimum(right, left + 1)
    cnt = right - left
    total = int(cnt.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    idx = np.repeat(left, cnt) + offsets
    return stops[idx] - np.repeat(starts, cnt)


def _bin(delays, lo, width, n):
    b = np.floor((delays - lo) / width).astype(np.int64)
    b = b[(b >= 0) & (b < n)]
    return np.bincount(b, minlength=n)


def build_histogram(starts, stops, bin_width_ps: float, range_ps,
                    first_stop_only: bool = False) -> CoincidenceHistogram:
    """Start-stop delay histogram over ``[range_ps[0], range_ps[1])``.

    Every stop within range of a start is recorded unless ``first_stop_only``.
    """
    n = _n_bins(bin_width_ps, range_ps)
    s, p = _times(starts), _times(stops)
    lo, hi = range_ps
    counts = np.zeros(n, dtype=np.int64)
    block = 1 << 20
    for k in range(0, len(s), block):
        d = _pair_delays(s[k:k + block], p, lo, hi, first_stop_only)
        counts += _bin(d, lo, bin_width_ps, n)
    return CoincidenceHistogram(bin_width_ps, (lo, hi), counts, len(s))


def count_coincidences(starts, stops, lo: float, hi: float) -> int:
    """Number of (start, stop) pairs with delay in [lo, hi)."""
    s, p = _times(starts), _times(stops)
    return int((np.searchsorted(p, s + hi, side="left")
                - np.searchsorted(p, s + lo, side="left")).sum())


class TimeIntervalAnalyzer:
    """Incremental start-stop histogrammer fed by time-ordered segments.

    ``feed`` takes the next start and stop events plus a watermark below
    which no further events will arrive; the result equals
    ``build_histogram`` on the concatenated streams.
    """

    def __init__(self, bin_width_ps: float, range_ps, first_stop_only: bool = False):
        self.bin_width_ps = bin_width_ps
        self.range_ps = tuple(range_ps)
        self.first_stop_only = first_stop_only
        self._n = _n_bins(bin_width_ps, range_ps)
        self.counts = np.zeros(self._n, dtype=np.int64)
        self.n_starts = 0
        self._starts = np.zeros(0, dtype=np.int64)
        self._stops = np.zeros(0, dtype=np.int64)

    def feed(self, starts, stops, watermark_ps: Optional[int] = None) -> None:
        lo, hi = self.range_ps
        self._starts = np.concatenate([self._starts, _times(starts)])
        self._stops = np.concatenate([self._stops, _times(stops)])
        if watermark_ps is None:
            return
        ready = int(np.searchsorted(self._starts, watermark_ps - hi, side="right"))
        self._process(self._starts[:ready])
        self._starts = self._starts[ready:]
        floor = (self._starts[0] if len(self._starts) else watermark_ps) + lo
        self._stops = self._stops[np.searchsorted(self._stops, floor, side="left"):]

    def _process(self, starts):
        if len(starts):
            lo = self.range_ps[0]
            d = _pair_delays(starts, self._stops, lo, self.range_ps[1], self.first_stop_only)
            self.counts += _bin(d, lo, self.bin_width_ps, self._n)
            self.n_starts += len(starts)

    def finish(self) -> CoincidenceHistogram:
        self._process(self._starts)
        self._starts = np.zeros(0, dtype=np.int64)
        return self.histogram()

    def histogram(self) -> CoincidenceHistogram:
        return CoincidenceHistogram(self.bin_width_ps, self.range_ps, self.counts.copy(),
                                    self.n_starts)


@dataclass(frozen=True)
class CarResult:
    car: float
    true_counts: int
    accidental_counts_mean: float
    n_accidental_slots: int
    zero_accidental: bool = False


def car_from_histogram(hist: CoincidenceHistogram, slot_period_ps: float, window_ps: float,
                       exclude_slots: int = 1, max_slots: Optional[int] = None) -> CarResult:
    """Matched-slot over mean unmatched-slot coincidences.

    Unmatched slots with ``|m| <= exclude_slots`` are skipped (jitter leakage);
    all remaining slots whose window lies inside the histogram are averaged,
    nearest first, up to ``max_slots``.
    """
    if window_ps > slot_period_ps:
        raise ConfigError("window must not exceed the slot period")
    lo, hi = hist.range_ps
    half = window_ps / 2
    if lo > -3 * slot_period_ps + half or hi < 3 * slot_period_ps + half:
        raise ConfigError("histogram must cover at least three slots each side")
    true = hist.total_in(-half, half)
    slots = []
    m = exclude_slots + 1
    while True:
        fits = [s for s in (-m, m) if lo <= s * slot_period_ps - half and
                s * slot_period_ps + half < hi]
        if not fits:
            break
        slots.extend(fits)
        m += 1
    if max_slots is not None:
        slots = slots[:max_slots]
    if len(slots) < 4:
        raise ConfigError(f"only {len(slots)} unmatched slots available, need >= 4")
    acc = [hist.total_in(s * slot_period_ps - half, s * slot_period_ps + half) for s in slots]
    mean_acc = float(np.mean(acc))
    if mean_acc == 0:
        return CarResult(math.inf, true, 0.0, len(slots), zero_accidental=True)
    return CarResult(true / mean_acc, true, mean_acc, len(slots))


def leakage_free_slot(jitter: JitterSpec, slot_period_ps: float, window_ps: float,
                      tol: float = 1e-4) -> int:
    """Smallest slot offset whose window holds < tol of the matched-window jitter mass."""
    ref = window_capture(jitter, 0.0, window_ps)
    m = 1
    while window_capture(jitter, m * slot_period_ps, window_ps) > tol * ref and m < 10_000:
        m += 1
    return m


def fwhm_fwtm(hist: CoincidenceHistogram) -> tuple[float, float]:
    """Peak widths at 50 % and 10 % of the background-subtracted maximum."""
    counts = hist.counts.astype(float)
    n = len(counts)
    med = float(np.median(counts))
    if n < 8 or counts.max() <= 0 or counts.max() < 5 * med:
        raise NoPeak("no dominant peak in histogram")
    q = n // 4
    bg = float(np.median(np.concatenate([counts[:q], counts[-q:]])))
    y = counts - bg
    c = hist.centers
    pk = int(np.argmax(y))
    peak = y[pk]
    return (_crossing_width(y, c, pk, 0.5 * peak), _crossing_width(y, c, pk, 0.1 * peak))


def _crossing_width(y, c, pk, level):
    left = pk
    while left > 0 and y[left - 1] >= level:
        left -= 1
    right = pk
    while right < len(y) - 1 and y[right + 1] >= level:
        right += 1
    if left == 0 or right == len(y) - 1:
        raise NoPeak("peak does not fall below the requested level inside the range")
    # interpolate between the last bin above and the first below
    xl = c[left - 1] + (level - y[left - 1]) / (y[left] - y[left - 1]) * (c[left] - c[left - 1])
    xr = c[right] + (y[right] - level) / (y[right] - y[right + 1]) * (c[right + 1] - c[right])
    return float(xr - xl)


class FringePoint(NamedTuple):
    theta_i_rad: float
    coincidences: int
    n_starts: int


@dataclass(frozen=True)
class FringeScan:
    points: tuple
    theta_s_rad: float = 0.0

    def __post_init__(self):
        pts = tuple(FringePoint(float(t), int(c), int(n)) for t, c, n in self.points)
        if len({p.n_starts for p in pts}) > 1:
            raise ConfigError("all fringe points must share the same number of starts")
        object.__setattr__(self, "points", pts)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta_i_rad for p in self.points])

    @property
    def counts(self) -> np.ndarray:
        return np.array([p.coincidences for p in self.points], dtype=float)


@dataclass(frozen=True)
class VisibilityFit:
    visibility: float
    visibility_sigma: float
    amplitude: float
    phase_offset_rad: float
    reduced_chi2: float
    clamped: bool = False


def fit_visibility(scan: FringeScan) -> VisibilityFit:
    """Weighted least squares of C = A (1 + V cos(theta + phi0)), Poisson weights.

    The model is linear in (A, A V cos phi0, A V sin phi0), so the fit is solved
    exactly and the visibility error propagated from the parameter covariance.
    """
    theta, counts = scan.thetas, scan.counts
    if len(np.unique(np.round(np.mod(theta, 2 * np.pi), 12))) < 4:
        raise ConfigError("need at least four distinct phase settings")
    fallback = VisibilityFit(0.0, math.inf, float(counts.mean()), 0.0, math.nan)
    if np.all(counts == counts[0]):
        raise DegenerateFit("all coincidence counts are equal", fallback)
    w = 1.0 / np.maximum(counts, 1.0)
    X = np.column_stack([np.ones_like(theta), np.cos(theta), np.sin(theta)])
    xtwx = X.T @ (X * w[:, None])
    beta = np.linalg.solve(xtwx, X.T @ (w * counts))
    cov = np.linalg.inv(xtwx)
    a, b, c = beta
    r = math.hypot(b, c)
    if a <= 0 or r == 0:
        raise DegenerateFit("fit has no positive mean or no modulation", fallback)
    v = r / a
    grad = np.array([-v / a, b / (a * r), c / (a * r)])
    sigma = math.sqrt(float(grad @ cov @ grad))
    resid = counts - X @ beta
    dof = len(counts) - 3
    red = float(np.sum(w * resid ** 2) / dof) if dof > 0 else math.nan
    clamped = v > 1.0
    return VisibilityFit(min(v, 1.0), sigma, float(a), math.atan2(-c, b), red, clamped)


def _point_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def run_fringe_scan(config: ExperimentConfig, theta_grid: Sequence[float],
                    threads: Optional[int] = None) -> FringeScan:
    """Sweep the idler phase; count matched-window coincidences per setting.

    Each point runs until ``run.stop_after_starts`` signal detections, with an
    independent seed derived from the run seed and the point index.
    """
    if not config.has_interferometers:
        raise ConfigError("a fringe scan needs both interferometers")
    target = config.run.stop_after_starts
    if target is None:
        raise ConfigError("a fringe scan needs run.stop_after_starts")
    half = config.det_s.window_ps / 2
    points = []
    for k, theta in enumerate(theta_grid):
        cfg = replace(config, mzi_i=replace(config.mzi_i, phase_rad=float(theta)))
        cfg = cfg.with_run(rng_seed=_point_seed(config.run.rng_seed, k))
        s, i, _ = simulate(cfg, threads)
        if len(s) < target:
            raise SimulationError(
                f"pulse budget exhausted after {len(s)} of {target} starts")
        points.append((float(theta), count_coincidences(s, i, -half, half + 1e-9), len(s)))
    return FringeScan(tuple(points), config.mzi_s.phase_rad)


def temperature_to_phase(temp_c: float, t0_c: float, k_rad_per_c: float) -> float:
    if k_rad_per_c == 0:
        raise ConfigError("k_rad_per_c must be non-zero")
    return k_rad_per_c * (temp_c - t0_c)
