"""Event-level Monte Carlo of the time-bin pair source and its two detectors.

The engine never loops over pump pulses.  For each chunk of pulses it draws
only the *active* pulses (those in which at least one photon reaches a
detector) from a Bernoulli process with the exact activity probability, then
samples the pulse content conditioned on activity.  Pairs in inactive pulses
are only counted.  Cost therefore scales with detections, not with pulses.

Each chunk owns a counter-based Philox stream keyed by ``(seed, chunk_index)``
so the output does not depend on how many worker threads produced it.
"""

from __future__ import annotations

import enum
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError
from .physics_core import (
    DetectorSpec,
    LossBudget,
    MziSpec,
    PulseTrainSpec,
    SourceSpec,
    check_delay,
    reference_budget,
)

JITTER_CLIP_PS = 1_000_000
DETECTORS = ("signal", "idler")
_INT64_LIMIT = 2 ** 62
MAX_CHUNK_EVENTS = 4_000_000


class Slot(enum.IntEnum):
    """Where one photon leaves its interferometer, relative to its pump pulse."""

    EARLY = 0  # short arm, same slot as the pump pulse
    LATE = 1  # long arm, one bin later
    LOST = 2  # unmonitored output port (or not detected)


@dataclass(frozen=True)
class RunControl:
    n_pulses: int = 10 ** 8
    rng_seed: int = 0
    stop_after_starts: Optional[int] = 1_000_000
    chunk_size: int = 10 ** 10
    stop_tail_ps: int = 100_000

    def __post_init__(self):
        if self.n_pulses < 0 or self.chunk_size < 1:
            raise ConfigError("n_pulses must be >= 0 and chunk_size >= 1")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")
        if self.stop_after_starts is not None and self.stop_after_starts < 1:
            raise ConfigError("stop_after_starts must be positive when given")


@dataclass(frozen=True)
class ExperimentConfig:
    train: PulseTrainSpec = field(default_factory=PulseTrainSpec)
    source: SourceSpec = field(default_factory=SourceSpec)
    det_s: DetectorSpec = field(default_factory=DetectorSpec)
    det_i: DetectorSpec = field(default_factory=DetectorSpec)
    budget: LossBudget = field(default_factory=reference_budget)
    run: RunControl = field(default_factory=RunControl)
    mzi_s: Optional[MziSpec] = None
    mzi_i: Optional[MziSpec] = None

    def __post_init__(self):
        if (self.mzi_s is None) != (self.mzi_i is None):
            raise ConfigError("configure both interferometers or neither")
        if self.has_interferometers:
            check_delay(self.mzi_s, self.train.period_ps)
            check_delay(self.mzi_i, self.train.period_ps)

    @property
    def has_interferometers(self) -> bool:
        return self.mzi_s is not None

    def detector(self, arm: str) -> DetectorSpec:
        return self.det_s if arm == "signal" else self.det_i

    def arm_efficiency(self, arm: str) -> float:
        """Probability that a photon emitted into ``arm`` is registered.

        Excludes the interferometer's own port splitting.
        """
        return self.budget.per_arm_transmission * self.detector(arm).survival

    @property
    def theta_sum(self) -> float:
        return self.mzi_s.phase_rad + self.mzi_i.phase_rad if self.has_interferometers else 0.0

    @property
    def fringe_epsilon(self) -> float:
        """Single extinction error equivalent to both interferometers together."""
        if not self.has_interferometers:
            return 0.0
        return 0.5 * (1.0 - self.mzi_s.fringe_factor * self.mzi_i.fringe_factor)

    def with_run(self, **changes) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, **changes))


@dataclass(frozen=True)
class TimestampStream:
    detector_id: str
    times_ps: np.ndarray
    span_ps: int

    def __post_init__(self):
        if self.detector_id not in DETECTORS:
            raise ConfigError(f"detector_id must be one of {DETECTORS}")
        t = np.ascontiguousarray(self.times_ps, dtype=np.int64)
        t.setflags(write=False)
        object.__setattr__(self, "times_ps", t)
        object.__setattr__(self, "span_ps", int(self.span_ps))
        if len(t):
            if np.any(np.diff(t) < 0):
                raise ConfigError("timestamps must be non-decreasing")
            if t[0] < 0 or t[-1] > self.span_ps:
                raise ConfigError("timestamps must lie within [0, span_ps]")

    def __len__(self):
        return len(self.times_ps)


@dataclass
class RunStats:
    seed: int
    pulses: int = 0
    pairs: int = 0
    singles_signal: int = 0
    singles_idler: int = 0
    chunks: int = 0
    stopped_on_starts: bool = False


@dataclass
class Segment:
    """Finalised, time-ordered slice of both detector streams."""

    signal: np.ndarray
    idler: np.ndarray
    watermark_ps: int
    pulses: int
    pairs: int


def pair_outcome_probabilities(phi_p: float, theta_sum: float, epsilon: float = 0.0) -> np.ndarray:
    """3x3 joint distribution of (signal slot, idler slot) for one pair.

    Rows index the signal photon, columns the idler, both in ``Slot`` order.
    Each photon takes either arm with amplitude 1/2 into the monitored port.
    The two same-slot outcomes carry the two-photon interference term; over a
    long pulse train the early/early term of one bin and the late/late term of
    the previous bin land in the same slot, so their combined weight follows
    (2 + 2 cos)/16 and is split evenly between them.
    """
    c = (1.0 - 2.0 * epsilon) * math.cos(theta_sum - phi_p)
    p = np.empty((3, 3))
    same = (2.0 + 2.0 * c) / 32.0
    one_lost = (4.0 - 2.0 * c) / 32.0
    p[Slot.EARLY, Slot.EARLY] = p[Slot.LATE, Slot.LATE] = same
    p[Slot.EARLY, Slot.LATE] = p[Slot.LATE, Slot.EARLY] = 1.0 / 16.0
    p[Slot.EARLY, Slot.LOST] = p[Slot.LATE, Slot.LOST] = one_lost
    p[Slot.LOST, Slot.EARLY] = p[Slot.LOST, Slot.LATE] = one_lost
    p[Slot.LOST, Slot.LOST] = (4.0 + 2.0 * c) / 16.0
    return p


def sample_pair_outcome(phi_p: float, theta_sum: float, epsilon: float,
                        rng: np.random.Generator) -> tuple[Slot, Slot]:
    p = pair_outcome_probabilities(phi_p, theta_sum, epsilon).ravel()
    k = int(rng.choice(9, p=p / p.sum()))
    return Slot(k // 3), Slot(k % 3)


def detection_matrix(config: ExperimentConfig) -> np.ndarray:
    """Per-pair joint distribution of registered (signal, idler) slots.

    ``LOST`` here means "no click from this photon", for whatever reason.
    """
    if config.has_interferometers:
        base = pair_outcome_probabilities(config.train.inter_pulse_phase_rad,
                                          config.theta_sum, config.fringe_epsilon)
    else:
        base = np.zeros((3, 3))
        base[Slot.EARLY, Slot.EARLY] = 1.0
    eta = (config.arm_efficiency("signal"), config.arm_efficiency("idler"))
    out = np.zeros((3, 3))
    for s in range(3):
        for i in range(3):
            p = base[s, i]
            if p == 0:
                continue
            s_opts = [(s, eta[0]), (Slot.LOST, 1 - eta[0])] if s != Slot.LOST else [(s, 1.0)]
            i_opts = [(i, eta[1]), (Slot.LOST, 1 - eta[1])] if i != Slot.LOST else [(i, 1.0)]
            for s2, ps in s_opts:
                for i2, pi in i_opts:
                    out[s2, i2] += p * ps * pi
    return out


class _Plan:
    """Everything a chunk needs, derived once per run."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        train, run = config.train, config.run
        self.period = train.period_ps
        self.integer_period = float(self.period).is_integer()
        self.n_pulses = int(run.n_pulses)
        self.delay = config.mzi_s.delay_ps if config.has_interferometers else 0.0
        self.span = int(math.ceil(self.n_pulses * self.period))
        if self.span + JITTER_CLIP_PS + self.delay >= _INT64_LIMIT:
            raise OverflowError("pulse train does not fit in a 64-bit picosecond timeline")
        self.guard = JITTER_CLIP_PS + int(math.ceil(self.delay)) + 1

        q_mat = detection_matrix(config).ravel()
        self.q = float(1.0 - q_mat[8])
        self.cat_all = np.cumsum(q_mat)
        self.cat_all /= self.cat_all[-1]
        det = q_mat[:8]
        self.cat_detected = np.cumsum(det) / det.sum() if self.q > 0 else None

        mu = config.source.mean_pairs_per_pulse
        self.mu = mu
        self.thermal = config.source.pair_number_model == "thermal"
        if self.thermal:
            self.p_active = mu * self.q / (1.0 + mu * self.q)
        else:
            self.p_active = -math.expm1(-mu * self.q)
        self.n_given_active = self._conditional_pair_cdf() if self.p_active > 0 else None

        # bright configurations get shorter chunks so one chunk stays a few
        # million events; a pure function of the config, so still deterministic
        dark = sum(d.dark_rate_hz for d in (config.det_s, config.det_i)) * self.period * 1e-12
        per_pulse = 2.0 * mu * self.q + dark
        cap = int(MAX_CHUNK_EVENTS // per_pulse) if per_pulse > 0 else run.chunk_size
        self.chunk_size = max(1, min(int(run.chunk_size), cap))
        self.n_chunks = -(-self.n_pulses // self.chunk_size) if self.n_pulses else 0

    def _conditional_pair_cdf(self) -> np.ndarray:
        mu, q = self.mu, self.q
        n = np.arange(1, 4096)
        if self.thermal:
            log_p = n * math.log(mu / (1 + mu)) - math.log1p(mu)
        else:
            from scipy.special import gammaln
            log_p = -mu + n * math.log(mu) - gammaln(n + 1)
        w = np.exp(log_p)
        if q < 1:
            w = w * -np.expm1(n * math.log1p(-q))
        cdf = np.cumsum(w)
        cut = int(np.searchsorted(cdf, cdf[-1] * (1 - 1e-16))) + 1
        cdf = cdf[:cut]
        return cdf / cdf[-1]

    def pulse_times(self, idx: np.ndarray) -> np.ndarray:
        if self.integer_period:
            return idx * np.int64(self.period)
        return np.rint(idx * self.period).astype(np.int64)

    def chunk_bounds(self, c: int) -> tuple[int, int]:
        lo = c * self.chunk_size
        return lo, min(lo + self.chunk_size, self.n_pulses)


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chunk,))
    return np.random.Generator(np.random.Philox(ss))


def _active_offsets(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Indices of successes of a Bernoulli(p) process over n trials."""
    if p <= 0 or n == 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    parts = []
    pos = -1
    batch = int(n * p * 1.05 + 10 * math.sqrt(n * p) + 16)
    while True:
        gaps = rng.geometric(p, size=batch)
        idx = pos + np.cumsum(gaps, dtype=np.int64)
        if idx[-1] >= n:
            parts.append(idx[idx < n])
            break
        parts.append(idx)
        pos = int(idx[-1])
        batch = max(16, int((n - pos) * p * 1.05 + 10 * math.sqrt((n - pos) * p) + 16))
    return np.concatenate(parts)


def _simulate_chunk(plan: _Plan, c: int):
    cfg = plan.config
    rng = _chunk_rng(cfg.run.rng_seed, c)
    lo, hi = plan.chunk_bounds(c)
    n = hi - lo

    active = _active_offsets(rng, n, plan.p_active) + lo
    m = len(active)
    if m:
        k = np.searchsorted(plan.n_given_active, rng.random(m), side="right") + 1
        # index of the first pair in the pulse that produces a click
        if plan.q < 1:
            u = rng.random(m)
            tail = -np.expm1(k * math.log1p(-plan.q))
            j = 1 + np.floor(np.log1p(-u * tail) / math.log1p(-plan.q)).astype(np.int64)
            j = np.clip(j, 1, k)
        else:
            j = np.ones(m, dtype=np.int64)
        first = np.searchsorted(plan.cat_detected, rng.random(m), side="right")
        n_extra = k - j
        extra_pulse = np.repeat(active, n_extra)
        extra = np.searchsorted(plan.cat_all, rng.random(len(extra_pulse)), side="right")
        pulses = np.concatenate([active, extra_pulse])
        cats = np.concatenate([first, extra])
        pairs_active = int(k.sum())
    else:
        pulses = np.zeros(0, dtype=np.int64)
        cats = np.zeros(0, dtype=np.int64)
        pairs_active = 0

    idle = n - m
    if plan.mu == 0 or idle == 0:
        pairs_idle = 0
    elif plan.thermal:
        r = plan.mu * (1 - plan.q) / (1 + plan.mu)
        pairs_idle = int(rng.negative_binomial(idle, 1 - r))
    else:
        pairs_idle = int(rng.poisson(idle * plan.mu * (1 - plan.q)))

    t_pulse = plan.pulse_times(pulses)
    t0, t1 = int(plan.pulse_times(np.int64(lo))), int(plan.pulse_times(np.int64(hi)))
    out = []
    for arm, slots in (("signal", cats // 3), ("idler", cats % 3)):
        det = cfg.detector(arm)
        hit = slots != Slot.LOST
        t = t_pulse[hit]
        late = slots[hit] == Slot.LATE
        if plan.delay and late.any():
            t = t + np.where(late, np.int64(round(plan.delay)), 0)
        t = t + _jitter_ps(det, rng, len(t))
        dark = _dark_counts(det, rng, t0, t1)
        out.append(np.concatenate([t, dark]))
    return out[0], out[1], n, pairs_active + pairs_idle


def _jitter_ps(det: DetectorSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    if det.jitter.model == "none":
        return np.zeros(size, dtype=np.int64)
    j = np.rint(det.jitter.sample(rng, size))
    return np.clip(j, -JITTER_CLIP_PS, JITTER_CLIP_PS).astype(np.int64)


def _dark_counts(det: DetectorSpec, rng: np.random.Generator, t0: int, t1: int) -> np.ndarray:
    lam = det.dark_rate_hz * (t1 - t0) * 1e-12
    if lam <= 0:
        return np.zeros(0, dtype=np.int64)
    k = rng.poisson(lam)
    return rng.integers(t0, t1, size=k, dtype=np.int64) if t1 > t0 else np.zeros(0, np.int64)


def enforce_dead_time(times: np.ndarray, dead_ps: float, last_kept: Optional[int] = None):
    """Earliest-wins dead-time pruning of a sorted array.

    Returns the kept times and the last kept time (for continuing on the next
    segment).
    """
    if dead_ps <= 0 or len(times) == 0:
        return times, (int(times[-1]) if len(times) else last_kept)
    gaps = np.diff(times)
    first_ok = last_kept is None or times[0] - last_kept >= dead_ps
    if first_ok and (len(gaps) == 0 or gaps.min() >= dead_ps):
        return times, int(times[-1])
    keep = np.zeros(len(times), dtype=bool)
    last = last_kept
    for k, t in enumerate(times.tolist()):
        if last is None or t - last >= dead_ps:
            keep[k] = True
            last = t
    return times[keep], last


def _chunk_results(plan: _Plan, threads: int) -> Iterator:
    if threads <= 1:
        for c in range(plan.n_chunks):
            yield _simulate_chunk(plan, c)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = deque()
        nxt = 0
        try:
            while nxt < plan.n_chunks or pending:
                while nxt < plan.n_chunks and len(pending) < 2 * threads:
                    pending.append(pool.submit(_simulate_chunk, plan, nxt))
                    nxt += 1
                yield pending.popleft().result()
        finally:
            for f in pending:
                f.cancel()


def iter_segments(config: ExperimentConfig, threads: Optional[int] = None) -> Iterator[Segment]:
    """Yield finalised stream segments in time order, one per simulated chunk.

    Every event in a segment is earlier than the segment's watermark and later
    than everything already yielded.
    """
    plan = _Plan(config)
    threads = threads or os.cpu_count() or 1
    buf_s = np.zeros(0, dtype=np.int64)
    buf_i = np.zeros(0, dtype=np.int64)
    last = {"signal": None, "idler": None}
    for c, (s, i, pulses, pairs) in enumerate(_chunk_results(plan, threads)):
        final = c == plan.n_chunks - 1
        _, hi = plan.chunk_bounds(c)
        mark = plan.span if final else int(plan.pulse_times(np.int64(hi))) - plan.guard
        emitted = []
        for arm, buf, new in (("signal", buf_s, s), ("idler", buf_i, i)):
            allev = np.sort(np.concatenate([buf, new]), kind="stable")
            cut = len(allev) if final else int(np.searchsorted(allev, mark, side="left"))
            head, rest = allev[:cut], allev[cut:]
            head = head[(head >= 0) & (head <= plan.span)]
            head, last[arm] = enforce_dead_time(head, config.detector(arm).dead_time_ps, last[arm])
            emitted.append((head, rest))
        (seg_s, buf_s), (seg_i, buf_i) = emitted
        yield Segment(seg_s, seg_i, mark, pulses, pairs)


def simulate(config: ExperimentConfig, threads: Optional[int] = None):
    """Run the experiment; returns (signal stream, idler stream, RunStats).

    With ``run.stop_after_starts`` set, acquisition ends at the requested
    signal (start) count plus ``run.stop_tail_ps`` for late stops.
    """
    run = config.run
    stats = RunStats(seed=run.rng_seed)
    target = run.stop_after_starts
    parts_s, parts_i = [], []
    n_s = 0
    t_end = None
    for seg in iter_segments(config, threads):
        parts_s.append(seg.signal)
        parts_i.append(seg.idler)
        n_s += len(seg.signal)
        stats.pulses += seg.pulses
        stats.pairs += seg.pairs
        stats.chunks += 1
        if target is not None and t_end is None and n_s >= target:
            all_s = np.concatenate(parts_s)
            parts_s = [all_s]
            t_end = int(all_s[target - 1]) + int(run.stop_tail_ps)
        if t_end is not None and seg.watermark_ps >= t_end:
            break
    sig = np.concatenate(parts_s) if parts_s else np.zeros(0, np.int64)
    idl = np.concatenate(parts_i) if parts_i else np.zeros(0, np.int64)
    span = int(math.ceil(run.n_pulses * config.train.period_ps))
    if t_end is not None:
        stats.stopped_on_starts = True
        sig = sig[:target]
        idl = idl[idl <= t_end]
        span = min(span, t_end)
    stats.singles_signal, stats.singles_idler = len(sig), len(idl)
    return (TimestampStream("signal", sig, span), TimestampStream("idler", idl, span), stats)


def apply_detector(arrivals_ps, det: DetectorSpec, rng: np.random.Generator,
                   span_ps: Optional[int] = None, detector_id: str = "signal") -> TimestampStream:
    """Thin, add dark counts and jitter, sort and apply dead time to photon arrivals."""
    arr = np.asarray(arrivals_ps, dtype=np.int64)
    if span_ps is None:
        span_ps = int(arr.max()) if len(arr) else 0
    kept = arr[rng.random(len(arr)) < det.survival]
    kept = kept + _jitter_ps(det, rng, len(kept))
    dark = _dark_counts(det, rng, 0, span_ps + 1)
    t = np.sort(np.concatenate([kept, dark]), kind="stable")
    t = t[(t >= 0) & (t <= span_ps)]
    t, _ = enforce_dead_time(t, det.dead_time_ps)
    return TimestampStream(detector_id, t, span_ps)
