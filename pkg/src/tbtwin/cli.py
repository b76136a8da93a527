"""``tbtwin`` command-line scenario runner.

Every command writes CSV (stdout or ``--out``) whose first lines are ``#``
comments carrying the command, the config hash and the seed.  Nothing
time- or host-dependent is written, so a rerun with the same inputs is
byte-identical whatever ``--threads`` is.

Exit codes: 0 ok, 2 configuration or usage, 3 simulation, 4 analysis.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    TimeIntervalAnalyzer,
    build_histogram,
    car_from_histogram,
    fit_visibility,
    fwhm_fwtm,
    leakage_free_slot,
    run_fringe_scan,
)
from .analytic import (
    car_with_jitter,
    estimate_car,
    fringe_with_jitter,
    is_bell_violating,
    jitter_leakage,
    pair_flux,
    predict_visibility,
    two_point_visibility,
    visibility_from_car,
)
from .config import PRESETS, Scenario, load_scenario
from .errors import (
    ConfigError,
    DegenerateFit,
    DomainError,
    NoPeak,
    NoSolution,
    SimulationError,
    UnknownModel,
)
from .montecarlo import ExperimentConfig, iter_segments, simulate
from .physics_core import PulseTrainSpec
from .streamio import read_stream, write_stream

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_ANALYSIS = 0, 2, 3, 4
# hard ceiling on pulses for commands that run until a count is reached
_OPEN_ENDED_PULSES = 10 ** 14


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


class CsvOut:
    """Collects header, rows and footer, then writes them in one go."""

    def __init__(self, command: str, header: Sequence[str]):
        self.lines = [f"# tbtwin {command}"] + [f"# {h}" for h in header]

    def columns(self, *names: str) -> None:
        self.lines.append(",".join(names))

    def row(self, *values) -> None:
        self.lines.append(",".join(fmt(v).replace(",", ";") for v in values))

    def comment(self, text: str) -> None:
        self.lines.append(f"# {text}")

    def write(self, out: Optional[str]) -> None:
        text = "\n".join(self.lines) + "\n"
        if out is None or out == "-":
            sys.stdout.write(text)
        else:
            Path(out).write_text(text)


def _scenario_header(sc: Scenario) -> list[str]:
    return [f"config_hash={sc.config_hash} seed={sc.seed}"]


def _load(args, overrides=None) -> Scenario:
    return load_scenario(args.config, preset=args.preset, seed=args.seed, overrides=overrides)


def cmd_budget(args) -> int:
    sc = _load(args)
    exp = sc.experiment
    b = exp.budget
    qe = exp.det_s.quantum_efficiency
    csv = CsvOut("budget", _scenario_header(sc))
    csv.columns("quantity", "value", "unit")
    for label, db in b.items:
        csv.row(f"loss:{label}", db, "dB")
    csv.row("total_loss", b.total_db, "dB")
    csv.row("per_arm_loss", b.per_arm_db, "dB")
    csv.row("per_arm_transmission", b.per_arm_transmission, "")
    flux = pair_flux(exp.source.mean_pairs_per_pulse, exp.train.rep_rate_hz, b, qe)
    csv.row("source_pair_rate", flux.source_hz, "Hz")
    csv.row("detected_pair_rate", flux.detected_hz, "Hz")
    csv.row("ideal_qe_pair_rate", flux.ideal_qe_hz, "Hz")
    if args.improve_db is not None:
        better = pair_flux(exp.source.mean_pairs_per_pulse, exp.train.rep_rate_hz,
                           b.improved(args.improve_db), qe)
        csv.row("improved_detected_pair_rate", better.detected_hz, "Hz")
        csv.row("improved_ideal_qe_pair_rate", better.ideal_qe_hz, "Hz")
    csv.write(args.out)
    return EXIT_OK


def _direct(exp: ExperimentConfig) -> ExperimentConfig:
    return replace(exp, mzi_s=None, mzi_i=None)


def _car_prediction(exp: ExperimentConfig) -> tuple[float, float]:
    mu = exp.source.mean_pairs_per_pulse
    eta_s, eta_i = exp.arm_efficiency("signal"), exp.arm_efficiency("idler")
    ds, di = exp.det_s, exp.det_i
    window = ds.window_ps
    first = estimate_car(mu, eta_s, eta_i, ds.dark_rate_hz * window * 1e-12,
                         di.dark_rate_hz * window * 1e-12)
    smeared = car_with_jitter(mu, eta_s, eta_i, ds.dark_rate_hz, di.dark_rate_hz,
                              _combined_jitter(exp), exp.train.period_ps, window)
    return first, smeared


def _combined_jitter(exp: ExperimentConfig):
    js, ji = exp.det_s.jitter, exp.det_i.jitter
    if js.model != "none" and ji.model != "none":
        raise ConfigError("jitter on both detectors is not supported by the analytic "
                          "predictors; put the combined jitter on one detector")
    return ji if ji.model != "none" else js


def cmd_estimate(args) -> int:
    sc = _load(args)
    exp = sc.experiment
    jit = _combined_jitter(exp)
    window = exp.det_s.window_ps
    mu = exp.source.mean_pairs_per_pulse
    eta_s, eta_i = exp.arm_efficiency("signal"), exp.arm_efficiency("idler")
    car0, car_j = _car_prediction(exp)
    leak = jitter_leakage(jit, window)
    eps = exp.fringe_epsilon
    c_max, c_min = fringe_with_jitter(mu, eta_s, eta_i, exp.det_s.dark_rate_hz,
                                      exp.det_i.dark_rate_hz, jit, exp.train.period_ps,
                                      window, eps)
    v_fringe = two_point_visibility(c_max, c_min)
    csv = CsvOut("estimate", _scenario_header(sc))
    csv.columns("quantity", "value")
    csv.row("arm_efficiency_signal", eta_s)
    csv.row("arm_efficiency_idler", eta_i)
    csv.row("dark_probability_signal", exp.det_s.dark_probability_per_window)
    csv.row("dark_probability_idler", exp.det_i.dark_probability_per_window)
    csv.row("car_first_order", car0)
    csv.row("car_with_jitter", car_j)
    csv.row("visibility_from_car", visibility_from_car(car0))
    csv.row("jitter_fwhm_ps", jit.realized_widths()[0])
    csv.row("jitter_fwtm_ps", jit.realized_widths()[1])
    csv.row("jitter_tail_weight", jit.tail_weight if jit.model == "gaussian_exp_tail" else 0.0)
    csv.row("jitter_leakage", leak)
    csv.row("fringe_epsilon", eps)
    csv.row("visibility_first_order", predict_visibility(1.0, leak, eps))
    csv.row("visibility_with_jitter", v_fringe)
    csv.row("bell_violating", is_bell_violating(v_fringe))
    csv.write(args.out)
    return EXIT_OK


def _car_flag(res, mean_acc_total: float) -> str:
    if res.true_counts == 0 and res.accidental_counts_mean == 0:
        return "no-coincidences"
    if res.zero_accidental:
        return "zero-accidental"
    # excess over accidentals not significant at 3 sigma
    sigma = res.car * math.sqrt(1 / max(res.true_counts, 1) + 1 / max(mean_acc_total, 1))
    if res.car - 1 < 3 * sigma:
        return "noise-floor"
    return "ok"


def cmd_car(args) -> int:
    sc = _load(args, overrides={"car": {"pulses": args.pulses}} if args.pulses else None)
    exp = _direct(sc.experiment)
    exp = exp.with_run(n_pulses=sc.car_pulses, stop_after_starts=None)
    period, window = exp.train.period_ps, exp.det_s.window_ps
    jit = _combined_jitter(exp)
    skip = leakage_free_slot(jit, period, window) - 1
    n_acc = sc.car_accidental_slots
    reach = skip + (n_acc + 1) // 2 + 1
    half = math.ceil((reach + 0.5) * period)
    # 1-ps bins centred on integer delays
    tia = TimeIntervalAnalyzer(1.0, (-half - 0.5, half + 0.5))
    for seg in iter_segments(exp, args.threads):
        tia.feed(seg.signal, seg.idler, seg.watermark_ps)
    hist = tia.finish()
    res = car_from_histogram(hist, period, window, exclude_slots=skip, max_slots=n_acc)
    flag = _car_flag(res, res.accidental_counts_mean * res.n_accidental_slots)
    car = res.car if flag != "no-coincidences" else math.nan
    first, smeared = _car_prediction(exp)
    csv = CsvOut("car", _scenario_header(sc) + [
        f"pulses={exp.run.n_pulses} starts={hist.n_starts} window_ps={fmt(window)} "
        f"accidental_slots={res.n_accidental_slots} first_accidental_slot={skip + 1}"])
    csv.columns("quantity", "value")
    csv.row("car_measured", car)
    csv.row("true_coincidences", res.true_counts)
    csv.row("accidental_mean", res.accidental_counts_mean)
    csv.row("car_first_order", first)
    csv.row("car_with_jitter", smeared)
    csv.row("relative_to_first_order", car / first - 1 if math.isfinite(first) else math.nan)
    csv.row("flag", flag)
    csv.write(args.out)
    return EXIT_OK


def cmd_fringe(args) -> int:
    over = {}
    if args.points is not None:
        over.setdefault("fringe", {})["points"] = args.points
    if args.theta_s is not None:
        over.setdefault("fringe", {})["theta_s_rad"] = args.theta_s
    if args.starts is not None:
        over.setdefault("run", {})["stop_after_starts"] = args.starts
    sc = _load(args, over or None)
    exp = sc.experiment
    if not exp.has_interferometers:
        raise ConfigError("the fringe scan needs [interferometers] enabled = true")
    exp = replace(exp, mzi_s=replace(exp.mzi_s, phase_rad=sc.theta_s_rad))
    k = sc.fringe_points
    grid = 2 * np.pi * np.arange(k) / k
    scan = run_fringe_scan(exp, grid, args.threads)
    csv = CsvOut("fringe", _scenario_header(sc) + [
        f"points={k} starts_per_point={exp.run.stop_after_starts} "
        f"theta_s_rad={fmt(sc.theta_s_rad)}"])
    csv.columns("theta_i_rad", "theta_sum_rad", "coincidences", "starts")
    for p in scan.points:
        csv.row(p.theta_i_rad, p.theta_i_rad + sc.theta_s_rad, p.coincidences, p.n_starts)
    code = EXIT_OK
    try:
        fit = fit_visibility(scan)
    except DegenerateFit as exc:
        fit = exc.fit
        csv.comment(f"degenerate_fit={exc}")
        code = EXIT_ANALYSIS
    csv.comment(f"visibility={fmt(fit.visibility)}")
    csv.comment(f"visibility_sigma={fmt(fit.visibility_sigma)}")
    csv.comment(f"amplitude={fmt(fit.amplitude)}")
    csv.comment(f"phase_offset_rad={fmt(fit.phase_offset_rad)}")
    csv.comment(f"reduced_chi2={fmt(fit.reduced_chi2)}")
    csv.comment(f"clamped={fmt(fit.clamped)}")
    csv.comment(f"bell_violating={fmt(is_bell_violating(fit.visibility))}")
    csv.write(args.out)
    return code


def jitter_experiment(sc: Scenario) -> ExperimentConfig:
    """Direct-detection setup of the low-repetition-rate jitter measurement."""
    jm, exp = sc.jitter, sc.experiment
    train = PulseTrainSpec(period_ps=jm.period_ps, pulse_fwhm_ps=jm.pulse_fwhm_ps)
    exp = replace(_direct(exp), train=train, budget=exp.budget.without(*jm.skip_budget_items))
    return exp.with_run(n_pulses=_OPEN_ENDED_PULSES, stop_after_starts=None)


def measure_jitter(sc: Scenario, threads: Optional[int] = None, coincidences=None):
    """Accumulate the start-stop histogram until enough coincidences are in.

    Returns the histogram and the number of pulses it took.
    """
    jm = sc.jitter
    target = coincidences or jm.coincidences
    exp = jitter_experiment(sc)
    half_period = jm.period_ps / 2
    tia = TimeIntervalAnalyzer(jm.bin_width_ps, (-jm.half_range_ps, jm.half_range_ps))
    pulses = 0
    for seg in iter_segments(exp, threads):
        tia.feed(seg.signal, seg.idler, seg.watermark_ps)
        pulses += seg.pulses
        if tia.histogram().total_in(-half_period, half_period) >= target:
            return tia.finish(), pulses
    raise SimulationError(f"pulse ceiling reached before {target} coincidences")


def cmd_jitter(args) -> int:
    over = {"jitter_measurement": {"coincidences": args.coincidences}} if args.coincidences else None
    sc = _load(args, over)
    hist, pulses = measure_jitter(sc, args.threads)
    fwhm, fwtm = fwhm_fwtm(hist)
    jm = sc.jitter
    csv = CsvOut("jitter", _scenario_header(sc) + [
        f"period_ps={fmt(jm.period_ps)} pulses={pulses} starts={hist.n_starts} "
        f"bin_width_ps={fmt(jm.bin_width_ps)}"])
    csv.columns("delay_ps", "counts")
    for c, n in zip(hist.centers, hist.counts):
        csv.row(float(c), int(n))
    csv.comment(f"coincidences={hist.total_in(-jm.period_ps / 2, jm.period_ps / 2)}")
    csv.comment(f"fwhm_ps={fmt(fwhm)}")
    csv.comment(f"fwtm_ps={fmt(fwtm)}")
    csv.write(args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    over = {}
    if args.pulses is not None:
        over.setdefault("run", {})["n_pulses"] = args.pulses
    if args.starts is not None:
        over.setdefault("run", {})["stop_after_starts"] = args.starts
    sc = _load(args, over or None)
    exp = _direct(sc.experiment) if args.direct else sc.experiment
    s, i, stats = simulate(exp, args.threads)
    write_stream(args.signal, s)
    write_stream(args.idler, i)
    csv = CsvOut("simulate", _scenario_header(sc))
    csv.columns("quantity", "value")
    for name in ("pulses", "pairs", "singles_signal", "singles_idler", "stopped_on_starts"):
        csv.row(name, getattr(stats, name))
    csv.row("span_ps", s.span_ps)
    csv.write(args.out)
    return EXIT_OK


def _digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_histogram(args) -> int:
    starts = read_stream(args.starts, "signal")
    stops = read_stream(args.stops, "idler")
    lo, hi = args.range
    hist = build_histogram(starts, stops, args.bin_width, (lo, hi))
    csv = CsvOut("histogram", [f"starts_sha256={_digest(args.starts)} "
                               f"stops_sha256={_digest(args.stops)}",
                               f"n_starts={hist.n_starts} n_stops={len(stops)}"])
    csv.columns("delay_ps", "counts")
    for c, n in zip(hist.centers, hist.counts):
        csv.row(float(c), int(n))
    try:
        fwhm, fwtm = fwhm_fwtm(hist)
        csv.comment(f"fwhm_ps={fmt(fwhm)}")
        csv.comment(f"fwtm_ps={fmt(fwtm)}")
    except NoPeak:
        csv.comment("no_peak")
    csv.write(args.out)
    return EXIT_OK


def _min_points(text: str) -> int:
    k = int(text)
    if k < 4:
        raise argparse.ArgumentTypeError("a fringe fit needs at least 4 points")
    return k


def _positive(text: str) -> int:
    k = int(float(text)) if "e" in text.lower() else int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return k


def _nonneg(text: str) -> int:
    k = int(text)
    if k < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return k


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tbtwin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tbtwin {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sim=True):
        sp.add_argument("config", nargs="?", help="scenario TOML (default: baseline values)")
        sp.add_argument("--preset", choices=PRESETS, help="start from a packaged preset")
        sp.add_argument("--seed", type=_nonneg, help="overrides $TBTWIN_SEED and run.seed")
        sp.add_argument("--out", help="output CSV (default: stdout)")
        if sim:
            sp.add_argument("--threads", type=_positive, default=os.cpu_count() or 1,
                            help="worker threads; results do not depend on it")

    sp = sub.add_parser("budget", help="loss budget and pair flux")
    common(sp, sim=False)
    sp.add_argument("--improve-db", type=float, help="also report flux with this much less loss")
    sp.set_defaults(func=cmd_budget)

    sp = sub.add_parser("estimate", help="analytic CAR and visibility predictions")
    common(sp, sim=False)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("car", help="simulated CAR without interferometers")
    common(sp)
    sp.add_argument("--pulses", type=_positive, help="pump pulses to simulate")
    sp.set_defaults(func=cmd_car)

    sp = sub.add_parser("fringe", help="two-photon fringe scan and visibility fit")
    common(sp)
    sp.add_argument("--points", type=_min_points, help="phase settings (>= 4)")
    sp.add_argument("--starts", type=_positive, help="start triggers per point")
    sp.add_argument("--theta-s", type=float, help="signal interferometer phase, rad")
    sp.set_defaults(func=cmd_fringe)

    sp = sub.add_parser("jitter", help="emulated timing-jitter histogram")
    common(sp)
    sp.add_argument("--coincidences", type=_positive, help="coincidences to accumulate")
    sp.set_defaults(func=cmd_jitter)

    sp = sub.add_parser("simulate", help="write detector timestamp streams")
    common(sp)
    sp.add_argument("--pulses", type=_positive)
    sp.add_argument("--starts", type=_nonneg, help="stop after this many starts (0: never)")
    sp.add_argument("--direct", action="store_true", help="remove the interferometers")
    sp.add_argument("--signal", required=True, help="signal stream file (.tbts or .txt)")
    sp.add_argument("--idler", required=True, help="idler stream file (.tbts or .txt)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("histogram", help="start-stop histogram of two stream files")
    sp.add_argument("starts")
    sp.add_argument("stops")
    sp.add_argument("--bin-width", type=float, default=5.0)
    sp.add_argument("--range", type=float, nargs=2, default=(-1500.0, 1500.0),
                    metavar=("LO", "HI"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_histogram)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownModel, DomainError, NoSolution) as exc:
        print(f"tbtwin: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, OverflowError) as exc:
        print(f"tbtwin: simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except (DegenerateFit, NoPeak) as exc:
        print(f"tbtwin: analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
