"""Scenario files: TOML with flat sections, merged over the packaged defaults.

A scenario file only lists what differs from ``presets/baseline.toml``.  Every
key is checked against the schema below; unknown sections or keys, wrong
types and invariant violations raise ``ConfigError`` naming the offending
line.  The seed resolves as ``--seed`` > ``$TBTWIN_SEED`` > ``run.seed``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analytic import calibrate_jitter
from .errors import ConfigError
from .montecarlo import ExperimentConfig, RunControl
from .physics_core import (
    DetectorSpec,
    JitterSpec,
    LossBudget,
    MziSpec,
    PulseTrainSpec,
    SourceSpec,
    check_delay,
)

SEED_ENV = "TBTWIN_SEED"
PRESETS = ("baseline", "ideal")

_F, _I, _S, _B, _L = "float", "int", "str", "bool", "list[str]"
_DETECTOR = {
    "quantum_efficiency": _F, "dark_rate_hz": _F, "window_ps": _F, "dead_time_ps": _F,
    "arm_loss_db": _F, "jitter_model": _S, "jitter_fwhm_ps": _F, "jitter_fwtm_ps": _F,
    "jitter_tail_weight": _F, "jitter_tail_scale_ps": _F, "jitter_core_sigma_ps": _F,
}
_MZI = {"delay_ps": _F, "phase_rad": _F, "insertion_loss_db": _F, "extinction_error": _F}
SCHEMA: dict[str, dict[str, str]] = {
    "train": {"period_ps": _F, "pulse_fwhm_ps": _F, "inter_pulse_phase_rad": _F},
    "source": {"mean_pairs_per_pulse": _F, "pair_number_model": _S},
    "interferometers": {"enabled": _B},
    "mzi_signal": _MZI,
    "mzi_idler": _MZI,
    "detector_signal": _DETECTOR,
    "detector_idler": _DETECTOR,
    "budget": {"arm_split": _S},
    "run": {"n_pulses": _I, "seed": _I, "stop_after_starts": _I, "chunk_size": _I,
            "stop_tail_ps": _I},
    "fringe": {"points": _I, "theta_s_rad": _F},
    "car": {"pulses": _I, "accidental_slots": _I},
    "jitter_measurement": {"period_ps": _F, "pulse_fwhm_ps": _F, "skip_budget_items": _L,
                           "bin_width_ps": _F, "half_range_ps": _F, "coincidences": _I},
}
# free-form label -> dB table
_BUDGET_ITEMS = ("budget", "items")


@dataclass(frozen=True)
class JitterMeasurement:
    period_ps: float
    pulse_fwhm_ps: float
    skip_budget_items: tuple
    bin_width_ps: float
    half_range_ps: float
    coincidences: int


@dataclass(frozen=True)
class Scenario:
    """A resolved scenario file: the experiment plus per-command settings."""

    experiment: ExperimentConfig
    fringe_points: int
    theta_s_rad: float
    car_pulses: int
    car_accidental_slots: int
    jitter: JitterMeasurement
    resolved: Mapping[str, Any]
    source_path: Optional[str] = None

    @property
    def seed(self) -> int:
        return self.experiment.run.rng_seed

    @property
    def config_hash(self) -> str:
        return config_hash(self.resolved)


def config_hash(resolved: Mapping[str, Any]) -> str:
    """sha256 (first 16 hex digits) of the canonical JSON of the resolved table.

    The seed is left out; it is reported next to the hash instead.
    """
    body = copy.deepcopy(dict(resolved))
    body.get("run", {}).pop("seed", None)
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("tbtwin").joinpath("presets").joinpath(f"{name}.toml").read_text()


class _Source:
    """Raw TOML text plus a best-effort key -> line index for error messages."""

    def __init__(self, text: str, name: str):
        self.text = text
        self.name = name

    def line_of(self, section: str, key: Optional[str] = None) -> Optional[int]:
        current = None
        header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
        for n, line in enumerate(self.text.splitlines(), 1):
            m = header.match(line)
            if m:
                current = m.group(1).replace('"', "").replace(" ", "")
                if key is None and current == section:
                    return n
                continue
            if key is not None and current == section:
                if re.match(rf'^\s*"?{re.escape(key)}"?\s*=', line):
                    return n
        return None

    def where(self, section: str, key: Optional[str] = None) -> str:
        n = self.line_of(section, key)
        if n is None and key is not None:
            n = self.line_of(section)
        return f"{self.name}:{n}" if n else self.name


def _parse(text: str, name: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        where = f"{name}:{m.group(1)}" if m else name
        raise ConfigError(f"{where}: {exc}") from None


def _check_type(value, kind: str) -> bool:
    if kind == _F:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == _I:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _S:
        return isinstance(value, str)
    if kind == _B:
        return isinstance(value, bool)
    return isinstance(value, list) and all(isinstance(v, str) for v in value)


def _validate(table: dict, src: _Source) -> None:
    for section, body in table.items():
        if section not in SCHEMA:
            raise ConfigError(f"{src.where(section)}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{src.where(section)}: [{section}] must be a table")
        for key, value in body.items():
            if (section, key) == _BUDGET_ITEMS:
                if not isinstance(value, dict):
                    raise ConfigError(f"{src.where(section, key)}: budget.items must be a table")
                for label, db in value.items():
                    if not _check_type(db, _F):
                        raise ConfigError(
                            f"{src.where('budget.items', label)}: loss {label!r} must be a number")
                continue
            kind = SCHEMA[section].get(key)
            if kind is None:
                raise ConfigError(f"{src.where(section, key)}: unknown key {section}.{key}")
            if not _check_type(value, kind):
                raise ConfigError(f"{src.where(section, key)}: {section}.{key} must be {kind}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for section, body in over.items():
        dst = out.setdefault(section, {})
        for key, value in body.items():
            dst[key] = copy.deepcopy(value)
    return out


def _jitter(d: dict) -> JitterSpec:
    model = d.get("jitter_model", "none")
    if model == "none":
        return JitterSpec()
    fwhm = d.get("jitter_fwhm_ps")
    if fwhm is None:
        raise ConfigError("jitter_fwhm_ps is required unless jitter_model is 'none'")
    if model == "gaussian":
        return JitterSpec("gaussian", fwhm, d.get("jitter_fwtm_ps"))
    if model != "gaussian_exp_tail":
        raise ConfigError(f"unknown jitter_model {model!r}")
    if "jitter_tail_weight" in d:
        return JitterSpec(model, fwhm, d.get("jitter_fwtm_ps"), d["jitter_tail_weight"],
                          d.get("jitter_tail_scale_ps", 1.0), d.get("jitter_core_sigma_ps"))
    if "jitter_fwtm_ps" not in d:
        raise ConfigError("gaussian_exp_tail needs jitter_fwtm_ps or an explicit tail")
    return calibrate_jitter(fwhm, d["jitter_fwtm_ps"])


def _detector(d: dict) -> DetectorSpec:
    return DetectorSpec(
        arm_loss_db=d.get("arm_loss_db", 0.0),
        quantum_efficiency=d.get("quantum_efficiency", 0.02),
        dark_rate_hz=d.get("dark_rate_hz", 4.0e4),
        window_ps=d.get("window_ps", 75.0),
        jitter=_jitter(d),
        dead_time_ps=d.get("dead_time_ps", 0.0),
    )


def _build(t: dict, src: _Source, seed: int) -> Scenario:
    def section(name, fn, key=None):
        try:
            return fn(t.get(name, {}))
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(f"{src.where(name, key)}: [{name}] {exc}") from None

    train = section("train", lambda d: PulseTrainSpec(**d))
    source = section("source", lambda d: SourceSpec(**d))
    det_s = section("detector_signal", _detector)
    det_i = section("detector_idler", _detector)
    budget = section("budget", lambda d: LossBudget(tuple(d.get("items", {}).items()),
                                                     d.get("arm_split", "split_evenly")))

    def run_fn(d):
        stop = d.get("stop_after_starts", 1_000_000)
        return RunControl(n_pulses=d.get("n_pulses", 10 ** 8), rng_seed=seed,
                          stop_after_starts=stop if stop > 0 else None,
                          chunk_size=d.get("chunk_size", 10 ** 10),
                          stop_tail_ps=d.get("stop_tail_ps", 100_000))

    run = section("run", run_fn)
    mzi_s = mzi_i = None
    if t.get("interferometers", {}).get("enabled", True):
        def mzi(d):
            spec = MziSpec(**d)
            check_delay(spec, train.period_ps)
            return spec

        mzi_s = section("mzi_signal", mzi, "delay_ps")
        mzi_i = section("mzi_idler", mzi, "delay_ps")
    exp = section("interferometers", lambda _: ExperimentConfig(
        train, source, det_s, det_i, budget, run, mzi_s, mzi_i))

    fr, car, jm = t.get("fringe", {}), t.get("car", {}), t.get("jitter_measurement", {})
    jit = section("jitter_measurement", lambda d: JitterMeasurement(
        d["period_ps"], d["pulse_fwhm_ps"], tuple(d["skip_budget_items"]),
        d["bin_width_ps"], d["half_range_ps"], d["coincidences"]))
    if jit.coincidences < 1 or jit.bin_width_ps <= 0 or jit.half_range_ps <= 0:
        raise ConfigError(f"{src.where('jitter_measurement')}: sizes must be positive")
    if fr.get("points", 12) < 4:
        raise ConfigError(f"{src.where('fringe', 'points')}: a fringe scan needs >= 4 points")
    if car.get("pulses", 1) < 1 or car.get("accidental_slots", 4) < 4:
        raise ConfigError(f"{src.where('car')}: need pulses >= 1 and accidental_slots >= 4")
    resolved = copy.deepcopy(t)
    resolved.setdefault("run", {})["seed"] = seed
    return Scenario(exp, fr.get("points", 12), float(fr.get("theta_s_rad", 0.0)),
                    car.get("pulses", 10 ** 8), car.get("accidental_slots", 200), jit,
                    resolved, src.name)


def load_scenario(path=None, *, preset: Optional[str] = None, seed: Optional[int] = None,
                  overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
                  environ: Optional[Mapping[str, str]] = None) -> Scenario:
    """Read a scenario file (or just a preset) on top of the baseline defaults.

    ``overrides`` is a ``{section: {key: value}}`` table applied last, so it
    takes part in the config hash; command-line flags use it.
    """
    environ = os.environ if environ is None else environ
    base_src = _Source(_preset_text("baseline"), "baseline.toml")
    table = _parse(base_src.text, base_src.name)
    src = base_src
    layers = []
    if preset is not None and preset != "baseline":
        layers.append(_Source(_preset_text(preset), f"{preset}.toml"))
    if path is not None:
        p = Path(path)
        try:
            layers.append(_Source(p.read_text(), str(p)))
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror}") from None
    for layer in layers:
        parsed = _parse(layer.text, layer.name)
        _validate(parsed, layer)
        if "items" in parsed.get("budget", {}):
            # an explicit loss table replaces the default one wholesale
            table.get("budget", {}).pop("items", None)
        for det in ("detector_signal", "detector_idler"):
            if "jitter_model" in parsed.get(det, {}):
                # a new jitter model starts from a clean slate
                for k in [k for k in table.get(det, {}) if k.startswith("jitter_")]:
                    del table[det][k]
        table = _merge(table, parsed)
        src = layer
    if overrides:
        over = {s: dict(v) for s, v in overrides.items()}
        _validate(over, _Source("", "command line"))
        table = _merge(table, over)

    resolved_seed = table.get("run", {}).get("seed", 0)
    if environ.get(SEED_ENV, "").strip():
        try:
            resolved_seed = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"${SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None
    if seed is not None:
        resolved_seed = int(seed)
    if not 0 <= resolved_seed < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return _build(table, src, resolved_seed)


def default_scenario(**kw) -> Scenario:
    return load_scenario(None, **kw)

