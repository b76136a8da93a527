"""Simulation and analysis toolkit for sequential time-bin entangled photon pairs.

Modules: ``physics_core`` (domain types, state bookkeeping), ``analytic``
(closed-form predictions), ``montecarlo`` (event-level timestamp simulation),
``analysis`` (time-interval histograms, CAR, peak widths, fringe fits) and
``cli`` (scenario runner).
"""

from .analysis import (
    CarResult,
    CoincidenceHistogram,
    FringePoint,
    FringeScan,
    TimeIntervalAnalyzer,
    VisibilityFit,
    build_histogram,
    car_from_histogram,
    count_coincidences,
    fit_visibility,
    fwhm_fwtm,
    leakage_free_slot,
    run_fringe_scan,
    temperature_to_phase,
)
from .analytic import (
    FluxEstimate,
    calibrate_jitter,
    car_with_jitter,
    coincidence_fringe,
    estimate_car,
    fringe_with_jitter,
    is_bell_violating,
    jitter_leakage,
    pair_flux,
    predict_visibility,
    visibility_from_car,
)
from .config import Scenario, load_scenario
from .errors import (
    ConfigError,
    DegenerateFit,
    DelayMismatch,
    DomainError,
    NoPeak,
    NoSolution,
    SimulationError,
    UnknownModel,
)
from .montecarlo import (
    ExperimentConfig,
    RunControl,
    RunStats,
    Slot,
    TimestampStream,
    apply_detector,
    iter_segments,
    pair_outcome_probabilities,
    sample_pair_outcome,
    simulate,
)
from .physics_core import (
    DetectorSpec,
    JitterSpec,
    LossBudget,
    MziSpec,
    PulseTrainSpec,
    SourceSpec,
    TimeBinPairState,
    apply_interferometers,
    build_sequential_state,
    reference_budget,
)
from .streamio import read_stream, write_stream

__version__ = "0.1.0"
