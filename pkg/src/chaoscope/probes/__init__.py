"""Measurement procedures over a model (or linear oracle) and its reference spectrum."""

from .boundary import (
    BoundaryResult,
    NoNearTie,
    SearchBudgetExhausted,
    angular_boundary,
    boundary_search,
    find_near_tie,
    spectrum_boundary,
    verify_boundaries,
)
from .common import Regime, RegimeThresholds, SweepConfig, log_grid, perturb, random_directions
from .decision import DecisionMap, decision_map, grid_metrics
from .instability import InstabilitySummary, InstabilitySweep, Staircase, instability_sweep, micro_continuity
from .sweeps import (
    GainTable,
    SweepRecord,
    directional_sweep,
    is_ordered_trichotomy,
    layerwise_gain,
    noise_averaged_kappa,
    smoothed_regimes,
)

__all__ = [
    "BoundaryResult",
    "DecisionMap",
    "GainTable",
    "InstabilitySummary",
    "InstabilitySweep",
    "NoNearTie",
    "Regime",
    "RegimeThresholds",
    "SearchBudgetExhausted",
    "Staircase",
    "SweepConfig",
    "SweepRecord",
    "angular_boundary",
    "boundary_search",
    "decision_map",
    "directional_sweep",
    "find_near_tie",
    "grid_metrics",
    "instability_sweep",
    "is_ordered_trichotomy",
    "layerwise_gain",
    "log_grid",
    "micro_continuity",
    "noise_averaged_kappa",
    "perturb",
    "random_directions",
    "smoothed_regimes",
    "spectrum_boundary",
    "verify_boundaries",
]
