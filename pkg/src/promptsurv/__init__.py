"""Prompt-tuned survival analysis on tiled gigapixel images."""

__version__ = "0.1.0"

from .errors import EmptySlideError, PromptSurvError, StaleCacheError, UndefinedMetricError
from .survival import (
    EPS,
    HazardPrediction,
    SurvivalCurveEstimate,
    SurvivalLabel,
    TimeBinning,
    concordance_index,
    discretize_time,
    hazard_to_survival,
    kaplan_meier,
    nll_from_hazards,
    nll_survival_loss,
    risk_from_survival,
    stratify_by_median_risk,
)

__all__ = [
    "EPS",
    "EmptySlideError",
    "HazardPrediction",
    "PromptSurvError",
    "StaleCacheError",
    "SurvivalCurveEstimate",
    "SurvivalLabel",
    "TimeBinning",
    "UndefinedMetricError",
    "concordance_index",
    "discretize_time",
    "hazard_to_survival",
    "kaplan_meier",
    "nll_from_hazards",
    "nll_survival_loss",
    "risk_from_survival",
    "stratify_by_median_risk",
]
