"""Penalized hidden Markov logit models for binary longitudinal data."""

__version__ = "0.1.0"

from .cv import CvGrid, CvResult, cross_validate, make_folds
from .em import EmConfig, FitResult, fit, run_em
from .estimator import PenalizedHMM
from .inference import (
    Decoding,
    SeReport,
    decode,
    decode_dataset,
    identifiability_check,
    standard_errors,
)
from .io import PanelSchema, RunConfig, add_lag_column, load_panel, save_panel
from .model import (
    HmmParams,
    PanelDataset,
    Posteriors,
    forward_backward,
    observed_loglik,
    penalized_loglik,
    penalty_value,
    response_prob,
)
from .sim import MetricTable, Scenario, mse, pct_variation, run_study, simulate

__all__ = [
    "CvGrid",
    "CvResult",
    "Decoding",
    "EmConfig",
    "FitResult",
    "HmmParams",
    "MetricTable",
    "PanelDataset",
    "PanelSchema",
    "PenalizedHMM",
    "Posteriors",
    "RunConfig",
    "Scenario",
    "SeReport",
    "add_lag_column",
    "cross_validate",
    "decode",
    "decode_dataset",
    "fit",
    "forward_backward",
    "identifiability_check",
    "load_panel",
    "make_folds",
    "mse",
    "observed_loglik",
    "pct_variation",
    "penalized_loglik",
    "penalty_value",
    "response_prob",
    "run_em",
    "run_study",
    "save_panel",
    "simulate",
    "standard_errors",
]
