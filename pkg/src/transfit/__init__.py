"""Penalized monotone-spline fitting of semi-parametric linear
transformation models to interval-censored survival data."""

from .dataio import (
    Censoring,
    Dataset,
    IntervalObservation,
    load_breast_cosmesis,
    parse_dataset,
    serialize_dataset,
    validate,
)
from .inference import bootstrap_band, estimate_info, wald_ci
from .linkfam import PH, PO, LinkSpec
from .nested import FitOptions, FitResult, fit
from .simlab import SimConfig, mc_replicate, power_curve, simulate_dataset
from .spline import SplineBasis, make_knots

__version__ = "0.1.0"

__all__ = [
    "Censoring",
    "Dataset",
    "IntervalObservation",
    "LinkSpec",
    "PH",
    "PO",
    "SplineBasis",
    "SimConfig",
    "FitOptions",
    "FitResult",
    "fit",
    "make_knots",
    "parse_dataset",
    "serialize_dataset",
    "validate",
    "load_breast_cosmesis",
    "estimate_info",
    "wald_ci",
    "bootstrap_band",
    "simulate_dataset",
    "mc_replicate",
    "power_curve",
    "__version__",
]
