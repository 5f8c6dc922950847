"""Spliced Gamma-Generalized Pareto probabilistic wind speed forecasting."""

__version__ = "0.1.0"

from .datamodel import RollingWindow, Station, StationSeries, make_windows
from .distributions import GPQ, BernoulliLogit, GammaQ, VonMises
from .forecast import FitConfig, PredictiveSample, SimulationParams, simulate_dataset
from .scoring import ScoreConfig, ScoreReport, crps_empirical, quantile_loss, twcrps

__all__ = [
    "__version__",
    "Station",
    "StationSeries",
    "RollingWindow",
    "make_windows",
    "GammaQ",
    "GPQ",
    "BernoulliLogit",
    "VonMises",
    "FitConfig",
    "PredictiveSample",
    "SimulationParams",
    "simulate_dataset",
    "ScoreConfig",
    "ScoreReport",
    "crps_empirical",
    "twcrps",
    "quantile_loss",
]
