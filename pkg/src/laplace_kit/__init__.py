"""Laplace approximations for small multilayer perceptrons in numpy."""

from laplace_kit.curvature import CurvatureEstimate, Subset, estimate
from laplace_kit.errors import ConfigError, LaplaceKitError, NumericError
from laplace_kit.nn import Batch, Categorical, GaussianRegression, MlpSpec, PerLayerPrior, ScalarPrior, train_map
from laplace_kit.posterior import LaplacePosterior, fit, log_marginal_likelihood
from laplace_kit.predictive import predict

__version__ = "0.1.0"

__all__ = [
    "Batch", "Categorical", "ConfigError", "CurvatureEstimate", "GaussianRegression", "LaplaceKitError",
    "LaplacePosterior", "MlpSpec", "NumericError", "PerLayerPrior", "ScalarPrior", "Subset", "estimate",
    "fit", "log_marginal_likelihood", "predict", "train_map",
]
