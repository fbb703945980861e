"""Bayesian synthetic control: latent factor model, NUTS sampler, SCM baseline and study harness."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # source checkout without install
    __version__ = "0.1.0"

from .config import HyperParams, parse_config, preset
from .model import ModelContext, build_context, grad_log_posterior, log_posterior
from .nuts import SamplerSettings, Trace, sample
from .panel import PanelData, load_csv
from .pca import FactorPrior, fit_pca_prior

__all__ = [
    "HyperParams", "parse_config", "preset", "ModelContext", "build_context",
    "grad_log_posterior", "log_posterior", "SamplerSettings", "Trace", "sample",
    "PanelData", "load_csv", "FactorPrior", "fit_pca_prior", "__version__",
]
