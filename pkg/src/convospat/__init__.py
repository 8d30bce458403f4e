"""Adaptive spatio-temporal process-convolution models for count data at
fixed point locations: tapered sparse weights (global kernel or per-site
Dirichlet weights), AR(1) latent dynamics, MCMC inference, closed-form
correlation diagnostics and WAIC/LMPL model comparison."""

from .frame import Location, SpatialFrame, build_taper_sets, euclidean_distance
from .weights import (GlobalWeightParams, SparseWeights, adaptive_weights,
                      global_kernel_weights, sample_dirichlet)
from .latent import Ar1Params, convolve, phi_moments, precision_matrix, sample_theta_prior
from .model import (ObservationPanel, RegressionParams, log_rate, pointwise_loglik,
                    poisson_loglik, theta_conditional_logdensity)
from .mcmc import (ChainConfig, ChainSampler, ModelState, PosteriorSamples,
                   geweke, joint_log_posterior, run_chains)
from .assess import FitStatistics, ParameterSummary, fit_statistics, lmpl, summarize, waic
from .data import (ListSizeTable, SimulationConfig, expected_counts, load_panel,
                   scale_expected, simulate_dataset, spr, write_panel)

__version__ = "0.1.0"

__all__ = [
    "Location", "SpatialFrame", "build_taper_sets", "euclidean_distance",
    "GlobalWeightParams", "SparseWeights", "adaptive_weights",
    "global_kernel_weights", "sample_dirichlet",
    "Ar1Params", "convolve", "phi_moments", "precision_matrix", "sample_theta_prior",
    "ObservationPanel", "RegressionParams", "log_rate", "pointwise_loglik",
    "poisson_loglik", "theta_conditional_logdensity",
    "ChainConfig", "ChainSampler", "ModelState", "PosteriorSamples",
    "geweke", "joint_log_posterior", "run_chains",
    "FitStatistics", "ParameterSummary", "fit_statistics", "lmpl", "summarize", "waic",
    "ListSizeTable", "SimulationConfig", "expected_counts", "load_panel",
    "scale_expected", "simulate_dataset", "spr", "write_panel",
]
