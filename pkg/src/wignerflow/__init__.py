"""Deformed Wigner matrices: MDE densities, deterministic resolvent chains,
characteristic flow, and Monte Carlo verification of decorrelation and
local laws."""

from . import det_approx, ensemble, flow, matrix_core, mde, verify
from .det_approx import ControlParams, SpectralPair, control_params, regularize
from .matrix_core import SpectralDecomposition, eigh, normalized_trace
from .mde import Deformation, MdeSolution, density, kappa_bulk, quantiles, solve_mde, stieltjes
from .verify import ExperimentConfig, ScalingReport, default_config, smoke_config

__version__ = "0.1.0"

__all__ = [
    "ControlParams",
    "Deformation",
    "ExperimentConfig",
    "MdeSolution",
    "ScalingReport",
    "SpectralDecomposition",
    "SpectralPair",
    "control_params",
    "default_config",
    "density",
    "det_approx",
    "eigh",
    "ensemble",
    "flow",
    "kappa_bulk",
    "matrix_core",
    "mde",
    "normalized_trace",
    "quantiles",
    "regularize",
    "smoke_config",
    "solve_mde",
    "stieltjes",
    "verify",
    "__version__",
]
