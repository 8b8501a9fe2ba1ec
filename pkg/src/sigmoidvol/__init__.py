"""Sigmoid-polynomial implied volatility smiles and arbitrage-free surfaces."""

from .calibration import CalibrationConfig, FitResult, WeightConfig, bootstrap, fit_term
from .errors import ArbitrageError, InputError, OptimizerError, SigmoidVolError
from .kernels import BACKEND
from .market_data import GridSpec, MarketContext, MarketQuote, TermQuotes, build_grid, build_terms, load_market
from .optimizer import CMAESConfig
from .smile import ModelConfig, SmileParams, eval_w, eval_w_derivs
from .surface import InterpolatorConfig, SurfaceGrid, build_surface, implied_density, local_vol
from .svi_baseline import SviParams, svi_fit

__version__ = "0.1.0"

__all__ = [
    "ArbitrageError",
    "BACKEND",
    "CMAESConfig",
    "CalibrationConfig",
    "FitResult",
    "GridSpec",
    "InputError",
    "InterpolatorConfig",
    "MarketContext",
    "MarketQuote",
    "ModelConfig",
    "OptimizerError",
    "SigmoidVolError",
    "SmileParams",
    "SurfaceGrid",
    "SviParams",
    "TermQuotes",
    "WeightConfig",
    "bootstrap",
    "build_grid",
    "build_surface",
    "build_terms",
    "eval_w",
    "eval_w_derivs",
    "fit_term",
    "implied_density",
    "load_market",
    "local_vol",
    "svi_fit",
]
