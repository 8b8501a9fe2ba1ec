import datetime as dt

import numpy as np
import pytest

from sigmoidvol.calibration import CalibrationConfig, FitResult, bootstrap, calibration_nodes
from sigmoidvol.cli import _bundled, load_grid
from sigmoidvol.market_data import (
    GridSpec,
    MarketContext,
    build_grid,
    build_terms,
    default_sigma_star,
    load_context,
    load_quotes,
)
from sigmoidvol.smile import ModelConfig, SmileParams

XLF_SPOT = 22.64
XLF_RATE = 0.0148


class Xlf:
    """Bundled XLF market with its 23-strike grid."""

    def __init__(self):
        self.context = load_context(_bundled("xlf_context.json"))
        self.quotes = load_quotes(_bundled("xlf_quotes.csv"))
        self.terms = build_terms(self.quotes, self.context)
        self.sigma_star = default_sigma_star(self.terms)
        self.grid = load_grid(_bundled("xlf_grid.json"), self.terms, self.context, self.sigma_star)
        self.nodes = calibration_nodes(self.grid.chi)
        self.config = CalibrationConfig()
        self.model = self.config.model(self.sigma_star)


@pytest.fixture(scope="session")
def xlf():
    return Xlf()


@pytest.fixture(scope="session")
def xlf_fits(xlf):
    return bootstrap(xlf.terms, xlf.nodes, xlf.config, xlf.sigma_star)


@pytest.fixture(scope="session")
def xlf_surface(xlf, xlf_fits):
    from sigmoidvol.surface import build_surface

    return build_surface(xlf_fits, xlf.grid, xlf.model, xlf.terms)


def flat_fit(T, F, sigma, sigma_star):
    """Calibrated-looking FitResult for a flat smile w = sigma^2 T."""
    params = SmileParams(w_c=sigma * sigma * T, s_c=0.0, c=0.0, s=0.0, kurt=0.0, alpha=1.0, beta=1.0)
    return FitResult(maturity=T, forward=F, sigma_star=sigma_star, status="calibrated", mode="full", params=params)


def flat_market(expiries, sigma=0.2, spot=100.0, rate=0.0, n_z=41, gamma=5.0):
    ctx = MarketContext(valuation_date=dt.date(2020, 1, 1), spot=spot, rate=rate)
    grid = build_grid(GridSpec(expiries=tuple(expiries), mode="z_band", gamma=gamma, n_z=n_z), ctx, sigma)
    fits = [flat_fit(T, F, sigma, sigma) for T, F in zip(grid.expiries, grid.forwards)]
    return ctx, grid, fits, ModelConfig(sigma_star=sigma)


def random_params(rng, n):
    """Draws inside the calibrator box with w_C > 0 and |alpha|, |beta| >= 0.1."""
    out = []
    for _ in range(n):
        steep = rng.uniform(0.1, 5.0, 2) * rng.choice([-1.0, 1.0], 2)
        out.append(
            SmileParams(
                w_c=rng.uniform(1e-3, 0.5),
                s_c=rng.uniform(-0.5, 0.5),
                c=rng.uniform(-2.0, 2.0),
                s=rng.uniform(-2.0, 2.0),
                kurt=rng.uniform(-1.0, 5.0),
                alpha=float(steep[0]),
                beta=float(steep[1]),
            )
        )
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
