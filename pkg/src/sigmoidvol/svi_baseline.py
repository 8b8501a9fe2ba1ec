"""Raw SVI smile as a comparison baseline.

    w(chi) = a + b (rho (chi - m) + sqrt((chi - m)^2 + sigma^2))

Fits use the same weighted objective, optimizer and grid checks as the
sigmoid model so that both are scored on identical points.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .calibration import CalibrationConfig, term_weights
from .errors import InputError, OptimizerError
from .market_data import TermQuotes
from .no_arbitrage import TOL, VERTICAL_CONVENTIONS, NoArbReport
from .optimizer import minimize

SVI_NAMES = ("a", "b", "rho", "m", "sigma")
SVI_LOWER = np.array([-1.0, 0.0, -0.999, -3.0, 1e-4])
SVI_UPPER = np.array([1.0, 5.0, 0.999, 3.0, 3.0])
SVI_MODES = ("positive_w", "full")


@dataclass(frozen=True)
class SviParams:
    a: float
    b: float
    rho: float
    m: float
    sigma: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("SVI parameters must be finite")
        if self.b < 0.0:
            raise ValueError("b must be non-negative")
        if abs(self.rho) > 1.0:
            raise ValueError("|rho| must not exceed 1")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")
        if self.min_variance < -TOL:
            raise ValueError("minimum total variance a + b sigma sqrt(1 - rho^2) is negative")

    @property
    def min_variance(self) -> float:
        return self.a + self.b * self.sigma * math.sqrt(max(1.0 - self.rho * self.rho, 0.0))

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.rho, self.m, self.sigma], dtype=float)

    @classmethod
    def from_array(cls, x) -> "SviParams":
        return cls(*(float(v) for v in np.asarray(x, dtype=float)))

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _svi_batch(P, chi):
    a, b, rho, m, sig = (P[:, i : i + 1] for i in range(5))
    x = chi[None, :] - m
    r = np.sqrt(x * x + sig * sig)
    w = a + b * (rho * x + r)
    wc = b * (rho + x / r)
    wcc = b * sig * sig / r**3
    return w, wc, wcc


def svi_w(params: SviParams, chi):
    """Total variance at log-moneyness ``chi``."""
    chi_a = np.atleast_1d(np.asarray(chi, dtype=float))
    w = _svi_batch(params.as_array()[None, :], chi_a.ravel())[0][0]
    return float(w[0]) if np.ndim(chi) == 0 else w.reshape(np.shape(chi))


def svi_derivs(params: SviParams, chi):
    """(w, w_chi, w_chichi) at ``chi``."""
    chi_a = np.atleast_1d(np.asarray(chi, dtype=float))
    out = _svi_batch(params.as_array()[None, :], chi_a.ravel())
    return tuple(v[0].reshape(np.shape(chi)) for v in out)


def svi_lee_margins(P) -> np.ndarray:
    """(phi+, 2 - phi+, -phi-, phi- + 2) with phi+- = +-b (1 +- rho)."""
    P = np.atleast_2d(P)
    up = P[:, 1] * (1.0 + P[:, 2])
    dn = -P[:, 1] * (1.0 - P[:, 2])
    return np.stack([up, 2.0 - up, -dn, dn + 2.0], axis=1)


class SviProblem:
    """Vectorised SVI objective and constraints in unit-box coordinates."""

    def __init__(self, term: TermQuotes, chi_nodes, sigma_star: float, config: CalibrationConfig,
                 mode: str, prior: Optional[tuple] = None):
        if mode not in SVI_MODES:
            raise InputError(f"unknown SVI mode {mode!r}; choose from {SVI_MODES}")
        self.mode = mode
        self.chiq = term.chi
        self.wq = term.w
        self.wt = term_weights(term, sigma_star, config.weights)
        self.chin = np.unique(np.asarray(chi_nodes, dtype=float))
        self.wprev = np.full(self.chin.size, np.nan)
        if prior is not None:
            self.wprev = np.asarray(prior(self.chin), dtype=float)
        self.vconv = VERTICAL_CONVENTIONS[config.vertical_bound_convention]
        self.wscale = float(np.mean(self.wq))
        self.lo = SVI_LOWER
        self.span = SVI_UPPER - SVI_LOWER
        width = float(np.ptp(self.chiq)) if self.chiq.size > 1 else 0.1
        width = max(width, 1e-3)
        typical = np.array([self.wscale, self.wscale / width, 0.3, 0.25 * width, 0.25 * width])
        self.scales = typical / self.span

    def to_params(self, U):
        return self.lo + np.atleast_2d(U) * self.span

    def to_unit(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lo) / self.span, 0.0, 1.0)

    def evaluate_params(self, P):
        P = np.atleast_2d(P)
        w, _, _ = _svi_batch(P, self.chiq)
        obj = ((w - self.wq) ** 2 * self.wt).sum(axis=1)
        mv = P[:, 0] + P[:, 1] * P[:, 4] * np.sqrt(np.maximum(1.0 - P[:, 2] ** 2, 0.0))
        pen = np.minimum(mv / self.wscale, 0.0) ** 2
        worst = -mv
        if self.mode == "full":
            wn, wc, wcc = _svi_batch(P, self.chin)
            node = kernels.node_margins(wn, wc, wcc, self.chin[None, :], self.wprev[None, :], self.vconv)
            p2, w2 = kernels.penalty_terms(node, svi_lee_margins(P), np.zeros((P.shape[0], 0)), self.wscale)
            pen = pen + p2
            worst = np.maximum(worst, w2)
        return obj, pen, worst

    def __call__(self, U):
        return self.evaluate_params(self.to_params(U))


def svi_initial_guess(term: TermQuotes) -> np.ndarray:
    """Wing slopes from the outermost quotes, vertex at the lowest variance."""
    chi, w = term.chi, term.w
    j = int(np.argmin(w))
    if chi.size >= 2:
        sl = (w[1] - w[0]) / (chi[1] - chi[0])
        sr = (w[-1] - w[-2]) / (chi[-1] - chi[-2])
    else:
        sl, sr = -0.1, 0.1
    sl, sr = min(sl, 0.0), max(sr, 0.0)
    b = max(0.5 * (sr - sl), 1e-3)
    rho = float(np.clip((sr + sl) / (sr - sl) if sr > sl else 0.0, -0.9, 0.9))
    sigma = max(0.25 * float(np.ptp(chi)) if chi.size > 1 else 0.1, 1e-3)
    a = float(w[j]) - b * sigma * math.sqrt(1.0 - rho * rho)
    x0 = np.array([a, b, rho, float(chi[j]), sigma])
    return np.clip(x0, SVI_LOWER, SVI_UPPER)


@dataclass
class SviFitResult:
    maturity: float
    mode: str
    params: SviParams
    objective: float
    model_iv: np.ndarray
    market_iv: np.ndarray
    report: NoArbReport
    evals: int
    wall_time: float

    @property
    def rmse_iv(self) -> float:
        return float(np.sqrt(np.mean((self.model_iv - self.market_iv) ** 2)))

    @property
    def grid_ok(self) -> bool:
        return self.report.ok

    def to_dict(self) -> dict:
        return {
            "maturity": self.maturity,
            "mode": self.mode,
            "params": self.params.to_dict(),
            "objective": self.objective,
            "rmse_iv": self.rmse_iv,
            "grid_ok": self.grid_ok,
            "evals": self.evals,
        }


def svi_report(params: SviParams, T: float, chi_nodes, prior=None, convention: str = "corrected") -> NoArbReport:
    chi = np.unique(np.asarray(chi_nodes, dtype=float))
    w, wc, wcc = svi_derivs(params, chi)
    wprev = np.full(chi.shape, np.nan) if prior is None else np.asarray(prior(chi), dtype=float)
    m = kernels.node_margins(w, wc, wcc, chi, wprev, VERTICAL_CONVENTIONS[convention])
    return NoArbReport(
        node_t=np.full(chi.shape, float(T)),
        chi=chi,
        margins=m,
        lee=svi_lee_margins(params.as_array()),
        lee_t=np.array([float(T)]),
    )


def svi_fit(term: TermQuotes, chi_nodes, config: CalibrationConfig, sigma_star: float,
            mode: str = "positive_w", prior=None) -> SviFitResult:
    """Fit raw SVI to one term.

    Args:
        mode: 'positive_w' enforces only a non-negative minimum variance;
            'full' adds every grid check of the sigmoid calibration.
        prior: callable chi -> w of the previous term for the calendar
            check in 'full' mode.

    Raises:
        OptimizerError: no feasible candidate within the budget.
    """
    start = time.perf_counter()
    if len(term) < 1:
        raise InputError("empty term")
    problem = SviProblem(term, chi_nodes, sigma_star, config, mode, prior)
    u0 = problem.to_unit(svi_initial_guess(term))
    res = minimize(problem, u0, config.optimizer, scales=problem.scales)
    if not res.feasible:
        raise OptimizerError(
            f"SVI: no feasible parameters for T={term.maturity:.6g} in {mode} mode",
            {"maturity": term.maturity, "evals": res.evals, **res.best_infeasible},
        )
    x = problem.to_params(res.x)[0]
    params = SviParams.from_array(x)
    w = np.maximum(svi_w(params, term.chi), 0.0)
    return SviFitResult(
        maturity=term.maturity,
        mode=mode,
        params=params,
        objective=res.objective,
        model_iv=np.sqrt(w / term.maturity),
        market_iv=term.iv,
        report=svi_report(params, term.maturity, chi_nodes, prior, config.vertical_bound_convention),
        evals=res.evals,
        wall_time=time.perf_counter() - start,
    )


def svi_bootstrap(terms: Sequence[TermQuotes], chi_nodes, config: CalibrationConfig, sigma_star: float,
                  mode: str = "positive_w") -> list:
    """Term-by-term SVI fits; each failure is recorded as an OptimizerError."""
    out = []
    prior = None
    for term in sorted(terms, key=lambda t: t.maturity):
        try:
            fr = svi_fit(term, chi_nodes, config, sigma_star, mode, prior)
        except OptimizerError as exc:
            out.append(exc)
            continue
        out.append(fr)
        if mode == "full":
            prior = (lambda p: (lambda chi: svi_w(p, chi)))(fr.params)
    return out
