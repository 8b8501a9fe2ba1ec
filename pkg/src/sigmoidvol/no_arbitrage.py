"""Static no-arbitrage checks on total variance.

Node conditions, with chi = log(K/F) and margins that are non-negative when
satisfied:

* positivity of w,
* butterfly: the Dupire denominator g >= 0,
* vertical spreads: -2 sqrt(w) R(d2) <= w_chi <= 2 sqrt(w) R(-d2), which is
  -1 <= dc/dk <= 0 for the forward-normalised call,
* calendar: w non-decreasing in T at fixed chi,

plus the Lee bounds 0 <= phi+ <= 2 and -2 <= phi- <= 0 on the wing slopes
per unit chi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .black_scholes import bs_call, mills_ratio
from .smile import ModelConfig, SmileParams, eval_w_chi

TOL = 1e-8
CHECK_NAMES = ("positivity", "butterfly", "vertical_lower", "vertical_upper", "calendar")
LEE_NAMES = ("lee_plus_low", "lee_plus_high", "lee_minus_high", "lee_minus_low")
VERTICAL_CONVENTIONS = {"corrected": 0, "as_printed": 1}


def dupire_denominator(w, w_chi, w_chichi, chi):
    """(1 - chi w_chi / (2w))^2 - w_chi^2 / 4 (1/w + 1/4) + w_chichi / 2.

    Raises:
        ValueError: if any w <= 0.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0.0):
        raise ValueError("total variance must be positive")
    out = (1.0 - chi * w_chi / (2.0 * w)) ** 2 - 0.25 * w_chi * w_chi * (1.0 / w + 0.25) + 0.5 * w_chichi
    return out if np.ndim(out) else float(out)


def vertical_spread_bounds(I, K, T, dI_dK, d2, convention: str = "corrected", tol: float = TOL) -> dict:
    """Mills-ratio bracket on K dI/dK.

    Upper: K dI/dK <= R(-d2)/sqrt(T).  Lower, corrected:
    K dI/dK >= -R(d2)/sqrt(T); as printed: K dI/dK >= R(d2)/sqrt(T).
    Both lower margins are reported; ``lower_ok`` follows ``convention``.
    """
    if convention not in VERTICAL_CONVENTIONS:
        raise ValueError(f"unknown vertical bound convention {convention!r}")
    for name, v in (("I", I), ("K", K), ("T", T)):
        if np.any(np.asarray(v) <= 0.0):
            raise ValueError(f"{name} must be positive")
    rt = np.sqrt(T)
    x = K * dI_dK
    lo_corr = x + mills_ratio(d2) / rt
    lo_print = x - mills_ratio(d2) / rt
    hi = mills_ratio(-np.asarray(d2, dtype=float)) / rt - x
    lo = lo_corr if convention == "corrected" else lo_print
    return {
        "lower_margin": lo,
        "upper_margin": hi,
        "lower_margin_corrected": lo_corr,
        "lower_margin_as_printed": lo_print,
        "lower_ok": bool(np.all(lo >= -tol)),
        "upper_ok": bool(np.all(hi >= -tol)),
    }


def lee_margins(params: SmileParams, config: ModelConfig) -> np.ndarray:
    """Margins (phi+, 2 - phi+, -phi-, phi- + 2) per unit chi."""
    return kernels.wing_slope_margins(params.as_array()[None, :], config.sigma_star, config.sigmoid_id)[0]


@dataclass
class NoArbReport:
    """Margins of every check; flags are margin >= -tol."""

    node_t: np.ndarray  # maturity of each node, shaped like chi
    chi: np.ndarray
    margins: np.ndarray  # chi.shape + (5,) in CHECK_NAMES order
    lee: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # (n_terms, 4)
    lee_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tol: float = TOL
    lower_as_printed: Optional[np.ndarray] = None
    strikes: Optional[np.ndarray] = None

    @property
    def node_ok(self) -> np.ndarray:
        return self.margins >= -self.tol

    @property
    def calendar_ok(self):
        return self.node_ok[..., 4]

    @property
    def butterfly_ok(self):
        return self.node_ok[..., 1]

    @property
    def vertical_ok(self):
        return self.node_ok[..., 2] & self.node_ok[..., 3]

    @property
    def positivity_ok(self):
        return self.node_ok[..., 0]

    @property
    def lee_plus_ok(self):
        return np.all(self.lee[:, 0:2] >= -self.tol, axis=1)

    @property
    def lee_minus_ok(self):
        return np.all(self.lee[:, 2:4] >= -self.tol, axis=1)

    @property
    def ok(self) -> bool:
        return bool(np.all(self.node_ok) and np.all(self.lee >= -self.tol))

    def worst(self) -> dict:
        out = {}
        for i, name in enumerate(CHECK_NAMES):
            m = self.margins[..., i]
            out[name] = float(np.min(m)) if m.size else 0.0
        for i, name in enumerate(LEE_NAMES):
            out[name] = float(np.min(self.lee[:, i])) if self.lee.size else 0.0
        return out

    def violations(self, limit: Optional[int] = None) -> list:
        """List of (T, K or chi, check, margin) for failing nodes."""
        bad = []
        m = self.margins.reshape(-1, len(CHECK_NAMES))
        T = np.asarray(self.node_t).ravel()
        loc = (self.strikes if self.strikes is not None else self.chi).ravel()
        for idx, j in zip(*np.nonzero(m < -self.tol)):
            bad.append((float(T[idx]), float(loc[idx]), CHECK_NAMES[j], float(m[idx, j])))
        for t, row in zip(self.lee_t, self.lee):
            for j in np.nonzero(row < -self.tol)[0]:
                bad.append((float(t), math.nan, LEE_NAMES[j], float(row[j])))
        return bad[:limit] if limit else bad

    def to_dict(self) -> dict:
        d = {
            "ok": self.ok,
            "tolerance": self.tol,
            "worst": self.worst(),
            "failed_nodes": int(np.sum(~np.all(self.node_ok, axis=-1))),
            "total_nodes": int(np.prod(self.chi.shape)),
            "violations": [
                {"T": t, "location": k, "check": c, "margin": m} for t, k, c, m in self.violations(limit=200)
            ],
        }
        if self.lower_as_printed is not None:
            d["worst"]["vertical_lower_as_printed"] = float(np.min(self.lower_as_printed))
        return d


def node_margins(w, w_chi, w_chichi, chi, w_prev=None, convention: str = "corrected") -> np.ndarray:
    """Margins (..., 5) at nodes; ``w_prev`` NaN or None skips the calendar."""
    if w_prev is None:
        w_prev = np.nan
    return kernels.node_margins(
        np.asarray(w, dtype=float),
        np.asarray(w_chi, dtype=float),
        np.asarray(w_chichi, dtype=float),
        np.asarray(chi, dtype=float),
        np.asarray(w_prev, dtype=float),
        VERTICAL_CONVENTIONS[convention],
    )


def check_term(
    params: SmileParams,
    config: ModelConfig,
    T: float,
    chi_nodes,
    prior: Optional[tuple] = None,
    convention: str = "corrected",
    tol: float = TOL,
) -> NoArbReport:
    """All node checks and the Lee bounds for one calibrated term.

    Args:
        prior: optional (params, T, config) of the previous calibrated term;
            the calendar compares w at the same chi.
    """
    chi = np.asarray(chi_nodes, dtype=float)
    w, wc, wcc = eval_w_chi(params, config, T, chi)
    w_prev = np.full(chi.shape, np.nan)
    if prior is not None:
        pp, pT, pcfg = prior
        w_prev = eval_w_chi(pp, pcfg, pT, chi)[0]
    m = node_margins(w, wc, wcc, chi, w_prev, convention)
    other = node_margins(w, wc, wcc, chi, w_prev, "as_printed" if convention == "corrected" else "corrected")
    printed = m[..., 2] if convention == "as_printed" else other[..., 2]
    return NoArbReport(
        node_t=np.full(chi.shape, float(T)),
        chi=chi,
        margins=m,
        lee=lee_margins(params, config)[None, :],
        lee_t=np.array([float(T)]),
        tol=tol,
        lower_as_printed=printed,
    )


def check_calendar(w_earlier, w_later, K=None, F_earlier=None, F_later=None, tol: float = TOL):
    """Calendar check between two maturities at the same strikes.

    Without forwards the total variances are compared directly.  With ``K``
    and both forwards the undiscounted call prices F c(K/F, w) are compared.

    Returns:
        (ok, margins) with margins = later - earlier.
    """
    we = np.asarray(w_earlier, dtype=float)
    wl = np.asarray(w_later, dtype=float)
    if K is None:
        margin = wl - we
    else:
        ce = bs_call(F_earlier, K, 1.0, np.sqrt(we))
        cl = bs_call(F_later, K, 1.0, np.sqrt(wl))
        margin = cl - ce
    return bool(np.all(margin >= -tol)), margin
