"""Grid surface assembly, time interpolation/extrapolation, local vol, density.

Every expiry row of the surface is a ``TermSlice``.  Calibrated slices come
straight from the smile parameters.  Interpolated and extrapolated slices
are linear combinations of two calibrated slices in price space, taken at
fixed forward moneyness k = K/F(T):

    interpolation  c(k, T) = alpha c1(k) + (1 - alpha) c2(k)
    extrapolation  T^e c(k, T) = alpha T1^e c1(k) + (1 - alpha) T2^e c2(k)

with alpha = (a(T2) - a(T)) / (a(T2) - a(T1)) for a monotone clock a(T).
Prices are forward-normalised calls, so rates never enter the combination.
With deterministic rates the forward grows with T, and monotonicity in T at
fixed k implies it for undiscounted calls at fixed K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr

from .black_scholes import implied_total_variance, norm_pdf, normalized_call
from .calibration import FitResult
from .errors import ArbitrageError, InputError
from .market_data import Grid, TermQuotes
from .no_arbitrage import TOL, NoArbReport, dupire_denominator, lee_margins, node_margins
from .smile import ModelConfig, SmileParams, eval_w_chi

SOURCES = ("calibrated", "interpolated", "extrapolated")
CLOCKS = ("anchor", "linear", "table")
_SAME_T = 1e-12
_SPAN_SAMPLES = 33


@dataclass(frozen=True)
class InterpolatorConfig:
    """Time interpolation settings.

    Attributes:
        clock: 'anchor' uses the market price at an anchor strike of every
            quoted expiry inside a span, 'linear' uses a(T) = T and 'table'
            a user-supplied monotone table.
        anchor_strike: strike whose quotes define the anchor clock; None
            uses the lowest grid strike.  Each term uses its quote nearest
            to this strike.
        table: ((T, a), ...) for the table clock.
        k: extrapolation exponent, strictly below -0.5.  At -0.5 the
            default extrapolation clock T^(k + 1/2) is constant.
        extrapolate: allow expiries outside the calibrated range.
    """

    clock: str = "anchor"
    anchor_strike: Optional[float] = None
    table: Optional[tuple] = None
    k: float = -1.0
    extrapolate: bool = True
    tol: float = TOL

    def __post_init__(self):
        if self.clock not in CLOCKS:
            raise InputError(f"unknown clock {self.clock!r}; choose from {CLOCKS}")
        if not (math.isfinite(self.k) and self.k < -0.5):
            raise InputError(f"extrapolation exponent k={self.k!r} must be below -0.5")
        if self.clock == "table":
            _table_clock(self.table)


def _table_clock(table) -> Callable:
    if table is None or len(table) < 2:
        raise InputError("table clock needs at least two (T, a) rows")
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError("table clock rows must be (T, a) pairs")
    order = np.argsort(arr[:, 0])
    T, a = arr[order, 0], arr[order, 1]
    if np.any(np.diff(T) <= 0.0):
        raise InputError("table clock expiries must be distinct")
    da = np.diff(a)
    if not (np.all(da > 0.0) or np.all(da < 0.0)):
        raise InputError("non-monotone a(T) table")
    return PchipInterpolator(T, a, extrapolate=True)


def _power_clock(k: float) -> Callable:
    def a(T):
        return np.asarray(T, dtype=float) ** (k + 0.5)

    return a


def _linear_clock(T):
    return np.asarray(T, dtype=float)


def interpolation_alpha(a, a1, a2) -> float:
    """alpha = (a2 - a) / (a2 - a1).

    Raises:
        InputError: a1 == a2 (the clock is not monotone on the span).
    """
    den = a2 - a1
    if den == 0.0 or not math.isfinite(den):
        raise InputError("non-monotone a(T): equal clock values at the span ends")
    return float((a2 - a) / den)


def _check_clock(clock, T1, T2, T):
    lo, hi = min(T, T1), max(T, T2)
    ts = np.linspace(lo, hi, _SPAN_SAMPLES)
    d = np.diff(np.asarray(clock(ts), dtype=float))
    if not (np.all(d > 0.0) or np.all(d < 0.0)):
        raise InputError("non-monotone a(T) over the span")


def interpolate_term(c1, c2, T1: float, T2: float, T: float, clock: Optional[Callable] = None) -> np.ndarray:
    """Prices at T from prices at T1 < T < T2 on a common strike coordinate.

    ``c1`` and ``c2`` may be undiscounted calls at fixed K or normalised
    calls at fixed k.  At T1 and T2 the inputs are returned unchanged.

    Raises:
        InputError: T outside [T1, T2], a non-monotone clock, or alpha
            outside [0, 1].
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    if c1.shape != c2.shape:
        raise InputError("price arrays must share the strike set")
    if not T1 < T2:
        raise InputError("need T1 < T2")
    if not T1 <= T <= T2:
        raise InputError(f"T={T} outside [{T1}, {T2}]; use extrapolate_term")
    if T == T1:
        return c1.copy()
    if T == T2:
        return c2.copy()
    clock = clock or _linear_clock
    _check_clock(clock, T1, T2, T)
    alpha = interpolation_alpha(clock(T), clock(T1), clock(T2))
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha={alpha:.6g} outside [0, 1]")
    return alpha * c1 + (1.0 - alpha) * c2


def _extrap_coeffs(T1, T2, T, k, clock):
    a1, a2, a = (float(clock(t)) for t in (T1, T2, T))
    alpha = interpolation_alpha(a, a1, a2)
    h = 1e-7 * T
    da = (float(clock(T + h)) - float(clock(T - h))) / (2.0 * h)
    dalpha = -da / (a2 - a1)
    r1, r2 = (T1 / T) ** k, (T2 / T) ** k
    u1, u2 = alpha * r1, (1.0 - alpha) * r2
    du1 = r1 * (dalpha - k * alpha / T)
    du2 = r2 * (-dalpha - k * (1.0 - alpha) / T)
    return alpha, u1, u2, du1, du2


def extrapolate_term(c1, c2, T1: float, T2: float, T: float, k: float = -1.0,
                     clock: Optional[Callable] = None, tol: float = TOL, intrinsic=None) -> np.ndarray:
    """Prices at T outside [T1, T2] from T^k C = alpha T1^k C1 + (1 - alpha) T2^k C2.

    The default clock is a(T) = T^(k + 1/2), which reproduces the sqrt(T)
    growth of at-the-money prices exactly.  The calendar condition is
    verified at every strike on a sweep from the nearer input expiry to T.

    Outside the span the weights sum to less than one, so applying the
    formula to in-the-money calls pushes them below intrinsic value.  Pass
    ``intrinsic`` ((F - K)+ shared by both terms) to apply it to time
    values instead; the intrinsic part is then carried over unchanged.

    Raises:
        InputError: k >= -0.5 or a non-monotone clock.
        ArbitrageError: 'extrapolation precondition failed' when prices
            decrease in T somewhere on the sweep.
    """
    if not (math.isfinite(k) and k < -0.5):
        raise InputError(f"extrapolation exponent k={k!r} must be below -0.5")
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    if c1.shape != c2.shape:
        raise InputError("price arrays must share the strike set")
    iota = np.zeros_like(c1) if intrinsic is None else np.broadcast_to(np.asarray(intrinsic, dtype=float), c1.shape)
    if not 0.0 < T1 < T2:
        raise InputError("need 0 < T1 < T2")
    if T1 < T < T2:
        raise InputError(f"T={T} inside ({T1}, {T2}); use interpolate_term")
    if T == T2:
        return c2.copy()
    if T == T1:
        return c1.copy()
    clock = clock or _power_clock(k)
    _check_clock(clock, T1, T2, T)
    near = T2 if T > T2 else T1
    ts = np.linspace(near, T, _SPAN_SAMPLES)
    prices = []
    for t in ts:
        _, u1, u2, _, _ = _extrap_coeffs(T1, T2, t, k, clock)
        prices.append(iota + u1 * (c1 - iota) + u2 * (c2 - iota))
    prices = np.array(prices)
    steps = np.diff(prices, axis=0) * (1.0 if T > T2 else -1.0)
    worst = float(steps.min()) if steps.size else 0.0
    if worst < -tol:
        bad = np.unique(np.nonzero(steps < -tol)[1])
        raise ArbitrageError(
            f"extrapolation precondition failed: calendar margin {worst:.3g} at strike indices {bad.tolist()}",
            [(float(T), int(j), "calendar", worst) for j in bad],
        )
    return prices[-1]


@dataclass(frozen=True, eq=False)
class TermSlice:
    """One expiry of the surface, evaluable at any forward moneyness.

    Calibrated slices carry ``params``; combined slices carry two calibrated
    ``parents`` and coefficients (u1, u2, du1/dT, du2/dT) so that
    c = u1 c1 + u2 c2 at fixed k.  Extrapolated slices apply the weights
    to time values c - (1 - k)+ instead.
    """

    maturity: float
    forward: float
    source: str
    params: Optional[SmileParams] = None
    model: Optional[ModelConfig] = None
    parents: tuple = ()
    coeffs: tuple = ()
    alpha: float = math.nan

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown slice source {self.source!r}")
        if self.source == "calibrated" and (self.params is None or self.model is None):
            raise ValueError("calibrated slice needs params and model")
        if self.source != "calibrated" and len(self.parents) != 2:
            raise ValueError("combined slice needs two parent slices")

    def smile(self, k):
        """(w, w_chi, w_chichi) at moneyness k; calibrated slices only."""
        chi = np.log(np.asarray(k, dtype=float))
        return eval_w_chi(self.params, self.model, self.maturity, chi)

    def call_derivs(self, k):
        """Normalised call c and its k-derivatives (c, c_k, c_kk)."""
        k = np.asarray(k, dtype=float)
        if self.source == "calibrated":
            w, wc, wcc = (np.asarray(v, dtype=float) for v in self.smile(k))
            chi = np.log(k)
            rw = np.sqrt(w)
            d2 = -chi / rw - 0.5 * rw
            c = normalized_call(k, w)
            ck = -ndtr(d2) + norm_pdf(d2) * wc / (2.0 * rw)
            g = dupire_denominator(w, wc, wcc, chi)
            ckk = norm_pdf(d2) * g / (k * rw)
            return c, ck, ckk
        u1, u2 = self.coeffs[0], self.coeffs[1]
        p1 = self.parents[0].call_derivs(k)
        p2 = self.parents[1].call_derivs(k)
        out = [u1 * a + u2 * b for a, b in zip(p1, p2)]
        if self.source == "extrapolated":
            # time values are combined; the intrinsic keeps weight one
            rest = 1.0 - u1 - u2
            slope = np.where(k < 1.0, -1.0, np.where(k > 1.0, 0.0, -0.5))
            out[0] = out[0] + rest * np.maximum(1.0 - k, 0.0)
            out[1] = out[1] + rest * slope
        return tuple(out)

    def call(self, k):
        return self.call_derivs(k)[0]

    def call_dt(self, k):
        """Time derivative of c at fixed k for combined slices."""
        if self.source == "calibrated":
            raise ValueError("calibrated slices have no intrinsic time derivative")
        c1 = self.parents[0].call(k)
        c2 = self.parents[1].call(k)
        du1, du2 = self.coeffs[2], self.coeffs[3]
        out = du1 * c1 + du2 * c2
        if self.source == "extrapolated":
            out = out - (du1 + du2) * np.maximum(1.0 - np.asarray(k, dtype=float), 0.0)
        return out

    def total_variance(self, k):
        """Implied total variance at moneyness k."""
        k = np.asarray(k, dtype=float)
        if self.source == "calibrated":
            return np.asarray(self.smile(k)[0], dtype=float)
        c = np.atleast_1d(self.call(k))
        kk = np.broadcast_to(k, c.shape)
        q = c - np.maximum(1.0 - kk, 0.0)
        out = np.array([_safe_total_variance(float(qi), float(ki)) for qi, ki in zip(q.ravel(), kk.ravel())])
        return out.reshape(np.shape(k)) if np.ndim(k) else float(out[0])

    def smile_from_prices(self, k):
        """(w, w_chi, w_chichi) recovered from prices; valid for any slice."""
        k = np.asarray(k, dtype=float)
        if self.source == "calibrated":
            return tuple(np.asarray(v, dtype=float) for v in self.smile(k))
        c, ck, ckk = self.call_derivs(k)
        w = self.total_variance(k)
        chi = np.log(k)
        rw = np.sqrt(w)
        d2 = -chi / rw - 0.5 * rw
        pdf = norm_pdf(d2)
        wc = (ck + ndtr(d2)) * 2.0 * rw / pdf
        g = ckk * k * rw / pdf
        a = 1.0 - chi * wc / (2.0 * w)
        wcc = 2.0 * (g - a * a + 0.25 * wc * wc * (1.0 / w + 0.25))
        return w, wc, wcc


def _safe_total_variance(q: float, k: float) -> float:
    # prices outside the no-arbitrage bounds have no implied variance
    try:
        return implied_total_variance(q, k)
    except ValueError:
        return math.nan


def calibrated_slice(fit: FitResult, model: ModelConfig) -> TermSlice:
    if not fit.calibrated:
        raise InputError(f"term T={fit.maturity:.6g} is not calibrated")
    return TermSlice(fit.maturity, fit.forward, "calibrated", params=fit.params, model=model)


def _combined(s1: TermSlice, s2: TermSlice, T, F, alpha, dalpha) -> TermSlice:
    return TermSlice(
        T, F, "interpolated", parents=(s1, s2), coeffs=(alpha, 1.0 - alpha, dalpha, -dalpha), alpha=alpha
    )


def _extrapolated(s1: TermSlice, s2: TermSlice, T, F, k, clock) -> TermSlice:
    alpha, u1, u2, du1, du2 = _extrap_coeffs(s1.maturity, s2.maturity, T, k, clock)
    return TermSlice(T, F, "extrapolated", parents=(s1, s2), coeffs=(u1, u2, du1, du2), alpha=alpha)


def _nearest_quote(term: TermQuotes, strike: float):
    j = int(np.argmin(np.abs(term.strikes - strike)))
    return float(term.strikes[j]), float(term.iv[j])


def anchor_alpha(s1: TermSlice, s2: TermSlice, quote_strike: float, quote_iv: float, T: float, F: float) -> float:
    """alpha that makes the combination reproduce one quote exactly.

    With a(T) = C(K, T, I(K, T)) the anchor is the quoted price itself, so
    alpha = (c2 - c) / (c2 - c1) at the quote's moneyness.

    Raises:
        InputError: the neighbours do not bracket the quote in price.
    """
    k = quote_strike / F
    c = float(normalized_call(k, quote_iv * quote_iv * T))
    c1, c2 = float(s1.call(k)), float(s2.call(k))
    if not c2 > c1:
        raise InputError("non-monotone a(T) with this anchor; neighbour prices do not increase in T")
    alpha = (c2 - c) / (c2 - c1)
    if not 0.0 <= alpha <= 1.0:
        raise InputError(
            f"anchor quote K={quote_strike:g} at T={T:.6g} is outside its neighbours' prices "
            f"(alpha={alpha:.4g}); use the default anchor"
        )
    return alpha


def single_quote_term(quote: tuple, left: TermSlice, right: TermSlice, forward: float) -> TermSlice:
    """Interpolated slice through a single quote (K, T, I).

    The slice reproduces the quote's price at K exactly.  Away from the
    quote it is the price-space combination of the two neighbours.

    Raises:
        InputError: neighbours do not bracket T, or the quote is not
            between the neighbours' prices (calendar arbitrage).
    """
    K, T, iv = (float(v) for v in quote)
    if not (K > 0.0 and T > 0.0 and iv > 0.0):
        raise InputError("quote strike, maturity and vol must be positive")
    if not left.maturity < T < right.maturity:
        raise InputError("neighbour slices must bracket the quote maturity")
    alpha = anchor_alpha(left, right, K, iv, T, forward)
    curve = PchipInterpolator([left.maturity, T, right.maturity], [1.0, alpha, 0.0])
    dalpha = float(curve.derivative()(T))
    return _combined(left, right, T, forward, alpha, dalpha)


@dataclass
class SurfaceGrid:
    """Total variance on the (T_i, K_j) grid with provenance.

    Attributes:
        prices: undiscounted calls F(T) c(K/F, w).
        lee_envelope: (n_T, 2) margins c(k, 2|chi|) - c(k, w) at the two
            edge strikes; NaN where an edge sits at the forward and the
            bound is void.
        calendar_strike: (n_T - 1, n_K) undiscounted price increments at
            the later row's strikes between consecutive expiries.
    """

    expiries: np.ndarray
    forwards: np.ndarray
    strikes: np.ndarray
    w: np.ndarray
    sources: tuple
    slices: tuple
    report: NoArbReport
    lee_envelope: np.ndarray
    calendar_strike: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def chi(self) -> np.ndarray:
        return np.log(self.strikes / self.forwards[:, None])

    @property
    def iv(self) -> np.ndarray:
        return np.sqrt(self.w / self.expiries[:, None])

    @property
    def prices(self) -> np.ndarray:
        k = self.strikes / self.forwards[:, None]
        return self.forwards[:, None] * normalized_call(k, self.w)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([s.alpha for s in self.slices])

    @property
    def ok(self) -> bool:
        return bool(
            self.report.ok
            and not np.any(self.lee_envelope < -self.report.tol)
            and np.all(self.calendar_strike >= -self.report.tol)
        )

    def summary(self) -> dict:
        d = self.report.to_dict()
        env = self.lee_envelope[np.isfinite(self.lee_envelope)]
        d["lee_envelope_worst"] = float(env.min()) if env.size else 0.0
        d["calendar_fixed_strike_worst"] = float(self.calendar_strike.min()) if self.calendar_strike.size else 0.0
        d["sources"] = list(self.sources)
        d["ok"] = self.ok
        return d


def _span_alphas(t1: TermSlice, t2: TermSlice, expiries, forwards, terms, config: InterpolatorConfig,
                 anchor_strike: float, diag: dict):
    """alpha and d alpha/dT at the grid expiries strictly inside (T1, T2)."""
    T1, T2 = t1.maturity, t2.maturity
    if config.clock == "table":
        clock = _table_clock(config.table)
        _check_clock(clock, T1, T2, T1)
        a1, a2 = float(clock(T1)), float(clock(T2))
        dclock = clock.derivative()
        al = np.array([interpolation_alpha(float(clock(t)), a1, a2) for t in expiries])
        dal = np.array([-float(dclock(t)) / (a2 - a1) for t in expiries])
        return al, dal
    knots_t, knots_a = [T1], [1.0]
    if config.clock == "anchor":
        for term in terms:
            T = term.maturity
            if not T1 + _SAME_T < T < T2 - _SAME_T:
                continue
            K, iv = _nearest_quote(term, anchor_strike)
            try:
                alpha = anchor_alpha(t1, t2, K, iv, T, term.forward)
            except InputError as exc:
                diag.setdefault("anchor_rejected", []).append({"T": T, "strike": K, "reason": str(exc)})
                continue
            if alpha >= knots_a[-1]:
                diag.setdefault("anchor_rejected", []).append(
                    {"T": T, "strike": K, "reason": "alpha not decreasing in T"}
                )
                continue
            knots_t.append(T)
            knots_a.append(alpha)
            diag.setdefault("anchors", []).append({"T": T, "strike": K, "alpha": alpha})
    if knots_a[-1] <= 0.0:
        # a knot at alpha = 0 before T2 leaves no room for a decreasing path
        knots_t.pop()
        knots_a.pop()
    knots_t.append(T2)
    knots_a.append(0.0)
    curve = PchipInterpolator(knots_t, knots_a)
    return np.asarray(curve(expiries), dtype=float), np.asarray(curve.derivative()(expiries), dtype=float)


def build_slices(fits: Sequence[FitResult], grid: Grid, model: ModelConfig, terms: Sequence[TermQuotes] = (),
                 config: InterpolatorConfig = InterpolatorConfig()) -> tuple[list, dict]:
    """One TermSlice per grid expiry.

    Raises:
        InputError: no calibrated term, or expiries outside the calibrated
            range with extrapolation disabled or only one calibrated term.
    """
    cal = sorted((f for f in fits if f.calibrated), key=lambda f: f.maturity)
    if not cal:
        raise InputError("no calibrated terms")
    cslices = [calibrated_slice(f, model) for f in cal]
    cT = np.array([s.maturity for s in cslices])
    anchor = config.anchor_strike if config.anchor_strike is not None else float(np.min(grid.strikes))
    diag: dict = {"anchor_strike": anchor, "clock": config.clock}
    rows: list = [None] * grid.expiries.size
    pending: dict = {}
    for i, T in enumerate(grid.expiries):
        F = float(grid.forwards[i])
        j = int(np.argmin(np.abs(cT - T)))
        if abs(cT[j] - T) <= _SAME_T:
            rows[i] = cslices[j]
        elif cT[0] < T < cT[-1]:
            r = int(np.searchsorted(cT, T))
            pending.setdefault(r, []).append(i)
        else:
            if not config.extrapolate:
                raise InputError(f"expiry T={T:.6g} outside the calibrated range and extrapolation is off")
            if len(cslices) < 2:
                raise InputError("extrapolation needs two calibrated terms")
            s1, s2 = (cslices[0], cslices[1]) if T < cT[0] else (cslices[-2], cslices[-1])
            clock = _table_clock(config.table) if config.clock == "table" else _power_clock(config.k)
            _check_clock(clock, s1.maturity, s2.maturity, T)
            rows[i] = _extrapolated(s1, s2, T, F, config.k, clock)
    for r, idx in pending.items():
        t1, t2 = cslices[r - 1], cslices[r]
        Ts = grid.expiries[idx]
        al, dal = _span_alphas(t1, t2, Ts, grid.forwards[idx], terms, config, anchor, diag)
        for i, a, da in zip(idx, al, dal):
            if not 0.0 <= a <= 1.0:
                raise InputError(f"alpha={a:.6g} outside [0, 1] at T={grid.expiries[i]:.6g}")
            rows[i] = _combined(t1, t2, float(grid.expiries[i]), float(grid.forwards[i]), float(a), float(da))
    return rows, diag


def _envelope(k, w):
    chi = np.log(k)
    w_lee = 2.0 * np.abs(chi)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = normalized_call(k, np.where(chi == 0.0, 1.0, w_lee)) - normalized_call(k, w)
    return np.where(chi == 0.0, np.nan, out)


def assemble(slices: Sequence[TermSlice], grid: Grid, convention: str = "corrected", tol: float = TOL,
             diagnostics: Optional[dict] = None) -> SurfaceGrid:
    """Evaluate slices on the grid and run every check (no rejection)."""
    n_t, n_k = grid.shape
    k = grid.strikes / grid.forwards[:, None]
    chi = np.log(k)
    w = np.empty((n_t, n_k))
    wc = np.empty((n_t, n_k))
    wcc = np.empty((n_t, n_k))
    w_prev = np.full((n_t, n_k), np.nan)
    for i, s in enumerate(slices):
        w[i], wc[i], wcc[i] = s.smile_from_prices(k[i])
        if i > 0:
            w_prev[i] = slices[i - 1].total_variance(k[i])
    bad = ~(w > 0.0) | ~np.isfinite(w)
    if np.any(bad):
        nodes = [(float(grid.expiries[i]), float(grid.strikes[i, j]), "total_variance", float(w[i, j]))
                 for i, j in zip(*np.nonzero(bad))]
        raise ArbitrageError(f"no positive total variance at {len(nodes)} grid nodes", nodes)
    margins = node_margins(w, wc, wcc, chi, w_prev, convention)
    cal = [(i, s) for i, s in enumerate(slices) if s.source == "calibrated"]
    lee = np.array([lee_margins(s.params, s.model) for _, s in cal]).reshape(-1, 4)
    lee_t = np.array([s.maturity for _, s in cal])
    report = NoArbReport(
        node_t=np.broadcast_to(grid.expiries[:, None], (n_t, n_k)).copy(),
        chi=chi,
        margins=margins,
        lee=lee,
        lee_t=lee_t,
        tol=tol,
        strikes=grid.strikes,
    )
    edges = [0, n_k - 1] if n_k > 1 else [0]
    env = np.array([_envelope(k[i, edges], w[i, edges]) for i in range(n_t)]).reshape(n_t, len(edges))
    # undiscounted calls at each row's strikes against the previous expiry
    cal_k = np.empty((max(n_t - 1, 0), n_k))
    for i in range(1, n_t):
        F0, F1 = grid.forwards[i - 1], grid.forwards[i]
        K = grid.strikes[i]
        cal_k[i - 1] = F1 * normalized_call(K / F1, w[i]) - F0 * slices[i - 1].call(K / F0)
    return SurfaceGrid(
        expiries=grid.expiries.copy(),
        forwards=grid.forwards.copy(),
        strikes=grid.strikes.copy(),
        w=w,
        sources=tuple(s.source for s in slices),
        slices=tuple(slices),
        report=report,
        lee_envelope=env,
        calendar_strike=cal_k,
        diagnostics=dict(diagnostics or {}),
    )


def build_surface(fits: Sequence[FitResult], grid: Grid, model: ModelConfig, terms: Sequence[TermQuotes] = (),
                  config: InterpolatorConfig = InterpolatorConfig(), convention: str = "corrected",
                  reject: bool = True) -> SurfaceGrid:
    """Surface on the grid from calibrated terms.

    Calibrated expiries are evaluated from their parameters, expiries
    between calibrated terms are interpolated in price space and expiries
    outside are extrapolated.  With the anchor clock each quoted expiry
    inside a span pins alpha so that its anchor quote is reproduced; grid
    expiries in between follow a monotone cubic through those knots.

    Raises:
        ArbitrageError: any node check fails (with ``reject``), carrying
            the list of offending nodes.
    """
    slices, diag = build_slices(fits, grid, model, terms, config)
    surf = assemble(slices, grid, convention, config.tol, diag)
    if reject and not surf.ok:
        nodes = surf.report.violations(limit=200)
        for i, row in enumerate(surf.lee_envelope):
            for j in np.nonzero(row < -config.tol)[0]:
                nodes.append((float(surf.expiries[i]), math.nan, "lee_envelope", float(row[j])))
        for i, j in zip(*np.nonzero(surf.calendar_strike < -config.tol)):
            nodes.append((float(surf.expiries[i + 1]), float(surf.strikes[i + 1, j]), "calendar_fixed_strike",
                          float(surf.calendar_strike[i, j])))
        raise ArbitrageError(f"surface rejected: {len(nodes)} failed checks", nodes)
    return surf


@dataclass
class LocalVolSurface:
    expiries: np.ndarray
    strikes: np.ndarray
    sigma: np.ndarray  # annualised local vol
    dw_dt: np.ndarray
    denominator: np.ndarray


def _row_dw_dt(surface: SurfaceGrid, i: int, k_row) -> np.ndarray:
    s = surface.slices[i]
    if s.source != "calibrated":
        c = s.call(k_row)
        w = s.total_variance(k_row)
        rw = np.sqrt(w)
        d1 = -np.log(k_row) / rw + 0.5 * rw
        return s.call_dt(k_row) / (norm_pdf(d1) / (2.0 * rw))
    # secants in w at fixed chi; the first row falls back to (T=0, w=0)
    # only when it is also the last
    T = s.maturity
    w = s.total_variance(k_row)
    n = len(surface.slices)
    if n == 1:
        return w / T
    if i > 0:
        Tl = surface.slices[i - 1].maturity
        left = (w - surface.slices[i - 1].total_variance(k_row)) / (T - Tl)
    if i + 1 < n:
        Tr = surface.slices[i + 1].maturity
        right = (surface.slices[i + 1].total_variance(k_row) - w) / (Tr - T)
    if i == 0:
        return right
    if i + 1 == n:
        return left
    hl, hr = T - Tl, Tr - T
    return (hr * left + hl * right) / (hl + hr)


def local_vol(surface: SurfaceGrid, tol: float = TOL) -> LocalVolSurface:
    """sigma_loc^2 = dw/dT at fixed chi divided by the Dupire denominator.

    Interpolated and extrapolated rows use the analytic time derivative of
    their price combination.  Calibrated rows use the weighted average of
    the secants in w to the neighbouring rows (one-sided at the ends),
    which is exact when w is linear in T.

    Raises:
        ArbitrageError: a node with sigma_loc^2 < -tol or a non-positive
            denominator.
    """
    n_t, n_k = surface.w.shape
    k = surface.strikes / surface.forwards[:, None]
    chi = np.log(k)
    dw = np.empty((n_t, n_k))
    den = np.empty((n_t, n_k))
    for i, s in enumerate(surface.slices):
        dw[i] = _row_dw_dt(surface, i, k[i])
        w, wc, wcc = s.smile_from_prices(k[i])
        den[i] = dupire_denominator(w, wc, wcc, chi[i])
    bad = []
    with np.errstate(divide="ignore", invalid="ignore"):
        var = dw / den
    for i, j in zip(*np.nonzero(~(den > 0.0) | ~(var >= -tol))):
        bad.append((float(surface.expiries[i]), float(surface.strikes[i, j]), "local_variance", float(var[i, j])))
    if bad:
        raise ArbitrageError(f"negative local variance at {len(bad)} nodes", bad)
    return LocalVolSurface(
        expiries=surface.expiries.copy(),
        strikes=surface.strikes.copy(),
        sigma=np.sqrt(np.maximum(var, 0.0)),
        dw_dt=dw,
        denominator=den,
    )


@dataclass
class DensityRow:
    """Risk-neutral density of S_T at the interior grid strikes.

    ``mass_on_grid`` integrates the density between the first and last
    strike; the tail masses P(S_T < K_1) and P(S_T > K_M) come from the
    surface's analytic strike slopes at the edge strikes.
    """

    maturity: float
    strikes: np.ndarray
    pdf: np.ndarray
    mass_on_grid: float
    tail_low: float
    tail_high: float

    @property
    def total_mass(self) -> float:
        return self.mass_on_grid + self.tail_low + self.tail_high


def implied_density(surface: SurfaceGrid, i: int, tol: float = TOL) -> DensityRow:
    """Density row at expiry index ``i`` from second strike differences.

    Raises:
        InputError: fewer than three strikes.
        ArbitrageError: a density value below -tol.
    """
    K = surface.strikes[i]
    if K.size < 3:
        raise InputError("insufficient strikes for second difference")
    F = surface.forwards[i]
    C = surface.prices[i]
    h = np.diff(K)
    slope = np.diff(C) / h
    pdf = 2.0 * np.diff(slope) / (h[1:] + h[:-1])
    if np.any(pdf < -tol):
        j = int(np.argmin(pdf))
        raise ArbitrageError(
            f"negative density {pdf[j]:.3g} at K={K[j + 1]:g}, T={surface.expiries[i]:.6g}",
            [(float(surface.expiries[i]), float(K[j + 1]), "density", float(pdf[j]))],
        )
    pdf = np.maximum(pdf, 0.0)
    # each interior node owns half of each adjacent cell; the outer half
    # cells at K_1 and K_M are left out, so they count as truncation
    mass = float(np.sum(pdf * 0.5 * (h[1:] + h[:-1])))
    ck = surface.slices[i].call_derivs(np.array([K[0], K[-1]]) / F)[1]
    tail_low = float(1.0 + ck[0])
    tail_high = float(-ck[1])
    return DensityRow(
        maturity=float(surface.expiries[i]),
        strikes=K[1:-1].copy(),
        pdf=pdf,
        mass_on_grid=mass,
        tail_low=tail_low,
        tail_high=tail_high,
    )
