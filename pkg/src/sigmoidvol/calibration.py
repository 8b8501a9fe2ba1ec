"""Term-by-term calibration of the smile under no-arbitrage constraints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import kernels
from .errors import InputError, OptimizerError
from .market_data import TermQuotes
from .no_arbitrage import VERTICAL_CONVENTIONS, NoArbReport, check_term
from .optimizer import FEASIBILITY_TOL, CMAESConfig, minimize
from .smile import PARAM_NAMES, SIGMOIDS, ModelConfig, SmileParams, eval_w, wing_function

BOX_LOWER = np.array([1e-10, -5.0, -3.0, -50.0, -10.0, -10.0, -10.0])
BOX_UPPER = np.array([4.0, 5.0, 3.0, 50.0, 100.0, 10.0, 10.0])
_IDX = {n: i for i, n in enumerate(PARAM_NAMES)}
_STEEP_GRID = np.geomspace(1e-3, 10.0, 400)
_LINEAR = [_IDX[n] for n in ("w_c", "s_c", "s", "kurt")]
_NONLINEAR = [_IDX[n] for n in ("c", "alpha", "beta")]
# profile stage: share of the budget, grid resolution, CMA-ES starts
_PROFILE_SHARE = 0.5
_GRID_C = 13
_GRID_STEEP = np.geomspace(0.1, 10.0, 8)
_PROFILE_STARTS = 3


@dataclass(frozen=True)
class WeightConfig:
    """Point weights min[cap, (|z|/sigma_atm)^nu] times (1 - |delta|).

    ``variant='inverse'`` flips the sign of the exponent.
    """

    nu: float = -2.0
    cap: float = 0.1
    variant: str = "as_printed"

    def __post_init__(self):
        if not self.nu < 0.0:
            raise ValueError("nu must be negative")
        if self.variant not in ("as_printed", "inverse"):
            raise ValueError(f"unknown weight variant {self.variant!r}")


@dataclass(frozen=True)
class CalibrationConfig:
    weights: WeightConfig = WeightConfig()
    optimizer: CMAESConfig = CMAESConfig()
    p: float = 1000.0
    sigmoid: str = "erf"
    sigma_star: Optional[float] = None
    vertical_bound_convention: str = "corrected"
    use_bid_ask: bool = True
    mode: str = "ends_only"
    freeze_c: Optional[float] = None

    def __post_init__(self):
        if self.vertical_bound_convention not in VERTICAL_CONVENTIONS:
            raise ValueError(f"unknown vertical bound convention {self.vertical_bound_convention!r}")
        if self.mode not in ("ends_only", "full"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        if self.sigmoid not in SIGMOIDS:
            raise ValueError(f"unknown sigmoid {self.sigmoid!r}")

    def model(self, sigma_star: float) -> ModelConfig:
        return ModelConfig(p=self.p, sigmoid=self.sigmoid, sigma_star=sigma_star)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        """Build from a flat JSON-style mapping; unknown keys raise."""
        d = dict(d)
        wkeys = {"nu", "cap", "weight_variant"}
        okeys = {f for f in CMAESConfig.__dataclass_fields__} | {"max_evals", "seed", "penalty_scale"}
        w = {("variant" if k == "weight_variant" else k): d.pop(k) for k in list(d) if k in wkeys}
        o = {k: d.pop(k) for k in list(d) if k in okeys}
        if "mode" in d:
            d["mode"] = {"ends": "ends_only", "all": "full"}.get(d["mode"], d["mode"])
        known = set(cls.__dataclass_fields__) - {"weights", "optimizer"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(weights=WeightConfig(**w), optimizer=CMAESConfig(**o), **d)

    @classmethod
    def from_json(cls, path) -> "CalibrationConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                if isinstance(exc, InputError):
                    raise
                raise InputError(f"{path}: bad config ({exc})") from None

    def with_seed(self, seed: int) -> "CalibrationConfig":
        return replace(self, optimizer=replace(self.optimizer, seed=seed))


@dataclass(frozen=True)
class ReducedMode:
    name: str
    free: tuple  # 7 booleans
    fixed: dict
    interpolate: bool = False


def reduced_mode(term_size: int) -> ReducedMode:
    """Parameter mask for a term with ``term_size`` quotes."""
    if term_size < 1:
        raise ValueError("term_size must be at least 1")
    if term_size >= 7:
        return ReducedMode("full", (True,) * 7, {})
    if term_size >= 5:
        return ReducedMode("fixed_s_c", (True, False, True, True, True, True, True), {"s_c": 0.0})
    if term_size >= 3:
        return ReducedMode(
            "fixed_s_c_kurt", (True, False, True, True, False, True, True), {"s_c": 0.0, "kurt": 0.0}
        )
    return ReducedMode("single_quote", (False,) * 7, {}, interpolate=True)


def point_weight(z, sigma_atm, delta_c=np.nan, delta_p=np.nan, config: WeightConfig = WeightConfig(),
                 sigma_star: float = 1.0):
    """W = (w_c + w_p) / 2 with w_x = (1 - |delta_x|) min[cap, (|x|/sigma_atm)^nu].

    x = z * sigma_star = log(K/F)/sqrt(T), so x/sigma_atm counts ATM
    standard deviations whatever normalisation z uses.  x = 0 receives the
    cap under the printed form.  Missing deltas (NaN) contribute a factor 1.
    """
    if not sigma_atm > 0.0:
        raise ValueError("sigma_atm must be positive")
    z = np.abs(np.asarray(z, dtype=float)) * sigma_star / sigma_atm
    expo = config.nu if config.variant == "as_printed" else -config.nu
    with np.errstate(divide="ignore", over="ignore"):
        power = np.where(z == 0.0, np.inf if expo < 0 else 0.0, z**expo)
    m = np.minimum(config.cap, power)
    fc = 1.0 - np.abs(np.nan_to_num(np.asarray(delta_c, dtype=float), nan=0.0))
    fp = 1.0 - np.abs(np.nan_to_num(np.asarray(delta_p, dtype=float), nan=0.0))
    out = 0.5 * (fc + fp) * m
    return out if np.ndim(out) else float(out)


def term_weights(term: TermQuotes, sigma_star: float, config: WeightConfig) -> np.ndarray:
    return np.asarray(
        point_weight(term.z(sigma_star), term.atm_iv(), term.delta_call, term.delta_put, config, sigma_star),
        dtype=float,
    ).reshape(-1)


def objective(params: SmileParams, term: TermQuotes, weights, model: ModelConfig) -> float:
    """Weighted squared error in total variance."""
    w = eval_w(params, model, term.maturity, term.z(model.sigma_star))
    r = term.w - w
    return float(np.sum(np.asarray(weights) * r * r))


# ---------------------------------------------------------------- guess


def hinge_stage(z, iv, w, p: float = 1000.0) -> tuple[float, float, float, dict]:
    """Hinge location and local level/slope from market points.

    C is where the discrete second derivative of IV in z changes sign (the
    crossing nearest the IV minimum).  Without a crossing between the quotes
    adjacent to the minimum, C is the argmin of IV; far-wing sign changes are
    usually quote noise.  w_C and S_C are the value and slope of an interpolant at C.

    Returns:
        (C, w_C, S_C, diagnostics)
    """
    z = np.asarray(z, dtype=float)
    iv = np.asarray(iv, dtype=float)
    w = np.asarray(w, dtype=float)
    diag = {}
    imin = int(np.argmin(iv))
    c = float(z[imin])
    diag["hinge_rule"] = "iv_minimum"
    if z.size >= 4:
        h0 = z[1:-1] - z[:-2]
        h1 = z[2:] - z[1:-1]
        d2 = 2.0 * (h0 * iv[2:] - (h0 + h1) * iv[1:-1] + h1 * iv[:-2]) / (h0 * h1 * (h0 + h1))
        zi = z[1:-1]
        crossings = []
        for j in range(d2.size - 1):
            a, b = d2[j], d2[j + 1]
            if a == 0.0:
                crossings.append(zi[j])
            elif a * b < 0.0:
                crossings.append(zi[j] - a * (zi[j + 1] - zi[j]) / (b - a))
        lo, hi = z[max(imin - 1, 0)], z[min(imin + 1, z.size - 1)]
        crossings = [x for x in crossings if lo <= x <= hi]
        if crossings:
            crossings = np.array(crossings)
            c = float(crossings[np.argmin(np.abs(crossings - z[imin]))])
            diag["hinge_rule"] = "second_derivative_crossing"
    c = float(np.clip(c, z[0], z[-1]))
    if z.size >= 4:
        spline = CubicSpline(z, w, bc_type="natural")
        w_c, s_c = float(spline(c)), float(spline(c, 1))
    elif z.size >= 2:
        w_c = float(np.interp(c, z, w))
        j = int(np.clip(np.searchsorted(z, c) - 1, 0, z.size - 2))
        s_c = float((w[j + 1] - w[j]) / (z[j + 1] - z[j]))
    else:
        w_c, s_c = float(w[0]), 0.0
    return c, w_c, s_c, diag


def _kappa(y, w, w_c, s_c, sqrt_t, p):
    return (w - w_c - s_c * y / (1.0 + y * y)) / (y * np.tanh(p * y) * sqrt_t)


def _Y(y, steep, sigmoid_id):
    return kernels.wing_function(np.asarray(y, dtype=float), steep, sigmoid_id)[0]


def _sk(y1, y2, k1, k2, steep, sigmoid_id, fix_kurt):
    Y1, Y2 = _Y(y1, steep, sigmoid_id), _Y(y2, steep, sigmoid_id)
    if fix_kurt:
        return k1 / Y1, 0.0
    den = Y1 * Y2 * Y2 - Y2 * Y1 * Y1
    return (k1 * Y2 * Y2 - k2 * Y1 * Y1) / den, (k2 * Y1 - k1 * Y2) / den


def _solve_steepness(resid, score):
    """Roots of resid on the steepness grid; keep the best-scoring one."""
    with np.errstate(all="ignore"):
        r = np.array([resid(b) for b in _STEEP_GRID])
    roots = []
    for j in range(r.size - 1):
        if np.isfinite(r[j]) and np.isfinite(r[j + 1]) and r[j] * r[j + 1] < 0.0:
            try:
                roots.append(brentq(resid, _STEEP_GRID[j], _STEEP_GRID[j + 1], xtol=1e-14, rtol=1e-14))
            except (ValueError, RuntimeError):
                continue
        elif r[j] == 0.0:
            roots.append(float(_STEEP_GRID[j]))
    if roots:
        scores = [score(b) for b in roots]
        return float(roots[int(np.nanargmin(scores))]), True
    finite = np.isfinite(r)
    if not finite.any():
        raise ValueError("steepness residual not finite")
    j = int(np.argmin(np.where(finite, np.abs(r), np.inf)))
    return float(_STEEP_GRID[j]), False


def _pick_three(ys):
    """Widest spread: outermost, innermost and the point nearest their middle."""
    order = np.argsort(np.abs(ys))
    inner, outer = ys[order[0]], ys[order[-1]]
    mid_target = 0.5 * (abs(inner) + abs(outer))
    rest = order[1:-1]
    gap = np.abs(np.abs(ys[rest]) - mid_target)
    best = rest[np.lexsort((-np.abs(ys[rest]), gap))[0]]
    return outer, ys[best], inner


def wing_stage(y, w, T, w_c, s_c, p=1000.0, sigmoid="erf", fix_kurt=False) -> tuple[float, float, float, float, dict]:
    """Outer parameters given exact or estimated hinge values.

    Args:
        y: offsets z - C of the market points.
        w: market total variances.

    Returns:
        (S, K, alpha, beta, diagnostics); alpha and beta are positive.

    Raises:
        ValueError: too few points or a failed closed form.
    """
    sid = SIGMOIDS[sigmoid]
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    sqrt_t = math.sqrt(T)
    keep = np.abs(y) > 1e-10
    y, w = y[keep], w[keep]
    need = 2 if fix_kurt else 3
    pos, neg = y[y > 0], y[y < 0]
    wpos, wneg = w[y > 0], w[y < 0]
    diag = {"interpolated_point": False, "one_sided": False}

    if pos.size >= neg.size:
        main, wm, other, wo, main_is_pos = pos, wpos, neg, wneg, True
    else:
        main, wm, other, wo, main_is_pos = neg, wneg, pos, wpos, False
    if main.size < need and other.size >= 2 and main.size == other.size:
        # Paper-style mixed case: grow the negative side, trim the positive.
        main, wm, other, wo, main_is_pos = neg, wneg, pos, wpos, False
    if main.size < need and main.size >= 2 and other.size >= 1:
        o = np.argsort(np.abs(main))
        y_in, y_out = main[o[0]], main[o[-1]]
        y_new = 0.5 * (y_in + y_out)
        w_new = float(np.interp(y_new, np.sort(main), wm[np.argsort(main)]))
        main = np.append(main, y_new)
        wm = np.append(wm, w_new)
        diag["interpolated_point"] = True
    if main.size < need:
        raise ValueError("not enough points on either side of the hinge")

    km = _kappa(main, wm, w_c, s_c, sqrt_t, p)
    if fix_kurt:
        o = np.argsort(np.abs(main))
        y1, y3 = main[o[-1]], main[o[0]]
        y2 = y3
        k1, k3 = km[o[-1]], km[o[0]]
        k2 = k3
    else:
        y1, y2, y3 = _pick_three(main)
        k1, k2, k3 = (km[np.flatnonzero(main == v)[0]] for v in (y1, y2, y3))

    def main_resid(b):
        s, kk = _sk(y1, y2, k1, k2, b, sid, fix_kurt)
        Y3 = _Y(y3, b, sid)
        return float(s * Y3 + kk * Y3 * Y3 - k3)

    def main_score(b):
        s, kk = _sk(y1, y2, k1, k2, b, sid, fix_kurt)
        Ym = _Y(main, b, sid)
        return float(np.sum((s * Ym + kk * Ym * Ym - km) ** 2))

    b, ok_b = _solve_steepness(main_resid, main_score)
    s, kk = _sk(y1, y2, k1, k2, b, sid, fix_kurt)
    diag["main_root_found"] = ok_b

    if other.size == 0:
        a, ok_a = b, False
        diag["one_sided"] = True
    else:
        ko = _kappa(other, wo, w_c, s_c, sqrt_t, p)
        j4 = int(np.argmax(np.abs(other)))
        y4, k4 = other[j4], ko[j4]

        def other_resid(a_):
            Y4 = _Y(y4, a_, sid)
            return float(s * Y4 + kk * Y4 * Y4 - k4)

        def other_score(a_):
            Yo = _Y(other, a_, sid)
            return float(np.sum((s * Yo + kk * Yo * Yo - ko) ** 2))

        a, ok_a = _solve_steepness(other_resid, other_score)
    diag["other_root_found"] = ok_a
    alpha, beta = (a, b) if main_is_pos else (b, a)
    vals = (s, kk, alpha, beta)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite wing parameters")
    return float(s), float(kk), float(alpha), float(beta), diag


def default_guess(term: TermQuotes) -> SmileParams:
    return SmileParams(
        w_c=term.atm_iv() ** 2 * term.maturity, s_c=0.0, c=0.0, s=-0.2, kurt=1.0, alpha=1.0, beta=1.0
    )


def smart_initial_guess(
    term: TermQuotes, model: ModelConfig, mode: Optional[ReducedMode] = None, freeze_c: Optional[float] = None
) -> tuple[SmileParams, dict]:
    """Initial parameters from the data, falling back to defaults on failure."""
    mode = mode or reduced_mode(len(term))
    z = term.z(model.sigma_star)
    w = term.w
    diag: dict = {}
    try:
        c, w_c, s_c, hd = hinge_stage(z, term.iv, w, model.p)
        diag.update(hd)
        if freeze_c is not None:
            c = float(freeze_c)
            spline_ok = z.size >= 4
            if spline_ok:
                sp = CubicSpline(z, w, bc_type="natural")
                w_c, s_c = float(sp(c)), float(sp(c, 1))
            else:
                w_c = float(np.interp(c, z, w))
        if "s_c" in mode.fixed:
            s_c = mode.fixed["s_c"]
        s, kk, alpha, beta, wd = wing_stage(
            z - c, w, term.maturity, w_c, s_c, model.p, model.sigmoid, fix_kurt="kurt" in mode.fixed
        )
        diag.update(wd)
        x = np.array([w_c, s_c, c, s, kk, alpha, beta])
        if not np.all(np.isfinite(x)) or not w_c > 0.0:
            raise ValueError("non-finite or non-positive guess")
        diag["fallback"] = False
    except (ValueError, ZeroDivisionError, FloatingPointError) as exc:
        x = default_guess(term).as_array()
        if freeze_c is not None:
            x[_IDX["c"]] = freeze_c
        diag["fallback"] = True
        diag["fallback_reason"] = str(exc)
    for name, val in mode.fixed.items():
        x[_IDX[name]] = val
    x = np.clip(x, BOX_LOWER, BOX_UPPER)
    return SmileParams.from_array(x), diag


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    maturity: float
    forward: float
    sigma_star: float
    status: str  # calibrated | interpolate
    mode: str
    params: Optional[SmileParams] = None
    objective: float = math.nan
    initial_params: Optional[SmileParams] = None
    initial_objective: float = math.nan
    strikes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    market_iv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    model_iv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    evals: int = 0
    wall_time: float = 0.0
    report: Optional[NoArbReport] = None
    stop_reason: str = ""
    guess_diagnostics: dict = field(default_factory=dict)
    expiry: Optional[str] = None

    @property
    def iv_residuals(self) -> np.ndarray:
        return self.model_iv - self.market_iv

    @property
    def rmse_iv(self) -> float:
        r = self.iv_residuals
        return float(np.sqrt(np.mean(r * r))) if r.size else math.nan

    @property
    def calibrated(self) -> bool:
        return self.status == "calibrated"

    def to_dict(self) -> dict:
        """JSON-ready record without wall-clock timing."""
        d = {
            "expiry": self.expiry,
            "maturity": self.maturity,
            "forward": self.forward,
            "sigma_star": self.sigma_star,
            "status": self.status,
            "mode": self.mode,
            "params": None if self.params is None else self.params.to_dict(),
            "objective": self.objective,
            "initial_params": None if self.initial_params is None else self.initial_params.to_dict(),
            "initial_objective": self.initial_objective,
            "rmse_iv": self.rmse_iv,
            "evals": self.evals,
            "stop_reason": self.stop_reason,
            "guess": self.guess_diagnostics,
            "no_arbitrage": None if self.report is None else self.report.to_dict(),
        }
        return jsonable(d)


def jsonable(obj):
    """Plain JSON types; non-finite floats become None."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class TermProblem:
    """Vectorised objective and constraint evaluation for one term."""

    def __init__(self, term: TermQuotes, chi_nodes, model: ModelConfig, config: CalibrationConfig,
                 mode: ReducedMode, prior: Optional[tuple] = None, freeze_c: Optional[float] = None):
        self.term = term
        self.model = model
        self.mode = mode
        self.T = term.maturity
        self.sqrt_t = math.sqrt(self.T)
        self.zq = np.ascontiguousarray(term.z(model.sigma_star))
        self.wq = np.ascontiguousarray(term.w)
        self.wt = np.ascontiguousarray(term_weights(term, model.sigma_star, config.weights))
        if config.use_bid_ask:
            self.wlo = np.ascontiguousarray(term.w_bid)
            self.whi = np.ascontiguousarray(term.w_ask)
        else:
            self.wlo = np.full(len(term), np.nan)
            self.whi = np.full(len(term), np.nan)
        self.chin = np.ascontiguousarray(np.unique(np.asarray(chi_nodes, dtype=float)))
        self.zn = self.chin / (model.sigma_star * self.sqrt_t)
        if prior is not None:
            pp, pT, pmodel = prior
            self.wprev = np.asarray(
                eval_w(pp, pmodel, pT, self.chin / (pmodel.sigma_star * math.sqrt(pT))), dtype=float
            ).reshape(-1)
        else:
            self.wprev = np.full(self.chin.size, np.nan)
        self.wscale = float(np.mean(self.wq))
        self.vconv = VERTICAL_CONVENTIONS[config.vertical_bound_convention]
        free = np.array(mode.free, dtype=bool)
        self.fixed_x = np.zeros(7)
        for name, val in mode.fixed.items():
            self.fixed_x[_IDX[name]] = val
        if freeze_c is not None:
            free[_IDX["c"]] = False
            self.fixed_x[_IDX["c"]] = freeze_c
        self.free = free
        self.lo = BOX_LOWER[free]
        self.span = BOX_UPPER[free] - BOX_LOWER[free]
        # w_C, S_C, S and K move w linearly; C, alpha, beta are O(1)
        typical = np.array([1.0, 1.0, 0.5, 1.0 / self.sqrt_t, 1.0 / self.sqrt_t, 1.0, 1.0])
        typical[[0, 1, 3, 4]] *= self.wscale
        self.scales = typical[free] / self.span

    def to_params(self, U) -> np.ndarray:
        U = np.atleast_2d(U)
        P = np.tile(self.fixed_x, (U.shape[0], 1))
        P[:, self.free] = self.lo + U * self.span
        return P

    def to_unit(self, params: SmileParams) -> np.ndarray:
        return np.clip((params.as_array()[self.free] - self.lo) / self.span, 0.0, 1.0)

    def evaluate_params(self, P):
        return kernels.evaluate_population(
            np.ascontiguousarray(P, dtype=float), self.zq, self.wq, self.wt, self.wlo, self.whi,
            self.zn, self.chin, self.wprev, self.sqrt_t, self.model.sigma_star, self.model.p,
            self.model.sigmoid_id, self.vconv, self.wscale,
        )

    def __call__(self, U):
        return self.evaluate_params(self.to_params(U))

    def project(self, P) -> np.ndarray:
        """Replace the free linear parameters by their weighted least-squares fit.

        w is linear in (w_C, S_C, S, K) once (C, alpha, beta) are fixed, so
        each design column is w evaluated at a unit vector in that block.
        """
        P = np.array(np.atleast_2d(P), dtype=float)
        lin = [i for i in _LINEAR if self.free[i]]
        if not lin:
            return P
        n, m = P.shape[0], len(lin)
        basis = np.repeat(P, len(_LINEAR) + 1, axis=0)
        basis[:, _LINEAR] = 0.0
        for j, i in enumerate(_LINEAR):
            basis[j + 1 :: len(_LINEAR) + 1, i] = 1.0
        cols = kernels.smile_derivs_batch(basis, self.zq, self.sqrt_t, self.model.p, self.model.sigmoid_id)[0]
        cols = cols.reshape(n, len(_LINEAR) + 1, -1)
        fixed = P[:, _LINEAR] * ~self.free[_LINEAR]
        rhs = self.wq - np.einsum("nk,nkq->nq", fixed, cols[:, 1:])
        A = cols[:, [1 + _LINEAR.index(i) for i in lin]].transpose(0, 2, 1)
        sw = np.sqrt(self.wt)[None, :, None]
        x = np.einsum("nkq,nq->nk", np.linalg.pinv(A * sw), rhs * sw[..., 0])
        P[:, lin] = np.clip(x, BOX_LOWER[lin], BOX_UPPER[lin])
        return P


def _profile_search(problem: TermProblem, guess: SmileParams, config: CMAESConfig, budget: int):
    """Global stage over the nonlinear block (C, alpha, beta).

    A coarse grid, then short CMA-ES runs from the best few hinge
    locations, each candidate completed by ``TermProblem.project``.

    Returns:
        (params array, evaluations used)
    """
    nl = [i for i in _NONLINEAR if problem.free[i]]
    g = problem.project(guess.as_array())[0]
    grid_size = np.prod([(_GRID_C if i == _IDX["c"] else _GRID_STEEP.size) + 1 for i in nl])
    if not nl or budget < 2 * grid_size:
        return g, 1
    axes = []
    for i in nl:
        if i == _IDX["c"]:
            lo = max(BOX_LOWER[i], float(problem.zq.min()))
            hi = min(BOX_UPPER[i], float(problem.zq.max()))
            axes.append(np.append(np.linspace(lo, hi, _GRID_C), g[i]))
        else:
            axes.append(np.append(_GRID_STEEP, abs(g[i])))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(nl))
    P = np.tile(g, (mesh.shape[0], 1))
    P[:, nl] = mesh
    P = problem.project(P)
    obj, pen, _ = problem.evaluate_params(P)
    scale = max(float(np.min(obj)), 1e-300)
    score = obj / scale + config.penalty_scale * pen
    evals = 1 + P.shape[0]

    lo, span = BOX_LOWER[nl], BOX_UPPER[nl] - BOX_LOWER[nl]

    def evaluate(U):
        Q = np.tile(g, (U.shape[0], 1))
        Q[:, nl] = lo + U * span
        return problem.evaluate_params(problem.project(Q))

    starts, seen = [], []
    ci = nl.index(_IDX["c"]) if _IDX["c"] in nl else None
    for j in np.argsort(score, kind="stable"):
        key = None if ci is None else round(float(P[j, _IDX["c"]]), 6)
        if key in seen:
            continue
        seen.append(key)
        starts.append(j)
        if len(starts) == _PROFILE_STARTS or ci is None:
            break
    best, best_score = P[starts[0]], score[starts[0]]
    each = (budget - evals) // len(starts)
    typical = np.array([0.5 if i == _IDX["c"] else 1.0 for i in nl]) / span
    for k, j in enumerate(starts):
        if each <= 0:
            break
        cfg = replace(config, max_evals=each, seed=config.seed + k)
        res = minimize(evaluate, (P[j, nl] - lo) / span, cfg, obj_scale=scale, scales=typical)
        evals += res.evals
        if res.feasible:
            Q = np.tile(g, (1, 1))
            Q[:, nl] = lo + res.x * span
            Q = problem.project(Q)
            o, p_, _ = problem.evaluate_params(Q)
            s = o[0] / scale + config.penalty_scale * p_[0]
            if s < best_score:
                best, best_score = Q[0], s
    return best, evals


def _model_iv(params, model, term):
    w = np.asarray(eval_w(params, model, term.maturity, term.z(model.sigma_star)), dtype=float)
    return np.sqrt(np.maximum(w, 0.0) / term.maturity)


def fit_term(
    term: TermQuotes,
    chi_nodes,
    config: CalibrationConfig,
    sigma_star: float,
    prior: Optional[tuple] = None,
) -> FitResult:
    """Calibrate one term.

    Half the evaluation budget goes to a profile search over (C, alpha,
    beta) with the linear block solved exactly; the full seven-parameter
    CMA-ES then starts from the better of that point and the smart guess.

    Args:
        chi_nodes: log-moneyness nodes where constraints are enforced.
        prior: (params, T, ModelConfig) of the previous calibrated term.

    Raises:
        OptimizerError: no feasible candidate within the budget.
    """
    start = time.perf_counter()
    model = config.model(sigma_star)
    mode = reduced_mode(len(term))
    base = dict(
        maturity=term.maturity,
        forward=term.forward,
        sigma_star=sigma_star,
        mode=mode.name,
        strikes=term.strikes,
        market_iv=term.iv,
        expiry=None if term.expiry is None else term.expiry.isoformat(),
    )
    if mode.interpolate:
        return FitResult(status="interpolate", **base)

    freeze_c = config.freeze_c
    guess, gdiag = smart_initial_guess(term, model, mode, freeze_c)
    problem = TermProblem(term, chi_nodes, model, config, mode, prior, freeze_c)
    opt = config.optimizer
    x0, used = _profile_search(problem, guess, opt, int(opt.max_evals * _PROFILE_SHARE))
    start_obj, start_pen, _ = problem.evaluate_params(np.stack([guess.as_array(), x0]))
    used += 2
    scale = max(float(start_obj[0]), 1e-300)
    pick = int(np.argmin(start_obj / scale + opt.penalty_scale * start_pen))
    u0 = problem.to_unit(guess if pick == 0 else SmileParams.from_array(x0))
    res = minimize(problem, u0, replace(opt, max_evals=max(opt.max_evals - used, 1)),
                   obj_scale=scale, scales=problem.scales)
    res = replace(res, evals=res.evals + used)
    obj0, _, worst0 = (float(a[0]) for a in problem.evaluate_params(guess.as_array()[None, :]))
    if worst0 <= FEASIBILITY_TOL and (not res.feasible or obj0 < res.objective):
        # the search never returns something worse than a feasible start
        res = replace(res, x=problem.to_unit(guess), objective=obj0, feasible=True)
    if not res.feasible:
        diag = {"maturity": term.maturity, "evals": res.evals}
        if res.best_infeasible:
            u = np.asarray(res.best_infeasible["u"])
            diag["best_infeasible_params"] = SmileParams.from_array(problem.to_params(u)[0]).to_dict()
            diag["worst_violation"] = res.best_infeasible["worst_violation"]
            diag["objective"] = res.best_infeasible["objective"]
        raise OptimizerError(f"no feasible parameters for T={term.maturity:.6g}", diag)
    params = SmileParams.from_array(problem.to_params(res.x)[0])
    report = check_term(
        params, model, term.maturity, problem.chin, prior, config.vertical_bound_convention
    )
    return FitResult(
        status="calibrated",
        params=params,
        objective=res.objective,
        initial_params=guess,
        initial_objective=obj0,
        model_iv=_model_iv(params, model, term),
        weights=problem.wt,
        evals=res.evals,
        wall_time=time.perf_counter() - start,
        report=report,
        stop_reason=res.stop_reason,
        guess_diagnostics=gdiag,
        **base,
    )


def calibration_nodes(grid_chi, terms: Sequence[TermQuotes] = ()) -> np.ndarray:
    """Union of grid log-moneyness values used as constraint nodes."""
    return np.unique(np.asarray(grid_chi, dtype=float).ravel())


def bootstrap(
    terms: Sequence[TermQuotes],
    chi_nodes,
    config: CalibrationConfig,
    sigma_star: float,
    frozen_c: Optional[dict] = None,
) -> list[FitResult]:
    """Sequential fits in ascending maturity.

    In ``ends_only`` mode only the first and last calibratable terms are
    fitted; every other term is marked for interpolation.  Terms with fewer
    than three quotes are always interpolated.

    Args:
        frozen_c: optional map from sorted term index to a fixed hinge C.

    Raises:
        OptimizerError: with the failing term index in the message.
    """
    if not terms:
        raise InputError("no terms to calibrate")
    ordered = sorted(terms, key=lambda t: t.maturity)
    calibratable = [i for i, t in enumerate(ordered) if not reduced_mode(len(t)).interpolate]
    if config.mode == "ends_only" and calibratable:
        chosen = {calibratable[0], calibratable[-1]}
    else:
        chosen = set(calibratable)
    model = config.model(sigma_star)
    results = []
    prior = None
    for i, term in enumerate(ordered):
        if i not in chosen:
            results.append(
                FitResult(
                    maturity=term.maturity,
                    forward=term.forward,
                    sigma_star=sigma_star,
                    status="interpolate",
                    mode=reduced_mode(len(term)).name,
                    strikes=term.strikes,
                    market_iv=term.iv,
                    expiry=None if term.expiry is None else term.expiry.isoformat(),
                )
            )
            continue
        try:
            cfg = config
            if frozen_c and frozen_c.get(i) is not None:
                cfg = replace(config, freeze_c=float(frozen_c[i]))
            fr = fit_term(term, chi_nodes, cfg, sigma_star, prior)
        except OptimizerError as exc:
            raise OptimizerError(f"term {i}: {exc}", exc.diagnostics) from None
        results.append(fr)
        prior = (fr.params, fr.maturity, model)
    return results
