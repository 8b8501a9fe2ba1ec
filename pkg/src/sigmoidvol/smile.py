"""Sigmoid-polynomial total variance smile for one expiry.

With y = z - C the total variance is

    w(z) = w_C + S_C y / (1 + y^2) + y tanh(p y) sqrt(T) (S Y + K Y^2),

where Y = sig(-a y) / a with a = alpha for y <= 0 and a = beta for y > 0.
The sigmoid ``sig`` is scaled to unit slope at the origin.  ``z`` is the
normalised strike log(K/F) / (sigma_star sqrt(T)).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

PARAM_NAMES = ("w_c", "s_c", "c", "s", "kurt", "alpha", "beta")
SIGMOIDS = {
    "erf": kernels.SIGMOID_ERF,
    "arctan": kernels.SIGMOID_ARCTAN,
    "erf_approx": kernels.SIGMOID_ERF_APPROX,
}
DEGENERATE_STEEPNESS = 1e-8


@dataclass(frozen=True)
class SmileParams:
    w_c: float
    s_c: float
    c: float
    s: float
    kurt: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("smile parameters must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x) -> "SmileParams":
        return cls(*(float(v) for v in np.asarray(x, dtype=float)))

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SmileParams":
        return cls(**{n: float(d[n]) for n in PARAM_NAMES})

    def replace(self, **changes) -> "SmileParams":
        d = self.to_dict()
        d.update(changes)
        return SmileParams(**d)


@dataclass(frozen=True)
class ModelConfig:
    """Model constants.

    Attributes:
        p: tanh smoothing constant standing in for |y|.
        sigmoid: 'erf' (exact), 'arctan' or 'erf_approx'.
        sigma_star: normalisation volatility in z.
    """

    p: float = 1000.0
    sigmoid: str = "erf"
    sigma_star: float = 1.0
    n: int = field(default=2, repr=False)

    def __post_init__(self):
        if not self.p > 0.0:
            raise ValueError("p must be positive")
        if self.sigmoid not in SIGMOIDS:
            raise ValueError(f"unknown sigmoid {self.sigmoid!r}; choose from {sorted(SIGMOIDS)}")
        if not self.sigma_star > 0.0:
            raise ValueError("sigma_star must be positive")
        if self.n != 2:
            raise ValueError("only polynomial degree 2 is supported")

    @property
    def sigmoid_id(self) -> int:
        return SIGMOIDS[self.sigmoid]

    @property
    def saturation(self) -> float:
        return kernels.saturation(self.sigmoid_id)


@dataclass(frozen=True)
class WingSlopes:
    """Asymptotic slopes of w per unit y*sqrt(T); divide by sigma_star for chi."""

    phi_plus: float
    phi_minus: float
    degenerate_plus: bool = False
    degenerate_minus: bool = False


def _check_t(T):
    if not T > 0.0:
        raise ValueError("maturity must be positive")


def eval_w_derivs(params: SmileParams, config: ModelConfig, T: float, z):
    """Total variance and its first two z-derivatives (analytic).

    Returns:
        Tuple (w, w_z, w_zz) shaped like ``z``.
    """
    _check_t(T)
    za = np.atleast_1d(np.asarray(z, dtype=float))
    w, wz, wzz = kernels.smile_derivs_batch(
        params.as_array()[None, :], za.ravel(), math.sqrt(T), config.p, config.sigmoid_id
    )
    shape = np.shape(z)
    if shape == ():
        return float(w[0, 0]), float(wz[0, 0]), float(wzz[0, 0])
    return w[0].reshape(shape), wz[0].reshape(shape), wzz[0].reshape(shape)


def eval_w(params: SmileParams, config: ModelConfig, T: float, z):
    return eval_w_derivs(params, config, T, z)[0]


def eval_w_chi(params: SmileParams, config: ModelConfig, T: float, chi):
    """w and its first two derivatives in log-moneyness chi."""
    scale = 1.0 / (config.sigma_star * math.sqrt(T))
    w, wz, wzz = eval_w_derivs(params, config, T, np.asarray(chi, dtype=float) * scale)
    return w, wz * scale, wzz * scale * scale


def wing_function(y, steepness, config: ModelConfig):
    """Y(y), Y'(y), Y''(y) for one wing steepness."""
    return kernels.wing_function(np.asarray(y, dtype=float), steepness, config.sigmoid_id)


def hinge_continuity_check(params: SmileParams, config: ModelConfig, tol: float = 1e-8) -> dict:
    """One-sided finite-difference limits of Y' and Y'' at the hinge.

    Both branches must give Y'(0) = -1 and Y''(0) = 0.  First derivatives
    use a second-order one-sided stencil with h = 1e-6, second derivatives a
    third-order stencil with h = 3e-5.

    Returns:
        dict with per-side limits, ``violations`` (list of strings) and
        ``ok``.
    """
    h1, h2 = 1e-6, 3e-5
    report = {"violations": []}
    for side, steep, sgn in (("left", params.alpha, -1.0), ("right", params.beta, 1.0)):

        def Y(u, _steep=steep):
            return wing_function(np.asarray(u, dtype=float), _steep, config)[0]

        k = np.arange(4.0)
        y1 = Y(sgn * h1 * k[:3])
        d1 = sgn * (-3.0 * y1[0] + 4.0 * y1[1] - y1[2]) / (2.0 * h1)
        y2 = Y(sgn * h2 * k)
        d2 = (2.0 * y2[0] - 5.0 * y2[1] + 4.0 * y2[2] - y2[3]) / (h2 * h2)
        report[f"{side}_first"] = float(d1)
        report[f"{side}_second"] = float(d2)
        if abs(d1 + 1.0) > tol:
            report["violations"].append(f"{side} Y'(0) = {d1:.12g}, expected -1")
        if abs(d2) > tol:
            report["violations"].append(f"{side} Y''(0) = {d2:.12g}, expected 0")
    report["ok"] = not report["violations"]
    return report


def wing_slopes(params: SmileParams, config: ModelConfig, T: float | None = None) -> WingSlopes:
    """Large-|y| slopes of w per unit y*sqrt(T).

    With saturation L of the sigmoid, phi+ = L (L K - S |beta|) / beta^2 and
    phi- = -L (L K + S |alpha|) / alpha^2.  ``T`` is accepted for symmetry
    with the other evaluators; the slopes do not depend on it.  A steepness
    below 1e-8 makes Y linear, so the slope is infinite unless S = K = 0;
    that case is flagged and reported as +-inf.
    """
    L = config.saturation
    s, kurt = params.s, params.kurt
    a, b = abs(params.alpha), abs(params.beta)
    flat = s == 0.0 and kurt == 0.0

    def side(steep, sign):
        if steep < DEGENERATE_STEEPNESS:
            return (0.0 if flat else sign * math.inf), True
        if sign > 0:
            return L * (L * kurt - s * steep) / (steep * steep), False
        return -L * (L * kurt + s * steep) / (steep * steep), False

    pp, dp = side(b, 1.0)
    pm, dm = side(a, -1.0)
    return WingSlopes(phi_plus=pp, phi_minus=pm, degenerate_plus=dp, degenerate_minus=dm)


def lee_slopes_chi(params: SmileParams, config: ModelConfig) -> tuple[float, float]:
    """Wing slopes per unit log-moneyness."""
    ws = wing_slopes(params, config)
    return ws.phi_plus / config.sigma_star, ws.phi_minus / config.sigma_star


def atm_quantities(params: SmileParams, config: ModelConfig, T: float) -> dict:
    """ATM variance, skew and kurtosis (w, w_z, w_zz at z = 0).

    The ``approx_*`` entries are the large-p|C| closed-form expansions, for
    diagnostics only.
    """
    w0, s_atm, k_atm = eval_w_derivs(params, config, T, 0.0)
    C, sc = params.c, params.s_c
    steep = params.alpha if -C <= 0.0 else params.beta
    A, A1, A2 = (float(v) for v in wing_function(-C, steep, config))
    th = math.tanh(config.p * C)
    rt = math.sqrt(T)
    S, K = params.s, params.kurt
    a = steep if abs(steep) >= DEGENERATE_STEEPNESS else 1.0
    approx_var = params.w_c - C / (1.0 + C * C) * sc + A * C * rt * th * (S * a + A * K) / (a * a)
    approx_skew = -(C * C - 1.0) / (C * C + 1.0) ** 2 * sc + th * rt * (
        -A * (S + K * A) + C * A1 * (S + 2.0 * K * A)
    )
    approx_kurt = -2.0 * sc * C * (C * C - 3.0) / (C * C + 1.0) ** 3 + rt * th * (
        -2.0 * A1 * (K * (2.0 * A - C * A1) + S) + C * A2 * (2.0 * A * K + S)
    )
    return {
        "w0": w0,
        "skew": s_atm,
        "kurtosis": k_atm,
        "approx_w0": approx_var,
        "approx_skew": approx_skew,
        "approx_kurtosis": approx_kurt,
    }


def hinge_from_atm_skew(s_c, s_atm, s, T, p, y_prime0=-1.0, sign: float = 1.0) -> float:
    """Hinge location implied by the ATM skew.

    C^2 = (S_C - S_ATM) / (3 S_C - 2 p S sqrt(T) Y'(0)); at T = 0 this is
    (S_C - S_ATM) / (3 S_C).  ``sign`` picks the root; a positive hinge
    requires S_C > 0.

    Raises:
        ValueError: 'approximation inconsistent' for a negative radicand or
            a sign clash; zero denominator.
    """
    den = 3.0 * s_c - 2.0 * p * s * math.sqrt(T) * y_prime0
    if den == 0.0:
        raise ValueError("zero denominator")
    num = s_c - s_atm
    if num == 0.0:
        return 0.0
    r = num / den
    if r < 0.0:
        raise ValueError("approximation inconsistent: negative radicand")
    if sign > 0 and not s_c > 0.0:
        raise ValueError("approximation inconsistent: a positive hinge needs S_C > 0")
    return math.copysign(math.sqrt(r), sign)


def t0_limit(params: SmileParams, config: ModelConfig, K, F) -> np.ndarray:
    """Short-expiry limit of w at fixed strike: w_C + (phi / sigma_star) log(K/F)."""
    chi = np.log(np.asarray(K, dtype=float) / F)
    ws = wing_slopes(params, config)
    pp = 0.0 if ws.phi_plus == 0.0 else ws.phi_plus
    pm = 0.0 if ws.phi_minus == 0.0 else ws.phi_minus
    with np.errstate(invalid="ignore"):
        slope = np.where(chi > 0.0, pp, np.where(chi < 0.0, pm, 0.0)) / config.sigma_star
        out = params.w_c + np.where(chi == 0.0, 0.0, slope * chi)
    return out if np.ndim(out) else float(out)
