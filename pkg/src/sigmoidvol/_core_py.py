"""Pure numpy implementation of the calibration kernels.

This module mirrors ``_core.pyx`` function for function.  It is selected by
:mod:`sigmoidvol.kernels` when the compiled extension is unavailable or when
``SIGMOIDVOL_BACKEND=python`` is set.  Everything here is vectorised over a
population of parameter vectors so the optimizer can score one generation
with a handful of array operations.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, erfcx

SIGMOID_ERF = 0
SIGMOID_ARCTAN = 1
SIGMOID_ERF_APPROX = 2

# erf(sqrt(pi)/2 * x) has unit slope at the origin, like arctan.
_ERF_SCALE = math.sqrt(math.pi) / 2.0
_DEGENERATE = 1e-8
_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)

ERF_COEFFS = (
    0.0705230784,
    0.0422820123,
    0.0092705272,
    0.0001520143,
    0.0002765672,
    0.0000430638,
)

N_MARGINS = 5  # positivity, butterfly, vertical lower, vertical upper, calendar


def saturation(sigmoid: int) -> float:
    if sigmoid == SIGMOID_ARCTAN:
        return math.pi / 2.0
    return 1.0


def _erf_approx_parts(u):
    """Value, first and second derivative of the six-constant erf fit."""
    a1, a2, a3, a4, a5, a6 = ERF_COEFFS
    sgn = np.where(u < 0.0, -1.0, 1.0)
    x = np.abs(u)
    poly = 1.0 + x * (a1 + x * (a2 + x * (a3 + x * (a4 + x * (a5 + x * a6)))))
    d1 = a1 + x * (2 * a2 + x * (3 * a3 + x * (4 * a4 + x * (5 * a5 + x * 6 * a6))))
    d2 = 2 * a2 + x * (6 * a3 + x * (12 * a4 + x * (20 * a5 + x * 30 * a6)))
    inv = 1.0 / poly
    p16 = inv**16
    val = 1.0 - p16
    der1 = 16.0 * d1 * p16 * inv
    der2 = 16.0 * p16 * inv * (d2 - 17.0 * d1 * d1 * inv)
    return sgn * val, der1, sgn * der2


def erf_approx(x):
    return _erf_approx_parts(np.asarray(x, dtype=float))[0]


def sigmoid_parts(x, sigmoid: int):
    """Unit-slope sigmoid and its first two derivatives."""
    if sigmoid == SIGMOID_ARCTAN:
        q = 1.0 / (1.0 + x * x)
        return np.arctan(x), q, -2.0 * x * q * q
    if sigmoid == SIGMOID_ERF:
        g = np.exp(-0.25 * math.pi * x * x)
        return erf(_ERF_SCALE * x), g, -0.5 * math.pi * x * g
    if sigmoid == SIGMOID_ERF_APPROX:
        v, d1, d2 = _erf_approx_parts(_ERF_SCALE * x)
        return v, _ERF_SCALE * d1, _ERF_SCALE * _ERF_SCALE * d2
    raise ValueError(f"unknown sigmoid id {sigmoid}")


def wing_function(y, steep, sigmoid: int):
    """Y(y), Y'(y), Y''(y) for a (broadcastable) steepness array."""
    steep = np.broadcast_to(steep, np.broadcast(y, steep).shape)
    y = np.broadcast_to(y, steep.shape)
    degenerate = np.abs(steep) < _DEGENERATE
    safe = np.where(degenerate, 1.0, steep)
    x = -safe * y
    s, s1, s2 = sigmoid_parts(x, sigmoid)
    Y = np.where(degenerate, -y, s / safe)
    Y1 = np.where(degenerate, -1.0, -s1)
    Y2 = np.where(degenerate, 0.0, safe * s2)
    return Y, Y1, Y2


def smile_derivs_batch(P, z, sqrt_t: float, p: float, sigmoid: int):
    """Total variance and its first two z-derivatives.

    ``P`` has shape (n, 7) in the order (w_c, s_c, c, s, kurt, alpha, beta);
    ``z`` has shape (m,).  Returns three (n, m) arrays.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    z = np.asarray(z, dtype=float)
    w_c, s_c, c, s, kurt, alpha, beta = (P[:, i : i + 1] for i in range(7))
    y = z[None, :] - c
    steep = np.where(y <= 0.0, alpha, beta)
    Y, Y1, Y2 = wing_function(y, steep, sigmoid)

    py = p * y
    t = np.tanh(py)
    sech2 = 1.0 - t * t
    h = y * t
    h1 = t + py * sech2
    h2 = 2.0 * p * sech2 * (1.0 - py * t)

    g = s * Y + kurt * Y * Y
    gY = s + 2.0 * kurt * Y
    gYY = 2.0 * kurt

    y2 = y * y
    q = 1.0 / (1.0 + y2)
    w = w_c + s_c * y * q + sqrt_t * h * g
    wz = s_c * (1.0 - y2) * q * q + sqrt_t * (h1 * g + h * gY * Y1)
    wzz = (
        s_c * (2.0 * y2 * y - 6.0 * y) * q * q * q
        + sqrt_t * (h2 * g + 2.0 * h1 * gY * Y1 + h * (gYY * Y1 * Y1 + gY * Y2))
    )
    return w, wz, wzz


def mills_ratio(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return _SQRT_HALF_PI * erfcx(x / math.sqrt(2.0))


def wing_slope_margins(P, sigma_star: float, sigmoid: int):
    """Lee margins (n, 4): phi+, 2 - phi+, -phi-, phi- + 2, slopes per unit chi."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    s, kurt = P[:, 3], P[:, 4]
    a, b = np.abs(P[:, 5]), np.abs(P[:, 6])
    L = saturation(sigmoid)
    flat = (s == 0.0) & (kurt == 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_p = np.where(b < _DEGENERATE, 0.0, L * (L * kurt - s * b) / (b * b))
        phi_m = np.where(a < _DEGENERATE, 0.0, -L * (L * kurt + s * a) / (a * a))
    phi_p = phi_p / sigma_star
    phi_m = phi_m / sigma_star
    out = np.stack([phi_p, 2.0 - phi_p, -phi_m, phi_m + 2.0], axis=1)
    bad_p = (b < _DEGENERATE) & ~flat
    bad_m = (a < _DEGENERATE) & ~flat
    out[bad_p, 0:2] = -1e6
    out[bad_m, 2:4] = -1e6
    return out


def node_margins(w, wchi, wchichi, chi, wprev, vconv: int):
    """No-arbitrage margins at grid nodes; non-negative means satisfied.

    All inputs broadcast to a common shape S; the result has shape S + (5,).
    ``vconv`` 0 uses the sign-corrected lower vertical bound, 1 the bound as
    printed in the original formulation.
    """
    w, wchi, wchichi, chi, wprev = np.broadcast_arrays(w, wchi, wchichi, chi, wprev)
    ok = w > 0.0
    ws = np.where(ok, w, 1.0)
    rw = np.sqrt(ws)
    bfly = (1.0 - chi * wchi / (2.0 * ws)) ** 2 - 0.25 * wchi * wchi * (1.0 / ws + 0.25) + 0.5 * wchichi
    d2 = -chi / rw - 0.5 * rw
    r_lo = mills_ratio(d2)
    r_hi = mills_ratio(-d2)
    if vconv == 0:
        v_lo = wchi + 2.0 * rw * r_lo
    else:
        v_lo = wchi - 2.0 * rw * r_lo
    v_hi = 2.0 * rw * r_hi - wchi
    cal = np.where(np.isnan(wprev), 0.0, w - wprev)
    out = np.stack(
        [
            w - 1e-7,
            np.where(ok, bfly, -1.0),
            np.where(ok, v_lo, -1.0),
            np.where(ok, v_hi, -1.0),
            cal,
        ],
        axis=-1,
    )
    return np.nan_to_num(out, nan=-1.0, posinf=1e300, neginf=-1e300)


def penalty_terms(node_m, lee_m, quote_m, wscale: float):
    """Normalised squared-violation sum and worst raw violation per candidate."""
    scale = np.array([wscale, 1.0, math.sqrt(wscale), math.sqrt(wscale), wscale])
    nv = np.minimum(node_m / scale, 0.0)
    pen = (nv * nv).sum(axis=(1, 2))
    worst = -node_m.min(axis=(1, 2))
    lv = np.minimum(lee_m, 0.0)
    pen += (lv * lv).sum(axis=1)
    worst = np.maximum(worst, -lee_m.min(axis=1))
    if quote_m.shape[1]:
        qv = np.minimum(quote_m / wscale, 0.0)
        pen += (qv * qv).sum(axis=1)
        worst = np.maximum(worst, -quote_m.min(axis=1))
    return pen, worst


def evaluate_population(
    P,
    zq,
    wq,
    wt,
    wlo,
    whi,
    zn,
    chin,
    wprev,
    sqrt_t: float,
    sigma_star: float,
    p: float,
    sigmoid: int,
    vconv: int,
    wscale: float,
):
    """Score a population: (weighted SSE, normalised penalty, worst violation)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    w_q = smile_derivs_batch(P, zq, sqrt_t, p, sigmoid)[0]
    resid = wq - w_q
    obj = (wt * resid * resid).sum(axis=1)

    w, wz, wzz = smile_derivs_batch(P, zn, sqrt_t, p, sigmoid)
    dz = 1.0 / (sigma_star * sqrt_t)
    node_m = node_margins(w, wz * dz, wzz * dz * dz, chin[None, :], wprev[None, :], vconv)
    lee_m = wing_slope_margins(P, sigma_star, sigmoid)

    has_band = ~np.isnan(wlo)
    if has_band.any():
        wb = w_q[:, has_band]
        quote_m = np.concatenate([wb - wlo[has_band], whi[has_band] - wb], axis=1)
    else:
        quote_m = np.empty((P.shape[0], 0))
    pen, worst = penalty_terms(node_m, lee_m, quote_m, wscale)
    return obj, pen, worst
