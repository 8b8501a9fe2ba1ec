"""Undiscounted Black-Scholes analytics on the forward.

Prices here are forward (undiscounted) values.  ``mills_ratio`` follows the
classic continued fraction for x > 1 and the erfc identity elsewhere.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc, ndtr

from . import kernels

SQRT_2PI = math.sqrt(2.0 * math.pi)
IV_LOWER = 1e-6
IV_UPPER = 10.0

CF_TOL = 1e-12
CF_MAX_DEPTH = 200


def erf_approx(x):
    """Six-constant rational approximation of erf, odd-extended to x < 0."""
    return kernels.erf_approx(np.asarray(x, dtype=float))


def norm_cdf(x):
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / SQRT_2PI


def _mills_cf(x: np.ndarray) -> np.ndarray:
    # Modified Lentz on R(x) = 1/(x + 1/(x + 2/(x + ...))).
    f = x.copy()
    c = x.copy()
    d = np.zeros_like(x)
    active = np.ones(x.shape, dtype=bool)
    for n in range(1, CF_MAX_DEPTH + 1):
        d = np.where(active, 1.0 / (x + n * d), d)
        c = np.where(active, x + n / c, c)
        delta = c * d
        f = np.where(active, f * delta, f)
        active &= np.abs(delta - 1.0) >= CF_TOL
        if not active.any():
            break
    return 1.0 / f


def mills_ratio(x):
    """Mills ratio R(x) = (1 - N(x)) / N'(x).

    Args:
        x: scalar or array.

    Returns:
        R(x) with the shape of ``x``.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xa)
    big = xa > 1.0
    if big.any():
        out[big] = _mills_cf(xa[big])
    small = ~big
    if small.any():
        xs = xa[small]
        with np.errstate(over="ignore", invalid="ignore"):
            out[small] = np.exp(0.5 * xs * xs) * math.sqrt(math.pi / 2.0) * erfc(xs / math.sqrt(2.0))
    return out.reshape(np.shape(x)) if np.ndim(x) else float(out[0])


def _check_positive(**kwargs):
    for name, val in kwargs.items():
        if np.any(np.asarray(val) <= 0.0):
            raise ValueError(f"{name} must be positive")


def bs_d1(F, K, T, vol):
    _check_positive(F=F, K=K, T=T, vol=vol)
    sd = vol * np.sqrt(T)
    return np.log(F / K) / sd + 0.5 * sd


def bs_d2(F, K, T, vol):
    _check_positive(F=F, K=K, T=T, vol=vol)
    sd = vol * np.sqrt(T)
    return np.log(F / K) / sd - 0.5 * sd


def bs_call(F, K, T, vol):
    """Undiscounted Black call."""
    d1 = bs_d1(F, K, T, vol)
    d2 = d1 - vol * np.sqrt(T)
    return F * ndtr(d1) - K * ndtr(d2)


def bs_put(F, K, T, vol):
    """Undiscounted Black put."""
    d1 = bs_d1(F, K, T, vol)
    d2 = d1 - vol * np.sqrt(T)
    return K * ndtr(-d2) - F * ndtr(-d1)


def bs_price(F, K, T, vol, option_type: str):
    if option_type == "call":
        return bs_call(F, K, T, vol)
    if option_type == "put":
        return bs_put(F, K, T, vol)
    raise ValueError(f"unknown option type {option_type!r}")


def bs_delta(F, K, T, vol, option_type: str):
    """Forward delta: N(d1) for calls, N(d1) - 1 for puts."""
    nd1 = ndtr(bs_d1(F, K, T, vol))
    if option_type == "call":
        return nd1
    if option_type == "put":
        return nd1 - 1.0
    raise ValueError(f"unknown option type {option_type!r}")


def implied_vol(price: float, F: float, K: float, T: float, option_type: str) -> float:
    """Invert the undiscounted Black price for the volatility.

    Uses a bracketed Brent search on [1e-6, 10].

    Raises:
        ValueError: if ``price`` lies outside the no-arbitrage bounds, naming
            the violated bound.
    """
    _check_positive(F=F, K=K, T=T)
    if option_type == "call":
        lower, upper = max(F - K, 0.0), F
    elif option_type == "put":
        lower, upper = max(K - F, 0.0), K
    else:
        raise ValueError(f"unknown option type {option_type!r}")
    if not price > lower:
        raise ValueError(f"price {price!r} at or below the intrinsic lower bound {lower!r}")
    if not price < upper:
        raise ValueError(f"price {price!r} at or above the upper bound {upper!r}")

    def f(v):
        return float(bs_price(F, K, T, v, option_type)) - price

    flo, fhi = f(IV_LOWER), f(IV_UPPER)
    if flo > 0.0:
        raise ValueError(f"price {price!r} implies a volatility below {IV_LOWER}")
    if fhi < 0.0:
        raise ValueError(f"price {price!r} implies a volatility above {IV_UPPER}")
    return brentq(f, IV_LOWER, IV_UPPER, xtol=1e-15, rtol=1e-15, maxiter=200)


# Forward-normalised helpers, k = K/F, chi = log k, w = total variance.


def normalized_call(k, w):
    """Call price divided by the forward."""
    k = np.asarray(k, dtype=float)
    w = np.asarray(w, dtype=float)
    rw = np.sqrt(w)
    chi = np.log(k)
    d1 = -chi / rw + 0.5 * rw
    return ndtr(d1) - k * ndtr(d1 - rw)


def normalized_otm(k, w):
    """Normalised out-of-the-money price: put for k < 1, call otherwise."""
    k = np.asarray(k, dtype=float)
    w = np.asarray(w, dtype=float)
    rw = np.sqrt(w)
    chi = np.log(k)
    d1 = -chi / rw + 0.5 * rw
    d2 = d1 - rw
    call = ndtr(d1) - k * ndtr(d2)
    put = k * ndtr(-d2) - ndtr(-d1)
    return np.where(k >= 1.0, call, put)


def implied_total_variance(q: float, k: float, w_hi: float = 100.0) -> float:
    """Total variance reproducing a normalised OTM price ``q`` at moneyness ``k``.

    Raises:
        ValueError: if ``q`` is outside (0, min(1, k)).
    """
    upper = k if k < 1.0 else 1.0
    if not 0.0 < q < upper:
        raise ValueError(f"normalised price {q!r} outside (0, {upper!r}) at k={k!r}")

    def f(w):
        return float(normalized_otm(k, w)) - q

    lo = 1e-14
    if f(lo) > 0.0:
        return lo
    return brentq(f, lo, w_hi, xtol=1e-18, rtol=1e-15, maxiter=300)
