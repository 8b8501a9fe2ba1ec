"""Property-based checks with hypothesis."""

import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sigmoidvol.black_scholes import implied_total_variance, normalized_call, normalized_otm
from sigmoidvol.no_arbitrage import check_calendar, dupire_denominator
from sigmoidvol.smile import ModelConfig, SmileParams, eval_w_derivs
from sigmoidvol.surface import interpolate_term
from sigmoidvol.svi_baseline import SviParams, svi_w

steep = st.floats(0.1, 5.0).flatmap(lambda v: st.sampled_from([v, -v]))
params = st.builds(
    SmileParams,
    w_c=st.floats(1e-3, 0.5),
    s_c=st.floats(-0.5, 0.5),
    c=st.floats(-2.0, 2.0),
    s=st.floats(-2.0, 2.0),
    kurt=st.floats(-1.0, 5.0),
    alpha=steep,
    beta=steep,
)
sigmoids = st.sampled_from(["erf", "arctan", "erf_approx"])


@settings(max_examples=200, deadline=None)
@given(params, sigmoids, st.floats(0.01, 3.0))
def test_hinge_value_and_slope(P, sigmoid, T):
    w, wz, _ = eval_w_derivs(P, ModelConfig(sigmoid=sigmoid), T, P.c)
    assert w == P.w_c
    assert math.isclose(wz, P.s_c, abs_tol=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(1e-3, 2.0))
def test_implied_variance_round_trip(chi, w):
    k = math.exp(chi)
    q = float(normalized_otm(k, w))
    if q < 1e-12 * min(1.0, k):
        return  # price below double resolution
    back = implied_total_variance(q, k)
    assert math.isclose(back, w, rel_tol=1e-7)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(1e-4, 4.0))
def test_call_bounds(chi, w):
    k = math.exp(chi)
    c = float(normalized_call(k, w))
    assert max(1.0 - k, 0.0) - 1e-15 <= c <= 1.0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.0, 50.0), min_size=3, max_size=10),
    st.lists(st.floats(0.0, 50.0), min_size=3, max_size=10),
    st.floats(0.0, 1.0),
)
def test_interpolation_is_between_endpoints(a, b, frac):
    n = min(len(a), len(b))
    c1, c2 = np.array(a[:n]), np.array(b[:n])
    T = 0.5 + 0.5 * frac
    c = interpolate_term(c1, c2, 0.5, 1.0, T)
    lo, hi = np.minimum(c1, c2), np.maximum(c1, c2)
    assert np.all(c >= lo - 1e-12) and np.all(c <= hi + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 0.5), min_size=1, max_size=8), st.floats(0.0, 0.1))
def test_calendar_margin_is_increment(w1, bump):
    w1 = np.array(w1)
    ok, margin = check_calendar(w1, w1 + bump)
    assert ok and np.allclose(margin, bump)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_denominator_flat_and_curvature(w, chi, wcc):
    # a flat smile gives exactly one; curvature enters linearly with weight 1/2
    assert dupire_denominator(w, 0.0, 0.0, chi) == 1.0
    assert math.isclose(dupire_denominator(w, 0.0, wcc, chi), 1.0 + 0.5 * wcc, rel_tol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(-0.99, 0.99), st.floats(0.01, 1.0), st.floats(-1.0, 1.0),
       st.floats(0.0, 0.1), st.floats(-5.0, 5.0))
def test_svi_minimum_variance(b, rho, sig, m, extra, chi):
    a = -b * sig * math.sqrt(1.0 - rho * rho) + extra
    P = SviParams(a=a, b=b, rho=rho, m=m, sigma=sig)
    assert svi_w(P, chi) >= P.min_variance - 1e-12
