import math

import mpmath
import numpy as np
import pytest

from sigmoidvol import kernels
from sigmoidvol.black_scholes import (
    bs_call,
    bs_d2,
    bs_delta,
    bs_put,
    erf_approx,
    implied_total_variance,
    implied_vol,
    mills_ratio,
    normalized_call,
    normalized_otm,
)

mpmath.mp.dps = 40


def erf_oracle(x):
    return np.array([float(mpmath.erf(mpmath.mpf(float(v)))) for v in np.atleast_1d(x)])


def mills_oracle(x):
    x = mpmath.mpf(float(x))
    return float(mpmath.erfc(x / mpmath.sqrt(2)) / 2 / (mpmath.exp(-x * x / 2) / mpmath.sqrt(2 * mpmath.pi)))


def ncdf_oracle(x):
    return float((1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))) / 2)


class TestErfApprox:
    def test_origin_and_odd(self, rng):
        assert erf_approx(0.0) == 0.0
        x = rng.uniform(0, 6, 500)
        assert np.array_equal(erf_approx(-x), -erf_approx(x))

    def test_error_bound_coarse(self):
        # full 1e-3 sweep lives in the acceptance suite
        x = np.linspace(0.0, 6.0, 601)
        assert np.max(np.abs(erf_approx(x) - erf_oracle(x))) <= 3e-7

    def test_monotone(self):
        x = np.arange(-6.0, 6.0 + 5e-4, 1e-3)
        assert np.all(np.diff(erf_approx(x)) >= 0.0)

    def test_backends_agree(self):
        x = np.linspace(-6, 6, 1001)
        for name in ("python", "compiled"):
            try:
                mod = kernels.backend_module(name)
            except ImportError:
                continue
            assert np.allclose(mod.erf_approx(x), erf_approx(x), rtol=0, atol=1e-15)


class TestMills:
    def test_at_zero(self):
        assert mills_ratio(0.0) == pytest.approx(math.sqrt(math.pi / 2.0), rel=1e-14)

    def test_asymptote(self):
        assert abs(mills_ratio(50.0) * 50.0 - 1.0) < 1e-3

    def test_continued_fraction_branch(self):
        expected = mills_oracle(2.0)
        assert abs(mills_ratio(2.0) - expected) < 1e-9

    @pytest.mark.parametrize("x", [-5.0, -1.0, 0.3, 1.0, 1.0001, 1.5, 3.0, 8.0, 25.0])
    def test_against_oracle(self, x):
        assert mills_ratio(x) == pytest.approx(mills_oracle(x), rel=1e-10)

    def test_positive_decreasing(self):
        x = np.linspace(0, 10, 1001)
        r = mills_ratio(x)
        assert np.all(r > 0) and np.all(np.diff(r) < 0)

    def test_kernel_agrees(self):
        x = np.linspace(-8, 30, 500)
        assert np.allclose(kernels.mills_ratio(x), mills_ratio(x), rtol=1e-12)


class TestPricing:
    def test_atm_closed_form(self):
        expected = 100.0 * (2.0 * ncdf_oracle(0.1) - 1.0)
        assert expected == pytest.approx(7.9656, abs=5e-5)
        assert bs_call(100.0, 100.0, 1.0, 0.2) == pytest.approx(expected, rel=1e-14)

    def test_deep_itm_limit(self):
        assert bs_call(100.0, 1e-8, 1.0, 0.2) == pytest.approx(100.0, rel=1e-9)

    def test_parity(self, rng):
        F = rng.uniform(10, 200, 100)
        K = F * np.exp(rng.uniform(-1, 1, 100))
        T = rng.uniform(0.01, 5, 100)
        v = rng.uniform(0.05, 1.0, 100)
        assert np.allclose(bs_call(F, K, T, v) - bs_put(F, K, T, v), F - K, atol=1e-12 * F.max())

    def test_monotonicity(self, rng):
        F, K, T, v = 100.0, rng.uniform(50, 150, 200), rng.uniform(0.05, 3, 200), rng.uniform(0.05, 0.8, 200)
        c = bs_call(F, K, T, v)
        assert np.all(bs_call(F, K + 1e-3, T, v) < c)
        assert np.all(bs_call(F, K, T + 1e-3, v) >= c)
        assert np.all(bs_call(F, K, T, v + 1e-4) >= c)
        assert np.all(bs_call(F, 100.0, T + 1e-3, v) > bs_call(F, 100.0, T, v))

    def test_d2_and_delta(self):
        assert bs_d2(100.0, 100.0, 1.0, 0.2) == pytest.approx(-0.1)
        assert bs_delta(100.0, 100.0, 1.0, 0.2, "call") == pytest.approx(ncdf_oracle(0.1), rel=1e-14)
        assert bs_delta(100.0, 100.0, 1.0, 0.2, "put") == pytest.approx(ncdf_oracle(0.1) - 1.0, rel=1e-13)

    def test_domain(self):
        with pytest.raises(ValueError):
            bs_call(100.0, -1.0, 1.0, 0.2)
        with pytest.raises(ValueError):
            bs_call(100.0, 100.0, 1.0, 0.0)

    def test_normalized_helpers(self):
        k = np.array([0.7, 1.0, 1.4])
        w = np.array([0.04, 0.05, 0.09])
        assert np.allclose(normalized_call(k, w), bs_call(1.0, k, 1.0, np.sqrt(w)), rtol=1e-14)
        otm = normalized_otm(k, w)
        assert otm[0] == pytest.approx(float(bs_put(1.0, 0.7, 1.0, 0.2)), rel=1e-13)


class TestImpliedVol:
    @pytest.mark.parametrize("K,otype", [(80.0, "call"), (100.0, "call"), (130.0, "put"), (70.0, "put")])
    def test_round_trip(self, K, otype):
        price = float(bs_put(100.0, K, 0.75, 0.2)) if otype == "put" else float(bs_call(100.0, K, 0.75, 0.2))
        iv = implied_vol(price, 100.0, K, 0.75, otype)
        assert iv == pytest.approx(0.2, abs=1e-8)
        again = bs_call(100.0, K, 0.75, iv) if otype == "call" else bs_put(100.0, K, 0.75, iv)
        assert abs(again - price) < 1e-10

    def test_intrinsic_rejected(self):
        with pytest.raises(ValueError, match="lower bound"):
            implied_vol(20.0, 100.0, 80.0, 1.0, "call")

    def test_above_forward_rejected(self):
        with pytest.raises(ValueError, match="upper bound"):
            implied_vol(100.5, 100.0, 80.0, 1.0, "call")

    def test_total_variance_inversion(self):
        for k, w in [(0.8, 0.03), (1.0, 0.1), (1.3, 0.2)]:
            q = float(normalized_otm(k, w))
            assert implied_total_variance(q, k) == pytest.approx(w, rel=1e-10)
