import math

import numpy as np
import pytest
from scipy.stats import norm

from sigmoidvol.black_scholes import bs_call, normalized_call
from sigmoidvol.calibration import FitResult
from sigmoidvol.errors import ArbitrageError, InputError
from sigmoidvol.market_data import Grid
from sigmoidvol.smile import SmileParams
from sigmoidvol.surface import (
    InterpolatorConfig,
    _combined,
    _power_clock,
    _table_clock,
    build_surface,
    calibrated_slice,
    extrapolate_term,
    implied_density,
    interpolate_term,
    local_vol,
    single_quote_term,
)

from .conftest import flat_fit, flat_market

LINEAR = InterpolatorConfig(clock="linear")
SQRT = InterpolatorConfig(clock="table", table=tuple((t, math.sqrt(t)) for t in np.geomspace(0.05, 4.0, 80)))


def flat_prices(K, F, T, sigma):
    return bs_call(F, np.asarray(K, dtype=float), T, sigma)


class TestInterpolateTerm:
    K = np.linspace(70.0, 130.0, 13)

    def test_endpoints_bit_identical(self):
        c1 = flat_prices(self.K, 100.0, 0.5, 0.2)
        c2 = flat_prices(self.K, 100.0, 1.0, 0.22)
        a = interpolate_term(c1, c2, 0.5, 1.0, 0.5)
        b = interpolate_term(c1, c2, 0.5, 1.0, 1.0)
        assert np.array_equal(a, c1) and a is not c1
        assert np.array_equal(b, c2)

    def test_linear_midpoint_is_mean(self):
        c1 = flat_prices(self.K, 100.0, 0.5, 0.2)
        c2 = flat_prices(self.K, 100.0, 1.0, 0.22)
        mid = interpolate_term(c1, c2, 0.5, 1.0, 0.75)
        assert np.allclose(mid, 0.5 * (c1 + c2), rtol=1e-15, atol=1e-15)

    def test_monotone_and_convex(self):
        T1, T2 = 0.5, 1.0
        c1 = flat_prices(self.K, 100.0, T1, 0.25)
        c2 = flat_prices(self.K, 100.0, T2, 0.2)
        clock = _power_clock(-1.0 + 1.5)  # sqrt(T), increasing
        rows = [interpolate_term(c1, c2, T1, T2, T, clock) for T in np.linspace(T1, T2, 11)]
        rows = np.array(rows)
        assert np.all(np.diff(rows, axis=0) >= 0.0)
        second = rows[:, 2:] - 2 * rows[:, 1:-1] + rows[:, :-2]
        assert second.min() >= -1e-8

    def test_errors(self):
        c = np.ones(3)
        with pytest.raises(InputError, match="outside"):
            interpolate_term(c, c, 0.5, 1.0, 1.2)
        with pytest.raises(InputError):
            interpolate_term(c, np.ones(4), 0.5, 1.0, 0.7)
        with pytest.raises(InputError, match="non-monotone"):
            interpolate_term(c, c, 0.5, 1.0, 0.7, clock=lambda t: np.cos(6 * np.asarray(t)))

    def test_table_clock(self):
        clock = _table_clock(((0.5, 1.0), (0.75, 1.8), (1.0, 2.0)))
        c1, c2 = np.array([1.0]), np.array([3.0])
        # alpha = (2 - 1.8) / (2 - 1) = 0.2
        assert interpolate_term(c1, c2, 0.5, 1.0, 0.75, clock)[0] == pytest.approx(0.2 * 1 + 0.8 * 3)
        with pytest.raises(InputError, match="non-monotone"):
            _table_clock(((0.5, 1.0), (0.75, 2.0), (1.0, 1.5)))


class TestExtrapolateTerm:
    K = np.linspace(60.0, 150.0, 19)

    def test_endpoint(self):
        c1 = flat_prices(self.K, 100.0, 0.5, 0.2)
        c2 = flat_prices(self.K, 100.0, 1.0, 0.2)
        assert np.array_equal(extrapolate_term(c1, c2, 0.5, 1.0, 1.0), c2)

    @pytest.mark.parametrize("k", [-0.4, -0.5, 0.0, math.nan])
    def test_exponent_bound(self, k):
        c = np.ones(2)
        with pytest.raises(InputError, match="below -0.5"):
            extrapolate_term(c, c, 0.5, 1.0, 1.5, k=k)
        with pytest.raises(InputError, match="below -0.5"):
            InterpolatorConfig(k=k)

    def test_k_minus_one_accepted(self):
        assert InterpolatorConfig(k=-1.0).k == -1.0
        assert InterpolatorConfig(k=-0.51).k == -0.51

    def test_flat_terms_beyond_last(self):
        F, T1, T2 = 100.0, 0.5, 1.0
        T = 1.5 * T2
        c1 = flat_prices(self.K, F, T1, 0.2)
        c2 = flat_prices(self.K, F, T2, 0.2)
        c = extrapolate_term(c1, c2, T1, T2, T, k=-1.0, intrinsic=np.maximum(F - self.K, 0.0))
        # calendar versus T2 and the Lee envelope at every strike
        assert np.all(c - c2 >= -1e-12)
        chi = np.log(self.K / F)
        wing = chi != 0.0  # the bound is void at the forward
        lee = F * normalized_call(self.K[wing] / F, 2.0 * np.abs(chi[wing]))
        assert np.all(c[wing] < lee)
        # flat vol is reproduced since sqrt(T) scaling is exact at the money
        atm = int(np.argmin(np.abs(chi)))
        assert c[atm] == pytest.approx(flat_prices(self.K[atm], F, T, 0.2), rel=1e-3)

    def test_itm_calls_need_intrinsic_split(self):
        # weights sum below one beyond T2, so raw ITM calls lose intrinsic value
        c1 = flat_prices(self.K, 100.0, 0.5, 0.2)
        c2 = flat_prices(self.K, 100.0, 1.0, 0.2)
        with pytest.raises(ArbitrageError, match="extrapolation precondition failed") as exc:
            extrapolate_term(c1, c2, 0.5, 1.0, 1.5)
        assert all(self.K[n[1]] < 100.0 for n in exc.value.nodes)
        otm = self.K >= 100.0
        extrapolate_term(c1[otm], c2[otm], 0.5, 1.0, 1.5)

    def test_precondition_failure(self):
        # the later term is much cheaper, so scaled prices decrease beyond T2
        c1 = flat_prices(self.K, 100.0, 0.5, 0.4)
        c2 = flat_prices(self.K, 100.0, 1.0, 0.1)
        with pytest.raises(ArbitrageError, match="extrapolation precondition failed"):
            extrapolate_term(c1, c2, 0.5, 1.0, 1.5)

    def test_inside_span_rejected(self):
        c = np.ones(2)
        with pytest.raises(InputError, match="interpolate_term"):
            extrapolate_term(c, c, 0.5, 1.0, 0.7)


@pytest.fixture(scope="module")
def neighbours(xlf, xlf_fits):
    return calibrated_slice(xlf_fits[0], xlf.model), calibrated_slice(xlf_fits[-1], xlf.model)


class TestSingleQuote:
    def test_linear_quote_reproduces_linear_slice(self, xlf, neighbours):
        left, right = neighbours
        term = xlf.terms[2]
        T, F, K = term.maturity, term.forward, 20.0
        a = (right.maturity - T) / (right.maturity - left.maturity)
        linear = _combined(left, right, T, F, a, 0.0)
        iv = math.sqrt(float(linear.total_variance(K / F)) / T)
        sl = single_quote_term((K, T, iv), left, right, F)
        assert sl.alpha == pytest.approx(a, abs=1e-9)
        k = xlf.grid.strikes[2] / F
        assert np.allclose(sl.call(k), linear.call(k), atol=1e-10)

    def test_perturbed_quote_exact(self, xlf, neighbours):
        left, right = neighbours
        for idx in range(1, 5):
            term = xlf.terms[idx]
            j = int(np.argmin(np.abs(term.strikes - term.forward)))
            K, iv = float(term.strikes[j]), float(term.iv[j]) + 0.005
            sl = single_quote_term((K, term.maturity, iv), left, right, term.forward)
            target = bs_call(term.forward, K, term.maturity, iv)
            assert term.forward * float(sl.call(K / term.forward)) == pytest.approx(target, abs=1e-10)

    def test_calendar_violating_quote(self, xlf, neighbours):
        left, right = neighbours
        term = xlf.terms[3]
        K = 22.0
        low = math.sqrt(float(left.total_variance(K / term.forward)) / term.maturity) * 0.5
        with pytest.raises(InputError, match="default anchor"):
            single_quote_term((K, term.maturity, low), left, right, term.forward)

    def test_bracket_required(self, xlf, neighbours):
        left, right = neighbours
        with pytest.raises(InputError, match="bracket"):
            single_quote_term((22.0, 1.0, 0.2), left, right, 22.9)


class TestBuildSurface:
    def test_xlf_shape_and_checks(self, xlf, xlf_surface):
        s = xlf_surface
        assert s.w.shape == (6, 23)
        assert s.sources == ("calibrated",) + ("interpolated",) * 4 + ("calibrated",)
        assert s.ok and s.report.ok
        assert np.all(s.w > 0)
        assert s.diagnostics["anchor_strike"] == 17.0

    def test_xlf_alpha_decreasing(self, xlf_surface):
        al = xlf_surface.alphas[1:-1]
        assert np.all((al > 0) & (al < 1)) and np.all(np.diff(al) < 0)

    def test_xlf_anchor_quotes_reproduced(self, xlf, xlf_surface):
        for d in xlf_surface.diagnostics.get("anchors", []):
            term = next(t for t in xlf.terms if t.maturity == d["T"])
            i = int(np.argmin(np.abs(xlf_surface.expiries - d["T"])))
            K = d["strike"]
            iv = float(term.iv[np.argmin(np.abs(term.strikes - K))])
            got = term.forward * float(xlf_surface.slices[i].call(K / term.forward))
            assert got == pytest.approx(bs_call(term.forward, K, term.maturity, iv), abs=1e-10)

    def test_xlf_calendar_and_convexity(self, xlf_surface):
        s = xlf_surface
        assert np.all(s.calendar_strike >= -1e-8)
        P = s.prices
        assert np.all(P[:, 2:] - 2 * P[:, 1:-1] + P[:, :-2] >= -1e-8)
        assert np.all(s.lee_envelope > 0)

    def test_calibrated_rows_match_params(self, xlf, xlf_fits, xlf_surface):
        from sigmoidvol.smile import eval_w_chi

        for i in (0, 5):
            w = eval_w_chi(xlf_fits[i].params, xlf.model, xlf_fits[i].maturity, xlf_surface.chi[i])[0]
            assert np.array_equal(xlf_surface.w[i], w)

    def test_single_term_no_extrapolation(self):
        _, grid, fits, model = flat_market([0.5])
        s = build_surface(fits, grid, model, config=InterpolatorConfig(extrapolate=False))
        assert s.w.shape == (1, 41) and s.sources == ("calibrated",) and s.ok

    def test_extrapolation_off_rejects(self):
        _, grid, fits, model = flat_market([0.25, 0.5, 1.0])
        with pytest.raises(InputError, match="extrapolation is off"):
            build_surface(fits[1:], grid, model, config=InterpolatorConfig(clock="linear", extrapolate=False))

    def test_short_expiry_extrapolated(self):
        # below T1 the longer term gets a negative weight, so keep the band near the money
        _, grid, fits, model = flat_market([0.1, 0.5, 1.0], gamma=2.0)
        s = build_surface(fits[1:], grid, model, config=LINEAR)
        assert s.sources == ("extrapolated", "calibrated", "calibrated")
        assert s.ok and np.all(s.calendar_strike >= -1e-8)
        assert np.all(s.w[0] > 0) and np.all(s.w[0] < s.w[1])

    def test_short_expiry_wings_rejected(self):
        _, grid, fits, model = flat_market([0.1, 0.5, 1.0], gamma=5.0)
        with pytest.raises(ArbitrageError, match="no positive total variance") as exc:
            build_surface(fits[1:], grid, model, config=LINEAR)
        chi = [math.log(n[1] / grid.forwards[0]) for n in exc.value.nodes]
        assert all(n[0] == 0.1 for n in exc.value.nodes) and min(abs(x) for x in chi) > 0.1

    def test_long_expiry_extrapolated(self):
        _, grid, fits, model = flat_market([0.5, 1.0, 1.5])
        s = build_surface(fits[:2], grid, model, config=LINEAR)
        assert s.sources[-1] == "extrapolated" and s.ok
        assert np.all(s.lee_envelope > 0)

    def test_rejection_lists_nodes(self):
        _, grid, fits, model = flat_market([0.5, 1.0])
        bad = SmileParams(w_c=0.01, s_c=0.0, c=0.0, s=0.0, kurt=0.0, alpha=1.0, beta=1.0)
        fits[1] = FitResult(maturity=1.0, forward=fits[1].forward, sigma_star=0.2, status="calibrated",
                            mode="full", params=bad)
        with pytest.raises(ArbitrageError) as exc:
            build_surface(fits, grid, model, config=LINEAR)
        assert exc.value.nodes and any(n[2] == "calendar" for n in exc.value.nodes)
        s = build_surface(fits, grid, model, config=LINEAR, reject=False)
        assert not s.ok

    def test_interpolated_flat_atm(self):
        # ATM prices grow like sqrt(T), so a sqrt(T) clock keeps the ATM vol
        _, grid, fits, model = flat_market([0.5, 0.75, 1.0])
        s = build_surface([fits[0], fits[2]], grid, model, config=SQRT)
        assert s.sources[1] == "interpolated" and s.ok
        assert s.iv[1, 20] == pytest.approx(0.2, abs=1e-4)
        lin = build_surface([fits[0], fits[2]], grid, model, config=LINEAR)
        assert lin.iv[1, 20] < s.iv[1, 20]


class TestLocalVol:
    def test_flat(self):
        _, grid, fits, model = flat_market([0.25, 0.5, 1.0])
        lv = local_vol(build_surface(fits, grid, model, config=LINEAR))
        assert np.allclose(lv.sigma, 0.2, rtol=1e-10)

    def test_flat_interpolated(self):
        _, grid, fits, model = flat_market([0.25, 0.5, 1.0])
        s = build_surface([fits[0], fits[2]], grid, model, config=LINEAR)
        lv = local_vol(s)
        assert np.all(lv.sigma > 0) and np.all(np.isfinite(lv.sigma))
        assert np.allclose(lv.sigma**2 * lv.denominator, lv.dw_dt, rtol=1e-12)

    def test_interpolated_time_derivative(self):
        # analytic dw/dT of an interpolated row against a central difference in T
        _, grid, fits, model = flat_market([0.25, 0.5, 1.0])
        s = build_surface([fits[0], fits[2]], grid, model, config=LINEAR)
        left, right = s.slices[0], s.slices[2]
        F, k = s.forwards[1], s.strikes[1] / s.forwards[1]

        def w_at(T):
            a = (1.0 - T) / 0.75
            return _combined(left, right, T, F, a, -1.0 / 0.75).total_variance(k)

        h = 1e-4
        fd = (w_at(0.5 + h) - w_at(0.5 - h)) / (2 * h)
        assert np.allclose(local_vol(s).dw_dt[1], fd, rtol=1e-6)

    def test_shifted_variance(self):
        # w = sigma^2 T + c at every strike gives sigma_loc = sigma
        sigma, c = 0.2, 0.01
        _, grid, fits, model = flat_market([0.25, 0.5, 1.0])
        shifted = [flat_fit(T, F, 0.0, sigma) for T, F in zip(grid.expiries, grid.forwards)]
        shifted = [
            FitResult(maturity=f.maturity, forward=f.forward, sigma_star=sigma, status="calibrated", mode="full",
                      params=f.params.replace(w_c=sigma * sigma * f.maturity + c))
            for f in shifted
        ]
        lv = local_vol(build_surface(shifted, grid, model, config=LINEAR))
        assert np.allclose(lv.sigma, sigma, rtol=1e-10)

    def test_xlf_positive(self, xlf_surface):
        lv = local_vol(xlf_surface)
        assert np.all(lv.sigma > 0) and np.all(np.isfinite(lv.sigma))

    def test_dupire_consistency(self, xlf_surface):
        lv = local_vol(xlf_surface)
        lhs = lv.sigma**2 * lv.denominator
        assert np.allclose(lhs, lv.dw_dt, rtol=1e-6, atol=0)

    def test_negative_local_variance_raises(self):
        _, grid, fits, model = flat_market([0.5, 1.0])
        fits[1] = FitResult(maturity=1.0, forward=fits[1].forward, sigma_star=0.2, status="calibrated",
                            mode="full", params=fits[1].params.replace(w_c=0.015))
        s = build_surface(fits, grid, model, config=LINEAR, reject=False)
        with pytest.raises(ArbitrageError, match="negative local variance"):
            local_vol(s)


class TestDensity:
    def test_lognormal(self):
        sigma, T = 0.2, 0.5
        _, grid, fits, model = flat_market([T, 1.0], n_z=401)
        s = build_surface(fits, grid, model, config=LINEAR)
        row = implied_density(s, 0)
        F = s.forwards[0]
        z = np.log(row.strikes / F) / (sigma * math.sqrt(T))
        d2 = -np.log(row.strikes / F) / (sigma * math.sqrt(T)) - 0.5 * sigma * math.sqrt(T)
        exact = norm.pdf(d2) / (row.strikes * sigma * math.sqrt(T))
        inner = np.abs(z) <= 3.0
        assert np.allclose(row.pdf[inner], exact[inner], rtol=1e-3, atol=0)
        assert abs(row.mass_on_grid - 1.0) < 0.02
        assert row.total_mass == pytest.approx(1.0, abs=1e-3)

    def test_xlf_nonnegative(self, xlf_surface):
        for i in range(xlf_surface.expiries.size):
            row = implied_density(xlf_surface, i)
            assert np.all(row.pdf >= 0)
            assert 0.0 <= row.tail_low <= 1.0 and 0.0 <= row.tail_high <= 1.0

    def test_sign_matches_denominator(self, xlf_surface):
        lv = local_vol(xlf_surface)
        for i in range(xlf_surface.expiries.size):
            row = implied_density(xlf_surface, i)
            assert np.all((row.pdf >= 0) == (lv.denominator[i, 1:-1] >= 0))

    def test_single_strike(self):
        _, grid, fits, model = flat_market([0.5], n_z=1)
        s = build_surface(fits, grid, model, config=InterpolatorConfig(extrapolate=False))
        with pytest.raises(InputError, match="insufficient strikes for second difference"):
            implied_density(s, 0)

    def test_negative_density_raises(self):
        _, grid, fits, model = flat_market([0.5], gamma=3.0)
        P = fits[0].params.replace(s_c=-0.02, kurt=-0.01, alpha=2.0, beta=2.0)
        bad = FitResult(maturity=0.5, forward=fits[0].forward, sigma_star=0.2, status="calibrated", mode="full",
                        params=P)
        s = build_surface([bad], grid, model, config=InterpolatorConfig(extrapolate=False), reject=False)
        assert not s.ok
        with pytest.raises(ArbitrageError, match="negative density"):
            implied_density(s, 0)


def test_grid_type_roundtrip():
    g = Grid(expiries=np.array([0.5]), forwards=np.array([100.0]), strikes=np.array([[90.0, 100.0, 110.0]]),
             mode="strike_list")
    s = build_surface([flat_fit(0.5, 100.0, 0.2, 0.2)], g, flat_market([0.5])[3],
                      config=InterpolatorConfig(extrapolate=False))
    assert np.allclose(s.iv, 0.2, rtol=1e-12)
