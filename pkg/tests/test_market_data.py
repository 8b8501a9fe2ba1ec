import datetime as dt
import math

import numpy as np
import pytest

from sigmoidvol.errors import InputError
from sigmoidvol.market_data import (
    GridSpec,
    MarketContext,
    MarketQuote,
    TermQuotes,
    blend_call_put,
    build_grid,
    build_terms,
    load_context,
    load_quotes,
    normalized_strike,
)

from .conftest import XLF_RATE, XLF_SPOT

HEADER = "expiry,strike,type,iv,bid_iv,ask_iv,delta\n"
CTX = MarketContext(dt.date(2020, 1, 1), 100.0, 0.0)


def write(tmp_path, text, name="q.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestNormalizedStrike:
    def test_atm_is_zero(self):
        assert normalized_strike(100.0, 100.0, 0.5, 0.2) == 0.0

    def test_arithmetic(self):
        # log(K/F) = 0.2, sigma* = 0.2, T = 4 -> 0.2 / (0.2 * 2)
        K = 100.0 * math.exp(0.2)
        assert normalized_strike(K, 100.0, 4.0, 0.2) == pytest.approx(0.5, rel=1e-14)

    def test_sign_and_monotone(self):
        K = np.linspace(50, 150, 101)
        z = normalized_strike(K, 100.0, 0.3, 0.25)
        assert np.all(np.diff(z) > 0)
        assert np.all(np.sign(z) == np.sign(K - 100.0))

    def test_antisymmetric(self):
        K = np.array([60.0, 80.0, 95.0, 130.0])
        F = 100.0
        assert np.allclose(normalized_strike(K, F, 0.7, 0.3), -normalized_strike(F * F / K, F, 0.7, 0.3), atol=1e-14)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1.0, 0.2), (1.0, -1.0, 1.0, 0.2), (1.0, 1.0, 0.0, 0.2),
                                      (1.0, 1.0, 1.0, 0.0)])
    def test_domain(self, args):
        with pytest.raises(ValueError):
            normalized_strike(*args)


class TestBlend:
    def test_equal_inputs(self):
        assert blend_call_put(0.2, 0.2, 0.3, -0.7) == pytest.approx(0.2)

    def test_zero_call_weight(self):
        assert blend_call_put(0.5, 0.3, 1.0, -0.2) == pytest.approx(0.3)

    def test_arithmetic(self):
        assert blend_call_put(0.20, 0.30, 0.4, -0.6) == pytest.approx(0.24, abs=1e-15)

    def test_both_zero_falls_back(self):
        notes = []
        assert blend_call_put(0.2, 0.4, 1.0, -1.0, notes) == pytest.approx(0.3)
        assert notes

    def test_between_inputs(self, rng):
        for _ in range(200):
            a, b = rng.uniform(0.05, 1.0, 2)
            dc, dp = rng.uniform(0, 1), -rng.uniform(0, 1)
            v = blend_call_put(a, b, dc, dp)
            assert min(a, b) - 1e-15 <= v <= max(a, b) + 1e-15


class TestQuoteValidation:
    def test_invariants(self):
        e = dt.date(2020, 6, 1)
        with pytest.raises(InputError):
            MarketQuote(e, -1.0, "call", 0.2)
        with pytest.raises(InputError):
            MarketQuote(e, 10.0, "call", 0.0)
        with pytest.raises(InputError):
            MarketQuote(e, 10.0, "call", 0.2, bid_iv=0.25, ask_iv=0.3)
        with pytest.raises(InputError):
            MarketQuote(e, 10.0, "call", 0.2, delta=1.5)

    def test_context_spot(self):
        with pytest.raises(InputError):
            MarketContext(dt.date(2020, 1, 1), 0.0)


class TestLoadQuotes:
    def test_xlf_fixture(self, xlf):
        assert len(xlf.terms) == 6
        strikes = sorted({float(k) for t in xlf.terms for k in t.strikes})
        assert strikes[0] == 18.0 and strikes[-1] == 28.0
        assert xlf.context.spot == XLF_SPOT and xlf.context.rate == XLF_RATE

    def test_xlf_first_term_strikes(self, xlf):
        assert xlf.terms[0].strikes.tolist() == [19.0, 20.0, 21.0, 22.0, 23.0, 24.0]

    def test_empty(self, tmp_path):
        with pytest.raises(InputError, match="no quotes"):
            load_quotes(write(tmp_path, ""))
        with pytest.raises(InputError, match="no quotes"):
            load_quotes(write(tmp_path, HEADER))

    def test_single_call(self, tmp_path):
        q = load_quotes(write(tmp_path, HEADER + "2020-07-01,105,call,0.21,,,\n"))
        terms = build_terms(q, CTX)
        assert len(terms) == 1 and len(terms[0]) == 1

    def test_malformed_row_number(self, tmp_path):
        text = HEADER + "2020-07-01,105,call,0.21,,,\n2020-07-01,abc,call,0.2,,,\n"
        with pytest.raises(InputError, match="row 3"):
            load_quotes(write(tmp_path, text))

    def test_duplicate(self, tmp_path):
        text = HEADER + "2020-07-01,105,call,0.21,,,\n2020-07-01,105,call,0.22,,,\n"
        with pytest.raises(InputError, match="duplicate"):
            load_quotes(write(tmp_path, text))

    def test_percent_units_and_band_mid(self, tmp_path):
        text = "# units=percent\n" + HEADER + "2020-07-01,105,call,,20,22,\n"
        q = load_quotes(write(tmp_path, text))
        assert q[0].mid_iv == pytest.approx(0.21)
        assert q[0].mid_from_band
        terms = build_terms(q, CTX)
        assert any("bid/ask" in d for d in terms[0].diagnostics)

    def test_otm_selection_and_blend(self, tmp_path):
        text = HEADER + (
            "2020-07-01,80,put,0.30,,,-0.1\n"
            "2020-07-01,80,call,0.50,,,0.95\n"
            "2020-07-01,100,put,0.22,,,-0.5\n"
            "2020-07-01,100,call,0.20,,,0.5\n"
            "2020-07-01,130,call,0.25,,,0.05\n"
        )
        terms = build_terms(load_quotes(write(tmp_path, text)), CTX)
        t = terms[0]
        assert t.strikes.tolist() == [80.0, 100.0, 130.0]
        # overlapping strikes blend with weights 1 - |delta|
        assert t.iv[1] == pytest.approx(0.21)
        assert t.iv[0] == pytest.approx((0.05 * 0.5 + 0.9 * 0.3) / 0.95)

    def test_lone_deep_itm_dropped(self, tmp_path):
        text = HEADER + "2020-07-01,60,call,0.30,,,\n2020-07-01,120,call,0.25,,,\n"
        t = build_terms(load_quotes(write(tmp_path, text)), CTX)[0]
        assert t.strikes.tolist() == [120.0]
        assert any("in-the-money" in d for d in t.diagnostics)

    def test_context_csv_and_json(self, tmp_path):
        c1 = load_context(write(tmp_path, "valuation_date,spot,rate\n2014-03-25,22.64,0.0148\n", "c.csv"))
        c2 = load_context(write(tmp_path, '{"valuation_date": "2014-03-25", "spot": 22.64, "rate": 0.0148}',
                                "c.json"))
        assert c1 == c2

    def test_term_invariants(self):
        with pytest.raises(InputError):
            TermQuotes.from_ivs(0.5, 100.0, [90.0, 90.0], [0.2, 0.2])
        t = TermQuotes.from_ivs(0.5, 100.0, [110.0, 90.0], [0.21, 0.25])
        assert t.strikes.tolist() == [90.0, 110.0] and t.iv.tolist() == [0.25, 0.21]


class TestGrid:
    def test_xlf_grid_shape(self, xlf):
        assert xlf.grid.strikes.shape == (6, 23)
        assert xlf.grid.strikes[0, 0] == 17.0 and xlf.grid.strikes[0, -1] == 28.0

    def test_single_node(self):
        g = build_grid(GridSpec(expiries=(0.5,), strikes=(100.0,)), CTX)
        assert g.shape == (1, 1)

    def test_z_band_range(self):
        g = build_grid(GridSpec(expiries=(0.25, 1.0), mode="z_band", gamma=5.0, n_z=11), CTX, 0.2)
        x = g.chi / np.sqrt(g.expiries)[:, None]
        assert np.allclose(x[:, 0], -1.0, atol=1e-14) and np.allclose(x[:, -1], 1.0, atol=1e-14)

    def test_forward_and_strike_map_roundtrip(self):
        ctx = MarketContext(dt.date(2020, 1, 1), 50.0, 0.03)
        g = build_grid(GridSpec(expiries=(0.1, 0.5, 2.0), mode="z_band", gamma=4.0, n_z=9), ctx, 0.3)
        assert np.allclose(g.forwards, 50.0 * np.exp(0.03 * g.expiries), rtol=1e-15)
        z = g.z(0.3)
        K = g.forwards[:, None] * np.exp(z * 0.3 * np.sqrt(g.expiries)[:, None])
        z2 = normalized_strike(K, g.forwards[:, None], g.expiries[:, None], 0.3)
        nz = np.abs(z) > 0
        assert np.all(np.abs(z2[nz] - z[nz]) <= 1e-12 * np.abs(z[nz]))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(expiries=(1.0, 0.5), strikes=(1.0,)),
            dict(expiries=(0.5,), strikes=(2.0, 1.0)),
            dict(expiries=(0.5,), mode="z_band", gamma=0.0),
            dict(expiries=(0.5,), mode="bogus"),
        ],
    )
    def test_spec_validation(self, kw):
        with pytest.raises(InputError):
            GridSpec(**kw)
