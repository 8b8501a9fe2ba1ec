"""Quote ingestion, call/put blending, forwards and the output grid."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .black_scholes import bs_delta
from .errors import InputError

DAYS_PER_YEAR = 365.0
ITM_KEEP_BAND = 0.1  # |log(K/F)| within which lone ITM quotes are kept
QUOTE_COLUMNS = ("expiry", "strike", "type", "iv", "bid_iv", "ask_iv", "delta")


@dataclass(frozen=True)
class MarketQuote:
    expiry: dt.date
    strike: float
    option_type: str
    mid_iv: float
    bid_iv: Optional[float] = None
    ask_iv: Optional[float] = None
    delta: Optional[float] = None
    mid_from_band: bool = False

    def __post_init__(self):
        if not self.strike > 0.0:
            raise InputError(f"strike must be positive, got {self.strike}")
        if self.option_type not in ("call", "put"):
            raise InputError(f"option type must be call or put, got {self.option_type!r}")
        if not self.mid_iv > 0.0:
            raise InputError(f"implied vol must be positive, got {self.mid_iv}")
        if self.bid_iv is not None and self.ask_iv is not None:
            if not self.bid_iv <= self.mid_iv <= self.ask_iv:
                raise InputError(f"bid/mid/ask out of order at strike {self.strike}")
        if self.delta is not None and abs(self.delta) > 1.0:
            raise InputError(f"|delta| > 1 at strike {self.strike}")


@dataclass(frozen=True)
class MarketContext:
    valuation_date: dt.date
    spot: float
    rate: float = 0.0

    def __post_init__(self):
        if not self.spot > 0.0:
            raise InputError(f"spot must be positive, got {self.spot}")

    def year_fraction(self, expiry: dt.date) -> float:
        return (expiry - self.valuation_date).days / DAYS_PER_YEAR

    def forward(self, T):
        return self.spot * np.exp(self.rate * np.asarray(T, dtype=float))


@dataclass
class TermQuotes:
    """Cleaned quotes of one expiry, sorted by strike.

    Array fields are aligned.  ``w_bid``/``w_ask``/``delta_call``/``delta_put``
    hold NaN where the input had nothing.
    """

    expiry: Optional[dt.date]
    maturity: float
    forward: float
    strikes: np.ndarray
    iv: np.ndarray
    delta_call: np.ndarray
    delta_put: np.ndarray
    iv_bid: np.ndarray
    iv_ask: np.ndarray
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        if not self.maturity > 0.0:
            raise InputError(f"maturity must be positive, got {self.maturity}")
        if not self.forward > 0.0:
            raise InputError("forward must be positive")
        order = np.argsort(self.strikes)
        for name in ("strikes", "iv", "delta_call", "delta_put", "iv_bid", "iv_ask"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float)[order])
        if np.any(np.diff(self.strikes) <= 0.0):
            raise InputError("at most one point per strike is allowed")

    @classmethod
    def from_ivs(cls, maturity, forward, strikes, iv, expiry=None, iv_bid=None, iv_ask=None):
        """Build a term directly from strikes and mid IVs (no deltas)."""
        strikes = np.asarray(strikes, dtype=float)
        nan = np.full(strikes.shape, np.nan)
        return cls(
            expiry=expiry,
            maturity=float(maturity),
            forward=float(forward),
            strikes=strikes,
            iv=np.asarray(iv, dtype=float),
            delta_call=nan,
            delta_put=nan.copy(),
            iv_bid=nan.copy() if iv_bid is None else np.asarray(iv_bid, dtype=float),
            iv_ask=nan.copy() if iv_ask is None else np.asarray(iv_ask, dtype=float),
        )

    def __len__(self):
        return len(self.strikes)

    @property
    def chi(self) -> np.ndarray:
        return np.log(self.strikes / self.forward)

    @property
    def w(self) -> np.ndarray:
        return self.iv**2 * self.maturity

    @property
    def w_bid(self) -> np.ndarray:
        return self.iv_bid**2 * self.maturity

    @property
    def w_ask(self) -> np.ndarray:
        return self.iv_ask**2 * self.maturity

    def z(self, sigma_star: float) -> np.ndarray:
        return normalized_strike(self.strikes, self.forward, self.maturity, sigma_star)

    def atm_iv(self) -> float:
        """IV at K = F by linear interpolation in log-moneyness (flat beyond)."""
        return float(np.interp(0.0, self.chi, self.iv))


def normalized_strike(K, F, T, sigma_star):
    """z = log(K/F) / (sigma_star * sqrt(T)).

    Raises:
        ValueError: on non-positive inputs.
    """
    for name, val in (("K", K), ("F", F), ("T", T), ("sigma_star", sigma_star)):
        if np.any(np.asarray(val) <= 0.0):
            raise ValueError(f"{name} must be positive")
    return np.log(np.asarray(K, dtype=float) / F) / (sigma_star * np.sqrt(T))


def blend_call_put(call_iv, put_iv, call_delta, put_delta, diagnostics=None):
    """Delta-weighted average of call and put IVs at one strike.

    Weights are 1 - |delta| for each side.  When both vanish the plain
    average is returned and a note is appended to ``diagnostics``.
    """
    wc = 1.0 - abs(call_delta)
    wp = 1.0 - abs(put_delta)
    if wc + wp <= 0.0:
        if diagnostics is not None:
            diagnostics.append("blend weights both zero; used plain average")
        return 0.5 * (call_iv + put_iv)
    return (wc * call_iv + wp * put_iv) / (wc + wp)


def _parse_float(text: str, row: int, name: str, allow_blank: bool = True):
    text = text.strip()
    if not text:
        if allow_blank:
            return None
        raise InputError(f"row {row}: missing {name}")
    try:
        return float(text)
    except ValueError:
        raise InputError(f"row {row}: cannot parse {name} {text!r}") from None


def _parse_date(text: str, row: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise InputError(f"row {row}: cannot parse expiry {text!r}") from None


def load_quotes(path) -> list[MarketQuote]:
    """Read a quote CSV.

    A leading comment line ``# units=percent`` switches IV columns from
    decimals to percent.

    Raises:
        InputError: empty file, malformed row (with its row number) or a
            duplicated (expiry, strike, type).
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    scale = 1.0
    body = []
    for i, line in enumerate(lines, start=1):
        s = line.strip()
        if s.startswith("#"):
            if s.replace(" ", "").lower() == "#units=percent":
                scale = 0.01
            continue
        if s:
            body.append((i, line))
    if not body:
        raise InputError("no quotes")
    header_row, header_line = body[0]
    header = [h.strip().lower() for h in next(csv.reader([header_line]))]
    missing = [c for c in ("expiry", "strike", "type") if c not in header]
    if missing:
        raise InputError(f"row {header_row}: header lacks {', '.join(missing)}")
    col = {name: header.index(name) for name in QUOTE_COLUMNS if name in header}

    quotes = []
    seen = set()
    for row, line in body[1:]:
        cells = next(csv.reader([line]))
        if len(cells) < len(header):
            cells = cells + [""] * (len(header) - len(cells))

        def cell(name):
            return cells[col[name]] if name in col else ""

        expiry = _parse_date(cell("expiry"), row)
        strike = _parse_float(cell("strike"), row, "strike", allow_blank=False)
        otype = cell("type").strip().lower()
        otype = {"c": "call", "p": "put"}.get(otype, otype)
        iv = _parse_float(cell("iv"), row, "iv")
        bid = _parse_float(cell("bid_iv"), row, "bid_iv")
        ask = _parse_float(cell("ask_iv"), row, "ask_iv")
        delta = _parse_float(cell("delta"), row, "delta")
        from_band = False
        if iv is None:
            if bid is None or ask is None:
                raise InputError(f"row {row}: no iv and no bid/ask pair")
            iv = 0.5 * (bid + ask)
            from_band = True
        key = (expiry, strike, otype)
        if key in seen:
            raise InputError(f"row {row}: duplicate quote {expiry} {strike} {otype}")
        seen.add(key)
        try:
            quotes.append(
                MarketQuote(
                    expiry=expiry,
                    strike=strike,
                    option_type=otype,
                    mid_iv=iv * scale,
                    bid_iv=None if bid is None else bid * scale,
                    ask_iv=None if ask is None else ask * scale,
                    delta=delta,
                    mid_from_band=from_band,
                )
            )
        except InputError as exc:
            raise InputError(f"row {row}: {exc}") from None
    if not quotes:
        raise InputError("no quotes")
    return quotes


def load_context(path) -> MarketContext:
    """Read ``valuation_date, spot, rate`` from a JSON object or a one-row CSV."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
            rec = json.loads(text)
        else:
            rows = list(csv.DictReader(text.splitlines()))
            if not rows:
                raise InputError(f"{path}: empty context file")
            rec = rows[0]
        return MarketContext(
            valuation_date=dt.date.fromisoformat(str(rec["valuation_date"]).strip()),
            spot=float(rec["spot"]),
            rate=float(rec.get("rate", 0.0) or 0.0),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: bad context ({exc})") from None


def load_market(quotes_path, context_path) -> tuple[MarketContext, list[MarketQuote]]:
    return load_context(context_path), load_quotes(quotes_path)


def _term_from_quotes(expiry, quotes: Sequence[MarketQuote], context: MarketContext) -> TermQuotes:
    T = context.year_fraction(expiry)
    if T <= 0.0:
        raise InputError(f"expiry {expiry} is not after the valuation date")
    F = float(context.forward(T))
    by_strike: dict[float, dict[str, MarketQuote]] = {}
    for q in quotes:
        by_strike.setdefault(q.strike, {})[q.option_type] = q

    diags = []
    rows = []
    for K in sorted(by_strike):
        pair = by_strike[K]
        call, put = pair.get("call"), pair.get("put")
        if call is not None and put is not None:
            dc = call.delta if call.delta is not None else float(bs_delta(F, K, T, call.mid_iv, "call"))
            dp = put.delta if put.delta is not None else float(bs_delta(F, K, T, put.mid_iv, "put"))
            iv = blend_call_put(call.mid_iv, put.mid_iv, dc, dp, diags)
            if None not in (call.bid_iv, put.bid_iv, call.ask_iv, put.ask_iv):
                bid = blend_call_put(call.bid_iv, put.bid_iv, dc, dp)
                ask = blend_call_put(call.ask_iv, put.ask_iv, dc, dp)
            else:
                bid = ask = math.nan
            rows.append((K, iv, call.delta, put.delta, bid, ask))
            if call.mid_from_band or put.mid_from_band:
                diags.append(f"K={K:g}: mid taken from bid/ask average")
            continue
        q = call if call is not None else put
        otm = (q.option_type == "call" and K >= F) or (q.option_type == "put" and K <= F)
        if not otm and abs(math.log(K / F)) > ITM_KEEP_BAND:
            diags.append(f"K={K:g}: dropped in-the-money {q.option_type}")
            continue
        if q.mid_from_band:
            diags.append(f"K={K:g}: mid taken from bid/ask average")
        rows.append(
            (
                K,
                q.mid_iv,
                q.delta if q.option_type == "call" else None,
                q.delta if q.option_type == "put" else None,
                math.nan if q.bid_iv is None else q.bid_iv,
                math.nan if q.ask_iv is None else q.ask_iv,
            )
        )
    if not rows:
        raise InputError(f"expiry {expiry}: no usable quotes")

    def col(i):
        return np.array([math.nan if r[i] is None else r[i] for r in rows], dtype=float)

    return TermQuotes(
        expiry=expiry,
        maturity=T,
        forward=F,
        strikes=col(0),
        iv=col(1),
        delta_call=col(2),
        delta_put=col(3),
        iv_bid=col(4),
        iv_ask=col(5),
        diagnostics=diags,
    )


def build_terms(quotes: Iterable[MarketQuote], context: MarketContext) -> list[TermQuotes]:
    """Group quotes by expiry, keep OTM quotes and blend overlapping strikes."""
    by_expiry: dict[dt.date, list[MarketQuote]] = {}
    for q in quotes:
        by_expiry.setdefault(q.expiry, []).append(q)
    if not by_expiry:
        raise InputError("no quotes")
    return [_term_from_quotes(e, by_expiry[e], context) for e in sorted(by_expiry)]


def default_sigma_star(terms: Sequence[TermQuotes]) -> float:
    """ATM IV of the shortest maturity."""
    first = min(terms, key=lambda t: t.maturity)
    return first.atm_iv()


@dataclass(frozen=True)
class GridSpec:
    """Output grid definition.

    In ``strike_list`` mode the strikes are either given explicitly or built
    from ``k_min``, ``k_max`` and ``step``.  In ``z_band`` mode each expiry
    gets ``n_z`` nodes with log(K/F)/sqrt(T) spanning +-gamma*sigma_star.
    """

    expiries: tuple
    mode: str = "strike_list"
    strikes: Optional[tuple] = None
    k_min: Optional[float] = None
    k_max: Optional[float] = None
    step: float = 0.5
    gamma: float = 5.0
    sigma_star: Optional[float] = None
    n_z: int = 41

    def __post_init__(self):
        exp = np.asarray(self.expiries, dtype=float)
        if exp.size == 0 or np.any(exp <= 0.0) or np.any(np.diff(exp) <= 0.0):
            raise InputError("grid expiries must be positive and strictly increasing")
        if self.mode not in ("strike_list", "z_band"):
            raise InputError(f"unknown grid mode {self.mode!r}")
        if self.mode == "strike_list":
            ks = self.strike_values()
            if ks.size == 0 or np.any(ks <= 0.0) or np.any(np.diff(ks) <= 0.0):
                raise InputError("grid strikes must be positive and strictly increasing")
        else:
            if not self.gamma > 0.0:
                raise InputError("gamma must be positive")
            if self.n_z < 1:
                raise InputError("n_z must be at least 1")

    def strike_values(self) -> np.ndarray:
        if self.strikes is not None:
            return np.asarray(self.strikes, dtype=float)
        if self.k_min is None or self.k_max is None:
            raise InputError("strike_list grid needs strikes or k_min/k_max")
        if not self.step > 0.0:
            raise InputError("grid step must be positive")
        n = int(round((self.k_max - self.k_min) / self.step)) + 1
        return self.k_min + self.step * np.arange(n)


@dataclass(frozen=True)
class Grid:
    """Nodes (T_i, K_ij) with forwards and log-moneyness per node."""

    expiries: np.ndarray
    forwards: np.ndarray
    strikes: np.ndarray  # (n_T, n_K)
    mode: str

    @property
    def shape(self):
        return self.strikes.shape

    @property
    def chi(self) -> np.ndarray:
        return np.log(self.strikes / self.forwards[:, None])

    def z(self, sigma_star: float) -> np.ndarray:
        return self.chi / (sigma_star * np.sqrt(self.expiries)[:, None])

    def common_strikes(self) -> Optional[np.ndarray]:
        """Strike row shared by every expiry, or None in z_band mode."""
        if self.mode == "strike_list":
            return self.strikes[0]
        return None


def build_grid(spec: GridSpec, context: MarketContext, sigma_star: Optional[float] = None) -> Grid:
    T = np.asarray(spec.expiries, dtype=float)
    F = context.forward(T)
    if spec.mode == "strike_list":
        ks = spec.strike_values()
        K = np.broadcast_to(ks, (T.size, ks.size)).copy()
    else:
        s = spec.sigma_star if spec.sigma_star is not None else sigma_star
        if s is None or not s > 0.0:
            raise InputError("z_band grid needs a positive sigma_star")
        x = np.linspace(-spec.gamma * s, spec.gamma * s, spec.n_z) if spec.n_z > 1 else np.zeros(1)
        K = F[:, None] * np.exp(x[None, :] * np.sqrt(T)[:, None])
    return Grid(expiries=T, forwards=F, strikes=K, mode=spec.mode)
