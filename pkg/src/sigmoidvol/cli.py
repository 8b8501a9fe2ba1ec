"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 input error, 3 arbitrage rejection,
4 optimizer failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .calibration import CalibrationConfig, FitResult, bootstrap, calibration_nodes, jsonable
from .errors import ArbitrageError, InputError, OptimizerError
from .market_data import (
    Grid,
    GridSpec,
    MarketContext,
    TermQuotes,
    build_grid,
    build_terms,
    default_sigma_star,
    load_context,
    load_quotes,
)
from .smile import PARAM_NAMES
from .surface import InterpolatorConfig, SurfaceGrid, build_surface, implied_density, local_vol
from .svi_baseline import SVI_NAMES, svi_bootstrap

log = logging.getLogger("sigmoidvol")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_ARBITRAGE, EXIT_OPTIMIZER = 0, 1, 2, 3, 4
COMMANDS = ("fit", "surface", "localvol", "density", "check-noarb", "stability", "compare-svi")
INTERP_KEYS = {"clock", "anchor_strike", "table", "k", "extrapolate"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _bundled(name: str) -> Path:
    return Path(str(resources.files("sigmoidvol") / "data" / name))


@dataclass
class RunConfig:
    command: str
    quotes: list
    contexts: list
    grid_path: Optional[Path]
    calibration: CalibrationConfig
    interpolation: InterpolatorConfig
    out: Path
    fmt: str
    plot_data: bool
    bundled: bool


def _load_config(path, mode, seed) -> tuple[CalibrationConfig, InterpolatorConfig]:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: bad config ({exc})") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a JSON object")
    interp = dict(raw.pop("interpolation", {}) or {})
    interp.update({k: raw.pop(k) for k in list(raw) if k in INTERP_KEYS})
    if mode is not None:
        raw["mode"] = mode
    if seed is not None:
        raw["seed"] = seed
    try:
        cal = CalibrationConfig.from_dict(raw)
        if "table" in interp and interp["table"] is not None:
            interp["table"] = tuple(tuple(r) for r in interp["table"])
        unknown = set(interp) - INTERP_KEYS
        if unknown:
            raise InputError(f"unknown interpolation keys: {', '.join(sorted(unknown))}")
        return cal, InterpolatorConfig(**interp)
    except TypeError as exc:
        raise InputError(f"bad config ({exc})") from None


def _run_config(args) -> RunConfig:
    quotes = args.quotes or []
    contexts = args.context or []
    bundled = not quotes
    if bundled:
        if contexts:
            raise _UsageError("--context given without --quotes")
        quotes = [_bundled("xlf_quotes.csv")]
        contexts = [_bundled("xlf_context.json")]
    elif not contexts:
        raise _UsageError("--quotes needs --context")
    if args.command != "stability" and len(quotes) != 1:
        raise _UsageError(f"{args.command} takes a single --quotes file")
    if len(contexts) not in (1, len(quotes)):
        raise _UsageError("give one --context or one per --quotes file")
    grid = Path(args.grid) if args.grid else (_bundled("xlf_grid.json") if bundled else None)
    cal, interp = _load_config(args.config, {"ends": "ends_only", "all": "full"}.get(args.mode), args.seed)
    return RunConfig(
        command=args.command,
        quotes=[Path(q) for q in quotes],
        contexts=[Path(c) for c in contexts],
        grid_path=grid,
        calibration=cal,
        interpolation=interp,
        out=Path(args.out),
        fmt=args.format,
        plot_data=args.plot_data,
        bundled=bundled,
    )


def load_grid(path: Optional[Path], terms, context: MarketContext, sigma_star: float) -> Grid:
    """Grid from a JSON spec; expiries default to the quoted maturities.

    Keys: mode ('strike_list' or 'z_band'), strikes or k_min/k_max/step,
    gamma, n_z, and either expiries (years) or expiry_dates (ISO dates).
    Without a file the grid is a z-band of +-5 sigma_star.
    """
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: bad grid ({exc})") from None
    d = dict(d)
    if "expiry_dates" in d:
        import datetime as dt

        expiries = tuple(context.year_fraction(dt.date.fromisoformat(s)) for s in d.pop("expiry_dates"))
    elif "expiries" in d:
        expiries = tuple(float(t) for t in d.pop("expiries"))
    else:
        expiries = tuple(t.maturity for t in terms)
    d.setdefault("mode", "z_band" if path is None else "strike_list")
    if "strikes" in d:
        d["strikes"] = tuple(float(k) for k in d["strikes"])
    try:
        spec = GridSpec(expiries=expiries, **d)
    except TypeError as exc:
        raise InputError(f"bad grid spec ({exc})") from None
    return build_grid(spec, context, sigma_star)


def _market(run: RunConfig, index: int = 0):
    ctx = load_context(run.contexts[min(index, len(run.contexts) - 1)])
    quotes = load_quotes(run.quotes[index])
    terms = build_terms(quotes, ctx)
    sigma_star = run.calibration.sigma_star or default_sigma_star(terms)
    return ctx, quotes, terms, sigma_star


def _num(v) -> str:
    return repr(float(v))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _emit_matrix(run: RunConfig, name: str, expiries, strikes, values, extra: dict) -> None:
    """Long CSV ``T,K,value`` or JSON matrices; optional gnuplot blocks."""
    if run.fmt == "csv":
        rows = [
            (_num(T), _num(K), _num(v))
            for T, ks, vs in zip(expiries, strikes, values)
            for K, v in zip(ks, vs)
        ]
        _write_csv(run.out / f"{name}.csv", ("T", "K", "value"), rows)
        _write_json(run.out / f"{name}_summary.json", extra)
    else:
        doc = {
            "expiries": [float(t) for t in expiries],
            "strikes": np.asarray(strikes, dtype=float).tolist(),
            "values": [np.asarray(row, dtype=float).tolist() for row in values],
        }
        doc.update(extra)
        _write_json(run.out / f"{name}.json", doc)
    if run.plot_data:
        lines = []
        for T, ks, vs in zip(expiries, strikes, values):
            lines += [f"{float(K)!r} {float(T)!r} {float(v)!r}" for K, v in zip(ks, vs)]
            lines.append("")
        (run.out / f"{name}.dat").write_text("\n".join(lines) + "\n")


def _calibrate(run: RunConfig, terms, grid: Grid, sigma_star: float, timing: dict) -> list[FitResult]:
    nodes = calibration_nodes(grid.chi)
    start = time.perf_counter()
    fits = bootstrap(terms, nodes, run.calibration, sigma_star)
    timing["calibration_total"] = time.perf_counter() - start
    timing["terms"] = [
        {"maturity": f.maturity, "wall_time": f.wall_time, "evals": f.evals} for f in fits if f.calibrated
    ]
    for f in fits:
        if f.calibrated:
            log.info("T=%.4f rmse=%.3f vol pts evals=%d", f.maturity, 100 * f.rmse_iv, f.evals)
    return fits


def _write_fits(run: RunConfig, fits) -> None:
    for i, f in enumerate(fits):
        if f.calibrated:
            _write_json(run.out / f"fit_{i:02d}.json", f.to_dict())
    rows = []
    for f in fits:
        if not f.calibrated:
            continue
        for K, m, mdl, wt in zip(f.strikes, f.market_iv, f.model_iv, f.weights):
            rows.append((_num(f.maturity), _num(K), _num(m), _num(mdl), _num(mdl - m), _num(wt)))
    header = ("T", "K", "market_iv", "model_iv", "residual", "weight")
    if run.fmt == "csv":
        _write_csv(run.out / "residuals.csv", header, rows)
    else:
        _write_json(run.out / "residuals.json", [dict(zip(header, map(float, r))) for r in rows])


def _surface(run: RunConfig, timing: dict, reject: bool = True):
    ctx, _, terms, sigma_star = _market(run)
    grid = load_grid(run.grid_path, terms, ctx, sigma_star)
    fits = _calibrate(run, terms, grid, sigma_star, timing)
    start = time.perf_counter()
    surf = build_surface(
        fits, grid, run.calibration.model(sigma_star), terms, run.interpolation,
        run.calibration.vertical_bound_convention, reject=reject,
    )
    timing["surface"] = time.perf_counter() - start
    return fits, surf


def _surface_extra(surf: SurfaceGrid) -> dict:
    return {
        "sources": list(surf.sources),
        "alpha": surf.alphas,
        "no_arbitrage": surf.summary(),
        "diagnostics": surf.diagnostics,
    }


def cmd_fit(run: RunConfig, timing: dict) -> int:
    ctx, _, terms, sigma_star = _market(run)
    grid = load_grid(run.grid_path, terms, ctx, sigma_star)
    fits = _calibrate(run, terms, grid, sigma_star, timing)
    _write_fits(run, fits)
    n = sum(f.calibrated for f in fits)
    print(f"calibrated {n} of {len(fits)} terms; outputs in {run.out}")
    for f in fits:
        if f.calibrated:
            print(f"  T={f.maturity:.6f} mode={f.mode} rmse={100 * f.rmse_iv:.3f} vol pts feasible={f.report.ok}")
    return EXIT_OK


def cmd_surface(run: RunConfig, timing: dict) -> int:
    fits, surf = _surface(run, timing)
    _write_fits(run, fits)
    _emit_matrix(run, "surface", surf.expiries, surf.strikes, surf.iv, _surface_extra(surf))
    print(f"surface {surf.w.shape[0]}x{surf.w.shape[1]} passed all checks; outputs in {run.out}")
    return EXIT_OK


def cmd_localvol(run: RunConfig, timing: dict) -> int:
    _, surf = _surface(run, timing)
    lv = local_vol(surf, run.interpolation.tol)
    extra = _surface_extra(surf)
    extra["min_local_vol"] = float(lv.sigma.min())
    _emit_matrix(run, "localvol", lv.expiries, lv.strikes, lv.sigma, extra)
    print(f"local vol {lv.sigma.shape[0]}x{lv.sigma.shape[1]}, min {lv.sigma.min():.4f}; outputs in {run.out}")
    return EXIT_OK


def cmd_density(run: RunConfig, timing: dict) -> int:
    _, surf = _surface(run, timing)
    rows = [implied_density(surf, i, run.interpolation.tol) for i in range(surf.expiries.size)]
    extra = _surface_extra(surf)
    extra["mass"] = [
        {"T": r.maturity, "mass_on_grid": r.mass_on_grid, "tail_low": r.tail_low, "tail_high": r.tail_high,
         "total_mass": r.total_mass}
        for r in rows
    ]
    _emit_matrix(run, "density", surf.expiries, [r.strikes for r in rows], [r.pdf for r in rows], extra)
    for r in rows:
        print(f"  T={r.maturity:.6f} total mass {r.total_mass:.4f} (grid {r.mass_on_grid:.4f})")
    return EXIT_OK


def cmd_check_noarb(run: RunConfig, timing: dict) -> int:
    _, surf = _surface(run, timing, reject=False)
    summary = surf.summary()
    _write_json(run.out / "noarb.json", summary)
    worst = dict(summary["worst"])
    worst["lee_envelope"] = summary["lee_envelope_worst"]
    worst["calendar_fixed_strike"] = summary["calendar_fixed_strike_worst"]
    for name, v in worst.items():
        print(f"  {name:28s} worst margin {v: .3e}")
    if not surf.ok:
        print(f"surface fails {len(summary['violations'])} checks", file=sys.stderr)
        return EXIT_ARBITRAGE
    print("all no-arbitrage checks passed")
    return EXIT_OK


def _noisy(quotes, noise: float, rng) -> list:
    out = []
    for q in quotes:
        bump = rng.uniform(-noise, noise) / 100.0
        out.append(dataclasses.replace(q, mid_iv=max(q.mid_iv + bump, 1e-4)))
    return out


def cmd_stability(run: RunConfig, timing: dict, synthetic_days: int, noise: float, freeze_c: bool) -> int:
    rng = np.random.default_rng(run.calibration.optimizer.seed)
    days = []
    if synthetic_days:
        ctx = load_context(run.contexts[0])
        base = load_quotes(run.quotes[0])
        for d in range(synthetic_days):
            days.append((f"day{d + 1}", ctx, base if d == 0 else _noisy(base, noise, rng)))
    else:
        if len(run.quotes) < 2:
            raise _UsageError("stability needs at least two --quotes files or --synthetic-days")
        for i, path in enumerate(run.quotes):
            try:
                ctx = load_context(run.contexts[min(i, len(run.contexts) - 1)])
                days.append((path.name, ctx, load_quotes(path)))
            except InputError as exc:
                log.warning("skipping %s: %s", path, exc)
    rows = []
    frozen: Optional[dict] = None
    sigma_star = None
    start = time.perf_counter()
    for label, ctx, quotes in days:
        try:
            terms = build_terms(quotes, ctx)
            sigma_star = sigma_star or run.calibration.sigma_star or default_sigma_star(terms)
            grid = load_grid(run.grid_path, terms, ctx, sigma_star)
            fits = bootstrap(terms, calibration_nodes(grid.chi), run.calibration, sigma_star, frozen)
        except (InputError, OptimizerError) as exc:
            log.warning("day %s failed: %s", label, exc)
            continue
        if freeze_c and frozen is None:
            frozen = {i: f.params.c for i, f in enumerate(fits) if f.calibrated}
        for i, f in enumerate(fits):
            if not f.calibrated:
                continue
            p = f.params.to_dict()
            rows.append([label, f.expiry or "", _num(f.maturity)] + [_num(p[n]) for n in PARAM_NAMES]
                        + [_num(f.objective), _num(f.rmse_iv)])
    timing["stability_total"] = time.perf_counter() - start
    header = ["day", "expiry", "T", *PARAM_NAMES, "objective", "rmse_iv"]
    if run.fmt == "csv":
        _write_csv(run.out / "stability.csv", header, rows)
    else:
        _write_json(run.out / "stability.json", [dict(zip(header, r)) for r in rows])
    print(f"{len(rows)} parameter rows over {len(days)} days; outputs in {run.out}")
    return EXIT_OK


def cmd_compare_svi(run: RunConfig, timing: dict) -> int:
    ctx, _, terms, sigma_star = _market(run)
    grid = load_grid(run.grid_path, terms, ctx, sigma_star)
    nodes = calibration_nodes(grid.chi)
    start = time.perf_counter()
    cfg = dataclasses.replace(run.calibration, mode="full")
    ours = bootstrap(terms, nodes, cfg, sigma_star)
    timing["sigmoid_total"] = time.perf_counter() - start
    start = time.perf_counter()
    svi_pos = svi_bootstrap(terms, nodes, run.calibration, sigma_star, "positive_w")
    svi_full = svi_bootstrap(terms, nodes, run.calibration, sigma_star, "full")
    timing["svi_total"] = time.perf_counter() - start

    def svi_cols(r):
        if isinstance(r, Exception):
            return [None, None, False, False]
        return [r.objective, r.rmse_iv, True, r.grid_ok]

    header = [
        "expiry", "T",
        "sigmoid_objective", "sigmoid_rmse_iv", "sigmoid_feasible", "sigmoid_grid_ok",
        "svi_objective", "svi_rmse_iv", "svi_feasible", "svi_grid_ok",
        "svi_full_objective", "svi_full_rmse_iv", "svi_full_feasible", "svi_full_grid_ok",
    ]
    rows = []
    for f, sp, sf in zip(sorted(ours, key=lambda r: r.maturity), svi_pos, svi_full):
        mine = [f.objective, f.rmse_iv, f.calibrated, bool(f.calibrated and f.report.ok)]
        rows.append([f.expiry or "", f.maturity] + mine + svi_cols(sp) + svi_cols(sf))
    if run.fmt == "csv":
        fmt = [[("" if v is None else (_num(v) if isinstance(v, float) else v)) for v in r] for r in rows]
        _write_csv(run.out / "compare_svi.csv", header, fmt)
    else:
        _write_json(run.out / "compare_svi.json", [dict(zip(header, r)) for r in rows])
    params = [
        {"T": sp.maturity, **{n: v for n, v in sp.params.to_dict().items() if n in SVI_NAMES}}
        for sp in svi_pos if not isinstance(sp, Exception)
    ]
    _write_json(run.out / "svi_params.json", params)
    for r in rows:
        ours_rmse = "-" if r[3] is None else f"{100 * r[3]:.3f}"
        svi_rmse = "-" if r[7] is None else f"{100 * r[7]:.3f}"
        print(f"  T={r[1]:.6f} sigmoid rmse {ours_rmse} | svi rmse {svi_rmse} | svi full feasible {r[12]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--quotes", nargs="+", help="quote CSV (several files for stability)")
    common.add_argument("--context", nargs="+", help="valuation context (JSON or CSV)")
    common.add_argument("--grid", help="grid spec JSON")
    common.add_argument("--config", help="calibration config JSON")
    common.add_argument("--mode", choices=("ends", "all"), help="calibrate the end terms only or all terms")
    common.add_argument("--seed", type=int, help="optimizer seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--plot-data", action="store_true", help="also write gnuplot grid blocks")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sigmoidvol", description="Arbitrage-free implied volatility surfaces.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "stability":
            p.add_argument("--synthetic-days", type=int, default=0,
                           help="build this many days from the first file, adding noise after day 1")
            p.add_argument("--noise", type=float, default=0.2, help="uniform IV noise in vol points")
            p.add_argument("--freeze-c", action="store_true", help="hold each term's C at its day-1 value")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = _run_config(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (InputError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    timing: dict = {}
    start = time.perf_counter()
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        if run.command == "stability":
            code = cmd_stability(run, timing, args.synthetic_days, args.noise, args.freeze_c)
        else:
            handler = {
                "fit": cmd_fit,
                "surface": cmd_surface,
                "localvol": cmd_localvol,
                "density": cmd_density,
                "check-noarb": cmd_check_noarb,
                "compare-svi": cmd_compare_svi,
            }[run.command]
            code = handler(run, timing)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ArbitrageError as exc:
        print(f"arbitrage: {exc}", file=sys.stderr)
        for node in exc.nodes[:50]:
            print(f"  T={node[0]:.6g} at {node[1]:.6g} {node[2]} margin={node[3]:.3e}", file=sys.stderr)
        return EXIT_ARBITRAGE
    except OptimizerError as exc:
        print(f"optimizer: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(jsonable(exc.diagnostics), sort_keys=True, default=str), file=sys.stderr)
        return EXIT_OPTIMIZER
    except (InputError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    timing["total"] = time.perf_counter() - start
    _write_json(run.out / "timing.json", timing)
    return code


if __name__ == "__main__":
    sys.exit(main())
