"""Constrained (mu/mu_w, lambda) CMA-ES with IPOP restarts.

Per-coordinate ``scales`` set the initial covariance, so the step size is
measured in typical parameter magnitudes rather than box widths.  The first
run starts at the caller's point; each restart doubles the population and
starts from that point perturbed by one typical magnitude per coordinate,
until the evaluation budget is spent.

The search runs in the unit box [0, 1]^n.  Candidates leaving the box are
clipped for evaluation and charged a quadratic distance penalty.  Constraint
violations enter the ranking through a penalty whose weight doubles after
a generation whose best-ranked candidate is infeasible and halves, down to
its starting value, after one whose best is feasible.  The incumbent
returned to the caller is the best *feasible* point seen, ranked by the raw
objective.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FEASIBILITY_TOL = 1e-8
BOX_PENALTY = 1e4
PENALTY_CAP = 1e12


@dataclass(frozen=True)
class CMAESConfig:
    """Search settings.

    Attributes:
        max_evals: total budget of objective evaluations, restarts included.
        popsize: initial population; None uses 4 + floor(3 ln n).
        sigma0: initial step size in units of ``scales``.
        penalty_scale: initial constraint penalty weight.
        max_restarts: IPOP restarts, each doubling the population.
        tol_x: stop a run when sigma * max sqrt(diag C) falls below this.
        tol_fun: stop a run when recent best fitness values span less.
        stall_generations: stop a run after this many generations without
            a relative improvement of ``stall_rtol`` in its best feasible
            objective.
        seed: PCG64 seed.
    """

    max_evals: int = 10_000
    popsize: Optional[int] = None
    sigma0: float = 0.05
    penalty_scale: float = 100.0
    max_restarts: int = 8
    tol_x: float = 1e-9
    tol_fun: float = 1e-12
    stall_generations: int = 40
    stall_rtol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.max_evals <= 0:
            raise ValueError("max_evals must be positive")
        if not self.sigma0 > 0.0:
            raise ValueError("sigma0 must be positive")
        if not self.penalty_scale > 0.0:
            raise ValueError("penalty_scale must be positive")


@dataclass
class OptimizeResult:
    x: Optional[np.ndarray]  # best feasible point in unit coordinates
    objective: float
    penalty: float
    worst_violation: float
    feasible: bool
    evals: int
    generations: int
    restarts: int
    wall_time: float
    best_infeasible: dict = field(default_factory=dict)
    stop_reason: str = ""


# Evaluator contract: U (n_pop, n) in [0, 1] -> (objective, penalty, worst).
Evaluator = Callable[[np.ndarray], tuple]


class _Tracker:
    def __init__(self):
        self.best_u = None
        self.best_obj = math.inf
        self.best_pen = 0.0
        self.best_worst = math.inf
        self.inf_u = None
        self.inf_worst = math.inf
        self.inf_obj = math.inf

    def update(self, U, obj, pen, worst) -> bool:
        improved = False
        feas = worst <= FEASIBILITY_TOL
        if feas.any():
            idx = np.flatnonzero(feas)
            j = idx[np.argmin(obj[idx])]
            if obj[j] < self.best_obj:
                self.best_obj = float(obj[j])
                self.best_u = U[j].copy()
                self.best_pen = float(pen[j])
                self.best_worst = float(worst[j])
                improved = True
        if (~feas).any():
            idx = np.flatnonzero(~feas)
            j = idx[np.argmin(worst[idx])]
            if worst[j] < self.inf_worst:
                self.inf_worst = float(worst[j])
                self.inf_obj = float(obj[j])
                self.inf_u = U[j].copy()
        return improved


def minimize(
    evaluate: Evaluator,
    u0,
    config: CMAESConfig = CMAESConfig(),
    obj_scale: Optional[float] = None,
    scales=None,
) -> OptimizeResult:
    """Minimise objective subject to penalty == 0 starting from ``u0``.

    Args:
        evaluate: vectorised evaluator (see ``Evaluator``).
        u0: starting point in the unit box.
        obj_scale: objective normaliser; defaults to the objective at u0.
        scales: typical magnitude of each coordinate in unit-box units;
            defaults to ones.
    """
    start = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    u0 = np.clip(np.asarray(u0, dtype=float), 0.0, 1.0)
    n = u0.size
    tracker = _Tracker()

    obj0, pen0, worst0 = (np.asarray(a, dtype=float) for a in evaluate(u0[None, :]))
    evals = 1
    tracker.update(u0[None, :], obj0, pen0, worst0)
    if obj_scale is None:
        obj_scale = float(obj0[0])
    obj_scale = obj_scale if obj_scale > 1e-300 and math.isfinite(obj_scale) else 1.0

    scales = np.ones(n) if scales is None else np.asarray(scales, dtype=float)
    if scales.shape != (n,) or not np.all(scales > 0.0):
        raise ValueError("scales must be positive, one per coordinate")
    if n == 0:
        return _result(tracker, evals, 0, 0, start, "no free parameters")

    lam_pen = config.penalty_scale
    base_pop = config.popsize or 4 + int(3 * math.log(n))
    generations = 0
    restarts = 0
    mean0 = u0.copy()
    reason = ""

    while True:
        pop = base_pop * (2**restarts)
        reason, gens, lam_pen, evals = _run(
            evaluate, mean0, scales, pop, config, rng, tracker, evals, obj_scale, lam_pen
        )
        generations += gens
        if evals >= config.max_evals or restarts >= config.max_restarts:
            if evals >= config.max_evals:
                reason = "max_evals"
            break
        restarts += 1
        mean0 = np.clip(u0 + scales * rng.standard_normal(n), 0.0, 1.0)
    return _result(tracker, evals, generations, restarts, start, reason)


def _result(tracker, evals, generations, restarts, start, reason) -> OptimizeResult:
    feasible = tracker.best_u is not None
    diag = {}
    if tracker.inf_u is not None:
        diag = {"u": tracker.inf_u.tolist(), "objective": tracker.inf_obj, "worst_violation": tracker.inf_worst}
    return OptimizeResult(
        x=tracker.best_u,
        objective=tracker.best_obj if feasible else math.inf,
        penalty=tracker.best_pen if feasible else math.inf,
        worst_violation=tracker.best_worst if feasible else tracker.inf_worst,
        feasible=feasible,
        evals=evals,
        generations=generations,
        restarts=restarts,
        wall_time=time.perf_counter() - start,
        best_infeasible=diag,
        stop_reason=reason,
    )


def _run(evaluate, mean, scales, lam, config, rng, tracker, evals, obj_scale, lam_pen):
    n = mean.size
    mu = lam // 2
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mueff = 1.0 / np.sum(weights**2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    sigma = config.sigma0
    pc = np.zeros(n)
    ps = np.zeros(n)
    B = np.eye(n)
    D = scales.copy()
    C = np.diag(D * D)
    eigen_at = 0
    gen = 0
    history: list[float] = []
    last_improve = 0
    run_best = math.inf
    hist_len = 10 + int(math.ceil(30 * n / lam))

    while True:
        if evals + lam > config.max_evals:
            return "max_evals", gen, lam_pen, evals
        gen += 1
        Z = rng.standard_normal((lam, n))
        Y = Z @ (B * D).T
        X = mean + sigma * Y
        U = np.clip(X, 0.0, 1.0)
        obj, pen, worst = (np.asarray(a, dtype=float) for a in evaluate(U))
        evals += lam
        tracker.update(U, obj, pen, worst)
        feas = worst <= FEASIBILITY_TOL
        if feas.any():
            gen_best = float(np.min(obj[feas]))
            if gen_best < run_best - config.stall_rtol * abs(run_best) or not math.isfinite(run_best):
                last_improve = gen
            run_best = min(run_best, gen_best)

        box = np.sum((X - U) ** 2, axis=1)
        with np.errstate(over="ignore", invalid="ignore"):
            fit = obj / obj_scale + lam_pen * pen + BOX_PENALTY * box
        fit = np.where(np.isfinite(fit), fit, np.inf)
        order = np.argsort(fit, kind="stable")
        if worst[order[0]] > FEASIBILITY_TOL:
            lam_pen = min(2.0 * lam_pen, PENALTY_CAP)
        else:
            lam_pen = max(0.5 * lam_pen, config.penalty_scale)

        sel = Y[order[:mu]]
        y_w = weights @ sel
        mean = mean + sigma * y_w

        inv_sqrt = (B / D) @ B.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt @ y_w)
        hsig = np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w
        rank_mu = (sel.T * weights) @ sel
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (not hsig) * cc * (2 - cc) * C)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))
        sigma = min(sigma, 1.0)

        if evals - eigen_at > lam / (c1 + cmu) / n / 10:
            eigen_at = evals
            C = np.triu(C) + np.triu(C, 1).T
            vals, B = np.linalg.eigh(C)
            D = np.sqrt(np.maximum(vals, 1e-300))

        best_fit = float(fit[order[0]])
        history.append(best_fit)
        if sigma * D.max() < config.tol_x:
            return "tol_x", gen, lam_pen, evals
        if len(history) >= hist_len:
            recent = history[-hist_len:]
            if max(recent) - min(recent) < config.tol_fun and np.ptp(fit[np.isfinite(fit)]) < config.tol_fun:
                return "tol_fun", gen, lam_pen, evals
        if gen - last_improve > config.stall_generations and math.isfinite(run_best):
            return "stagnation", gen, lam_pen, evals
        if D.max() > 1e7 * D.min():
            return "condition", gen, lam_pen, evals
