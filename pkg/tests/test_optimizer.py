import numpy as np
import pytest

from sigmoidvol.optimizer import FEASIBILITY_TOL, CMAESConfig, minimize


def sphere(center):
    center = np.asarray(center)

    def evaluate(U):
        obj = np.sum((U - center) ** 2, axis=1)
        return obj, np.zeros(len(U)), np.full(len(U), -1.0)

    return evaluate


def constrained(U):
    # minimise distance to (0.8, 0.8) subject to u0 + u1 <= 1
    obj = np.sum((U - 0.8) ** 2, axis=1)
    g = U[:, 0] + U[:, 1] - 1.0
    return obj, np.maximum(g, 0.0) ** 2, g


def rosenbrock(U):
    X = 4.0 * U - 2.0
    obj = np.sum(100.0 * (X[:, 1:] - X[:, :-1] ** 2) ** 2 + (1.0 - X[:, :-1]) ** 2, axis=1)
    return obj, np.zeros(len(U)), np.full(len(U), -1.0)


def test_sphere_converges():
    res = minimize(sphere([0.3, 0.7, 0.5, 0.2]), np.full(4, 0.5), CMAESConfig(max_evals=3000))
    assert res.feasible and res.objective < 1e-12
    assert np.allclose(res.x, [0.3, 0.7, 0.5, 0.2], atol=1e-6)


def test_rosenbrock():
    res = minimize(rosenbrock, np.full(5, 0.2), CMAESConfig(max_evals=10_000))
    assert res.objective < 1e-8
    assert np.allclose(4.0 * res.x - 2.0, 1.0, atol=1e-4)


def test_constrained_optimum_on_boundary():
    res = minimize(constrained, np.array([0.1, 0.1]), CMAESConfig(max_evals=4000))
    assert res.feasible and res.worst_violation <= FEASIBILITY_TOL
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-3)
    assert res.x.sum() <= 1.0 + FEASIBILITY_TOL


def test_never_worse_than_feasible_start():
    start = np.array([0.45, 0.5])
    obj0 = constrained(start[None, :])[0][0]
    res = minimize(constrained, start, CMAESConfig(max_evals=200))
    assert res.objective <= obj0


def test_budget_respected():
    for budget in (1, 10, 57, 500):
        res = minimize(sphere([0.4, 0.4]), np.array([0.5, 0.5]), CMAESConfig(max_evals=budget))
        assert res.evals <= max(budget, 1)


def test_deterministic_and_seeded():
    cfg = CMAESConfig(max_evals=600, seed=3)
    a = minimize(rosenbrock, np.full(3, 0.3), cfg)
    b = minimize(rosenbrock, np.full(3, 0.3), cfg)
    c = minimize(rosenbrock, np.full(3, 0.3), CMAESConfig(max_evals=600, seed=4))
    assert np.array_equal(a.x, b.x) and a.objective == b.objective
    assert not np.array_equal(a.x, c.x)


def test_infeasible_problem_reports_best_violation():
    def impossible(U):
        g = 2.5 - U.sum(axis=1)  # u0 + u1 >= 2.5 is out of the unit box
        return np.zeros(len(U)), np.maximum(g, 0) ** 2, g

    res = minimize(impossible, np.array([0.5, 0.5]), CMAESConfig(max_evals=500))
    assert not res.feasible and res.x is None
    assert res.best_infeasible["worst_violation"] == pytest.approx(0.5, abs=1e-3)


def test_stays_in_unit_box():
    seen = []

    def evaluate(U):
        seen.append(U.copy())
        return sphere([1.5, -0.5])(U)

    res = minimize(evaluate, np.array([0.5, 0.5]), CMAESConfig(max_evals=1000))
    allu = np.vstack(seen)
    assert allu.min() >= 0.0 and allu.max() <= 1.0
    assert np.allclose(res.x, [1.0, 0.0], atol=1e-6)


def test_scales_validation():
    with pytest.raises(ValueError):
        minimize(sphere([0.5]), np.array([0.5]), scales=np.array([0.0]))
    with pytest.raises(ValueError):
        minimize(sphere([0.5]), np.array([0.5]), scales=np.array([1.0, 1.0]))


def test_restarts_escape_local_minimum():
    # two wells; the start sits in the shallow one
    def wells(U):
        x = U[:, 0]
        obj = np.minimum((x - 0.2) ** 2 + 0.05, 2 * (x - 0.8) ** 2)
        return obj, np.zeros(len(U)), np.full(len(U), -1.0)

    res = minimize(wells, np.array([0.2]), CMAESConfig(max_evals=5000, sigma0=0.02), scales=np.array([1.0]))
    assert res.restarts >= 1
    assert res.x[0] == pytest.approx(0.8, abs=1e-4)
