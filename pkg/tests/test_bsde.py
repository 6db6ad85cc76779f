import numpy as np
import pytest

import mkvctl.bsde as bsde
from mkvctl.bsde import (DEFAULT_SCHEDULE, LatticeConfig, driver_eval, dpp_check, dual_check, feynman_kac_check,
                         minimal_solution, penalized_tree, solve_penalized)
from mkvctl.control_opt import SimConfig, enumerate_step_controls
from mkvctl.errors import SchemeInconsistency, TreeError
from mkvctl.forward_sim import GaussianSampler, StepControl
from mkvctl.measures import dirac
from mkvctl.problem import BenchmarkProblem, CoefficientSet, get_problem, registry

TWO = [StepControl.constant(0, 1.0), StepControl.constant(1, 1.0)]


def _no_jump(tree, i, mark):
    st = tree.levels[i].states
    k = np.flatnonzero((st[:, 1] == mark) & (st[:, 2] == 0))[0]
    return (i, int(st[k, 0]), mark)


def _drift_tree(rate=1.0, n_steps=8, **kw):
    p = get_problem("drift-only", **kw)
    return penalized_tree(p, 0.0, np.array([0.5]), dirac([0.0]), TWO, SimConfig(n_steps, 4), LatticeConfig(rate=rate), 0)


def test_driver_zero():
    p = get_problem("zero")
    tree = penalized_tree(p, 0.0, np.zeros(1), GaussianSampler(0, 1), TWO, SimConfig(4, 8), LatticeConfig(rate=1.0), 0)
    for i in range(4):
        assert driver_eval(tree, _no_jump(tree, i, 0)) == 0.0


def test_driver_constant_one():
    base = get_problem("zero")
    c = base.coefficients
    coeffs = CoefficientSet(c.drift, c.diffusion, lambda t, x, pi, a: np.ones(x.shape[0]), c.terminal)
    p = BenchmarkProblem("ones", coeffs, base.space, 1.0)
    tree = penalized_tree(p, 0.0, np.zeros(1), dirac([0.0]), TWO, SimConfig(4, 8), LatticeConfig(rate=1.0), 0)
    assert driver_eval(tree, _no_jump(tree, 2, 0)) == pytest.approx(1.0, abs=1e-14)
    # with f = 1 and no terminal reward, Y^0 is the remaining time
    assert solve_penalized(0, tree).root == pytest.approx(1.0, abs=1e-14)


def test_driver_drift_only_midpoint():
    tree = _drift_tree(running="x")
    dt = tree.dt
    for i in range(tree.stop):
        # the state moves linearly with slope +1 under mark 1; the average is the midpoint value
        assert driver_eval(tree, _no_jump(tree, i, 0)) == pytest.approx(0.5 - (i + 0.5) * dt, abs=1e-12)


def test_driver_bad_node():
    tree = _drift_tree()
    with pytest.raises(TreeError):
        driver_eval(tree, (tree.stop, 0, 0))


def test_penalized_zero_problem():
    p = get_problem("zero")
    tree = penalized_tree(p, 0.0, np.zeros(1), GaussianSampler(0, 1), TWO, SimConfig(4, 8), LatticeConfig(), 0)
    for n in (0, 1, 256):
        assert solve_penalized(n, tree).root == 0.0


def test_penalized_no_penalty_keeps_initial_mark():
    assert solve_penalized(0, _drift_tree()).root == pytest.approx(-0.5, abs=1e-12)


def test_penalized_limit_drift_only():
    tree = _drift_tree()
    roots = [solve_penalized(n, tree).root for n in (1, 10, 100, 1e4, 1e6)]
    assert all(b >= a - 1e-12 for a, b in zip(roots, roots[1:]))
    assert abs(roots[-1] - 1.5) <= 3e-6
    assert abs(roots[-2] - 1.5) <= 3e-4


def test_penalized_negative_n():
    with pytest.raises(ValueError):
        solve_penalized(-1, _drift_tree())


def test_k_properties():
    tree = _drift_tree()
    sol = solve_penalized(50, tree)
    assert np.all(sol.K[0] == 0.0)
    assert all(np.all(k >= 0) and np.all(np.isfinite(k)) for k in sol.K)
    assert max(k.max() for k in sol.K[1:]) > 0
    assert all(np.all(k == 0) for k in solve_penalized(0, tree).K)


def test_trace_csv_header():
    sol = solve_penalized(2, _drift_tree(n_steps=2))
    lines = sol.to_csv("# seed=0").splitlines()
    assert lines[0] == "# seed=0" and lines[1] == "n,node_id,time,Y,K,max_U_plus"
    assert len(lines) == 2 + sum(len(y) for y in sol.Y)


@pytest.mark.parametrize("name", [p.name for p in registry()])
def test_dual_on_registry(name):
    p = get_problem(name)
    cat = enumerate_step_controls(p.space, 1, 1)
    tree = penalized_tree(p, 0.0, np.array([0.3]), GaussianSampler(0, .5), cat, SimConfig(6, 32),
                          LatticeConfig(rate=2.0, K_max=2), 1)
    for n in DEFAULT_SCHEDULE:
        assert dual_check(n, tree) <= 1e-6


def test_minimal_solution_drift_only():
    ms = minimal_solution(_drift_tree(), schedule=(1, 4, 16, 64, 256, 1024, 4096), tolerance=5e-3)
    ys = [y for _n, y, _u in ms.trace]
    assert all(b >= a for a, b in zip(ys, ys[1:]))
    assert ms.converged and ms.constraint_ok
    assert ms.Y == pytest.approx(1.5, abs=1e-3)
    assert '"converged": true' in ms.to_json()


def test_minimal_solution_detects_decrease(monkeypatch):
    tree = _drift_tree()
    real = bsde.solve_penalized

    def fake(n, tr):
        sol = real(n, tr)
        sol.Y[0] = sol.Y[0] - n   # roots fall with n
        return sol

    monkeypatch.setattr(bsde, "solve_penalized", fake)
    with pytest.raises(SchemeInconsistency):
        minimal_solution(tree, schedule=(1, 2))


def test_minimal_solution_bad_schedule():
    with pytest.raises(ValueError):
        minimal_solution(_drift_tree(), schedule=(4, 2))


def test_feynman_kac_zero():
    p = get_problem("zero")
    r = feynman_kac_check(p, 0.0, np.zeros(1), GaussianSampler(0, 1), TWO, SimConfig(4, 8), LatticeConfig(), repeats=2)
    assert r["Y_t"] == 0.0 and r["V_direct"] == 0.0 and r["difference"] == 0.0


def test_feynman_kac_single_action():
    p = get_problem("drift-only")
    cat = [StepControl.constant(1, 1.0)]
    r = feynman_kac_check(p, 0.0, np.array([0.5]), dirac([0.0]), cat, SimConfig(4, 4), LatticeConfig(), repeats=2)
    assert r["Y_t"] == pytest.approx(1.5, abs=1e-12) and r["difference"] <= 1e-12


def test_dpp_zero():
    p = get_problem("zero")
    r = dpp_check(p, 0.0, 0.5, np.zeros(1), GaussianSampler(0, 1), TWO, SimConfig(4, 8), LatticeConfig(),
                  repeats=2, subsample=4, reps=2)
    assert r["residual"] == 0.0


def test_dpp_drift_only_exact():
    p = get_problem("drift-only")
    r = dpp_check(p, 0.0, 0.5, np.array([0.5]), dirac([0.0]), [StepControl.constant(1, 1.0)], SimConfig(4, 4),
                  LatticeConfig(), repeats=2, subsample=4, reps=2)
    assert r["lhs"] == pytest.approx(1.5, abs=1e-12) and r["residual"] <= 1e-12
