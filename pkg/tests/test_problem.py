import json

import numpy as np
import pytest

from mkvctl.errors import ConfigError, UnsupportedBenchmark
from mkvctl.measures import dirac, empirical_from_samples
from mkvctl.problem import (ActionSpace, CoefficientSet, LQParams, assumption_audit, default_growth, get_problem,
                            gaussian_cloud_with_moments, load_problem, lq_riccati_value, problem_from_config,
                            registry)


def test_registry_names():
    names = {p.name for p in registry()}
    assert {"zero", "drift-only", "mean-field-drift", "systemic-risk-lq", "two-action-toy"} <= names
    toy = get_problem("two-action-toy")
    assert len(toy.space) == 2 and toy.dim == 1


def test_action_metric_below_one():
    sp = ActionSpace([-1.0, 0.0, 5.0], metric_scale=1.0)
    assert sp.rho(0, 2) < 1.0 and sp.rho(1, 1) == 0.0


def test_duplicate_actions_rejected():
    with pytest.raises(Exception):
        ActionSpace([1.0, 1.0])


def _coeffs(drift, L=1.0, f=None):
    return CoefficientSet(
        drift=drift, diffusion=lambda t, x, pi, a: np.zeros((x.shape[0], 1, 1)),
        running=f or (lambda t, x, pi, a: np.zeros(x.shape[0])), terminal=lambda x, pi: np.zeros(x.shape[0]),
        lipschitz_L=L, growth_h=default_growth(0.0))


def test_audit_constant_drift_passes():
    rep = assumption_audit(_coeffs(lambda t, x, pi, a: np.ones_like(x)), ActionSpace([0.0]), 50, 0)
    assert rep["max_lipschitz_ratio_drift"] == 0.0 and rep["passed"]


def test_audit_flags_steep_drift():
    rep = assumption_audit(_coeffs(lambda t, x, pi, a: 2 * x, L=1.0), ActionSpace([0.0]), 50, 0)
    assert not rep["passed"] and rep["max_lipschitz_ratio_drift"] > 1.5


def test_audit_zero_rewards_growth_ok():
    rep = assumption_audit(_coeffs(lambda t, x, pi, a: np.zeros_like(x)), ActionSpace([0.0]), 20, 1)
    assert rep["max_growth_ratio"] == 0.0 and rep["passed"]


def test_registry_audits_pass():
    for p in registry():
        assert assumption_audit(p.coefficients, p.space, 40, 0, horizon=p.horizon)["passed"], p.name


def test_lq_zero_costs():
    p = LQParams(r=1.0, eps=0.0, c=0.0)
    assert lq_riccati_value(p, 0.3, 1.2, dirac([0.0])) == 0.0


def test_lq_terminal_time_is_terminal_cost():
    p = LQParams()
    pi = empirical_from_samples([[0.0], [1.0]])
    assert lq_riccati_value(p, p.horizon, 2.0, pi) == -0.5 * p.c * (2.0 - 0.5) ** 2


def test_lq_depends_on_law_through_moments():
    p = LQParams()
    a = gaussian_cloud_with_moments(0.3, 0.2, 500, 1)
    b = gaussian_cloud_with_moments(0.3, 0.2, 731, 2)
    assert lq_riccati_value(p, 0.0, 0.9, a) == pytest.approx(lq_riccati_value(p, 0.0, 0.9, b), abs=1e-9)


def test_lq_non_scalar_state():
    with pytest.raises(UnsupportedBenchmark):
        lq_riccati_value(LQParams(), 0.0, [0.0, 1.0], dirac([0.0]))


def _riccati_fine(p, t, gap, n=1_000_000):
    # independent oracle: explicit Euler on the same ODE system at a much finer step
    P = R = p.c
    phi = 0.0
    h = (p.horizon - t) / n
    for _ in range(n):
        dP = P * P / p.r + 2 * p.kappa * P - p.eps
        dR = 2 * p.kappa * R - p.eps
        dphi = -0.5 * p.sigma**2 * P
        P, R, phi = P - h * dP, R - h * dR, phi - h * dphi
    return -0.5 * R * gap * gap - phi


def test_lq_reference_point():
    p = LQParams()
    ref = json.loads((__import__("pathlib").Path(__file__).parent / "data" / "lq_reference.json").read_text())
    pi = dirac([0.0])
    for row in ref["rows"]:
        assert lq_riccati_value(p, row["t"], row["x"], pi) == pytest.approx(row["value"], abs=1e-9)


@pytest.mark.slow
def test_lq_against_fine_grid():
    p = LQParams()
    for t, x in ((0.0, 0.75), (0.5, 0.2)):
        assert lq_riccati_value(p, t, x, dirac([0.0])) == pytest.approx(_riccati_fine(p, t, x), abs=1e-6)


def test_config_loading(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"name": "systemic-risk-lq", "dimension": 1, "horizon": 2.0,
                                "lq": {"sigma": 0.2}}))
    prob = load_problem(path)
    assert prob.horizon == 2.0 and prob.params["lq"]["sigma"] == 0.2
    with pytest.raises(ConfigError):
        problem_from_config({"name": "nope"})
    with pytest.raises(ConfigError):
        problem_from_config({"horizon": 1.0})
