import numpy as np
import pytest

from mkvctl.errors import DomainError, GridError, NumericalBlowup
from mkvctl.forward_sim import (GaussianSampler, StepControl, TimeGrid, evaluate_control, flow_check,
                                gain_estimate, simulate_coupled, write_trajectory_csv)
from mkvctl.measures import empirical_from_samples
from mkvctl.problem import BenchmarkProblem, CoefficientSet, get_problem, registry


def test_grid_nodes_and_index():
    g = TimeGrid(0.0, 1.0, 4)
    np.testing.assert_allclose(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.index_of(0.5) == 2
    with pytest.raises(GridError):
        g.index_of(0.3)


def test_constant_control_ignores_history():
    c = StepControl.constant(1, 1.0)
    for h in ([], [0.3], [-2.0, 1.0]):
        assert evaluate_control(c, 0.4, h) == 1


def test_two_interval_control():
    c = StepControl.from_actions([0, 1], 1.0)
    assert evaluate_control(c, 0.0, []) == 0
    assert evaluate_control(c, 0.4999, []) == 0
    assert evaluate_control(c, 0.5, []) == 1
    assert evaluate_control(c, 1.0, []) == 1


def test_sign_cell():
    g = TimeGrid(0.0, 1.0, 2)
    c = StepControl(g, 2, np.array([[0, 0], [3, 4]]))
    assert evaluate_control(c, 0.7, [-0.1]) == 3
    assert evaluate_control(c, 0.7, [0.2]) == 4


def test_evaluate_outside_horizon():
    with pytest.raises(DomainError):
        evaluate_control(StepControl.constant(0, 1.0), 1.5, [])


def test_zero_problem_static():
    p = get_problem("zero")
    traj = simulate_coupled(p, 0.0, np.array([0.7]), GaussianSampler(0, 1), StepControl.constant(0, 1.0),
                            TimeGrid(0, 1, 5), 16)
    for snap in traj:
        np.testing.assert_array_equal(snap.xi_particles, traj[0].xi_particles)
        np.testing.assert_array_equal(snap.x_particles, traj[0].x_particles)


def test_drift_only_exact():
    p = get_problem("drift-only")
    traj = simulate_coupled(p, 0.2, np.array([0.5]), GaussianSampler(0, 1), StepControl.constant(1, 1.0),
                            TimeGrid(0.2, 1.0, 8), 8)
    for snap in traj:
        assert np.allclose(snap.x_particles, 0.5 + (snap.time - 0.2), atol=1e-14)
    est = gain_estimate(p, 0.2, np.array([0.5]), GaussianSampler(0, 1), StepControl.constant(1, 1.0),
                        TimeGrid(0.2, 1.0, 8), 8)
    assert est.mean == pytest.approx(1.3, abs=1e-14) and est.std_error == 0.0


def test_mean_field_mean_invariant():
    p = get_problem("mean-field-drift")
    pi = empirical_from_samples([[-1.0], [1.0]])
    traj = simulate_coupled(p, 0.0, np.array([0.0]), pi, StepControl.constant(0, 1.0), TimeGrid(0, 1, 10), 2)
    for snap in traj:
        assert abs(snap.xi_particles.mean()) < 1e-14


def test_zero_gain():
    p = get_problem("zero")
    est = gain_estimate(p, 0.0, np.zeros(1), GaussianSampler(0, 1), StepControl.constant(0, 1.0),
                        TimeGrid(0, 1, 4), 32)
    assert est.mean == 0.0 and est.std_error == 0.0


def test_determinism_same_seed():
    p = get_problem("two-action-toy")
    args = (p, 0.0, np.zeros(1), GaussianSampler(0, .5), StepControl.from_actions([0, 1], 1.0), TimeGrid(0, 1, 10), 50)
    a = simulate_coupled(*args, seed=3)
    b = simulate_coupled(*args, seed=3)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.x_particles, v.x_particles)


def test_pairing_shares_increments():
    p = get_problem("mean-field-drift", sigma=0.3)
    pi = empirical_from_samples([[0.0]])
    traj = simulate_coupled(p, 0.0, np.zeros(1), pi, StepControl.constant(0, 1.0), TimeGrid(0, 1, 6), 20, 20, seed=1)
    np.testing.assert_allclose(traj[-1].x_particles, traj[-1].xi_particles, atol=1e-14)
    traj = simulate_coupled(p, 0.0, np.zeros(1), pi, StepControl.constant(0, 1.0), TimeGrid(0, 1, 6), 20, 10, seed=1)
    assert not np.allclose(traj[-1].x_particles, traj[-1].xi_particles[:10])


def test_blowup_reports_node():
    coeffs = CoefficientSet(drift=lambda t, x, pi, a: 1e200 * x ** 3,
                            diffusion=lambda t, x, pi, a: np.zeros((x.shape[0], 1, 1)),
                            running=lambda t, x, pi, a: np.zeros(x.shape[0]), terminal=lambda x, pi: x[:, 0])
    p = BenchmarkProblem("bad", coeffs, get_problem("zero").space, 1.0)
    with pytest.raises(NumericalBlowup) as e:
        simulate_coupled(p, 0.0, np.ones(1), GaussianSampler(1, 0), StepControl.constant(0, 1.0), TimeGrid(0, 1, 10), 4)
    assert e.value.node is not None


def test_euler_bias_first_order():
    p = get_problem("drift-only", running="x")
    exact = p.analytic_value(0.0, np.array([0.3]), None)
    errs = []
    for n in (10, 20, 40):
        est = gain_estimate(p, 0.0, np.array([0.3]), GaussianSampler(0, 1), StepControl.constant(1, 1.0),
                            TimeGrid(0, 1, n), 4)
        errs.append(abs(est.mean - exact))
    # trapezoid with exact linear states: the error is at floating-point level
    assert max(errs) < 1e-12


@pytest.mark.parametrize("frac", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_flow_replay(frac):
    p = get_problem("mean-field-drift", sigma=0.4)
    g = TimeGrid(0, 1, 8)
    r = flow_check(p, 0.0, frac, np.zeros(1), GaussianSampler(0, 1), StepControl.constant(0, 1.0), g, 64, seed=2)
    assert r["max"] <= 1e-10
    if frac == 0.0:
        assert r["max"] == 0.0


def test_flow_off_grid():
    p = get_problem("zero")
    with pytest.raises(GridError):
        flow_check(p, 0.0, 0.3, np.zeros(1), GaussianSampler(0, 1), StepControl.constant(0, 1.0), TimeGrid(0, 1, 4), 8)


def test_registry_no_blowup_fine_grid():
    for p in registry():
        simulate_coupled(p, 0.0, np.array([1.0]), GaussianSampler(0, 1), StepControl.constant(0, p.horizon),
                         TimeGrid(0, p.horizon, 100), 32)


def test_trajectory_csv(tmp_path):
    p = get_problem("zero")
    traj = simulate_coupled(p, 0.0, np.zeros(1), GaussianSampler(0, 1), StepControl.constant(0, 1.0), TimeGrid(0, 1, 2), 2)
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, traj, "seed=0")
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "step,time,particle_id,component,value,kind"
    assert len(lines) == 2 + 3 * 2 * 2
