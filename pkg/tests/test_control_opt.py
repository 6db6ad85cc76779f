import numpy as np
import pytest

from mkvctl.control_opt import (SimConfig, enumerate_step_controls, joint_product_value, krylov_distance,
                                stability_probe, value_direct, value_mkv)
from mkvctl.errors import CapacityError, UnsupportedInput
from mkvctl.forward_sim import GaussianSampler, StepControl, TimeGrid
from mkvctl.measures import EmpiricalMeasure, dirac, empirical_from_samples
from mkvctl.problem import ActionSpace, get_problem


@pytest.mark.parametrize("M,k,L,n", [(2, 1, 1, 2), (2, 2, 1, 4), (3, 3, 2, 729)])
def test_catalog_size(M, k, L, n):
    sp = ActionSpace(np.arange(M, dtype=float))
    assert len(enumerate_step_controls(sp, k, L)) == n


def test_catalog_cap():
    with pytest.raises(CapacityError):
        enumerate_step_controls(ActionSpace([0.0, 1.0, 2.0]), 4, 2, cap=4096)


def test_value_direct_zero_ties_lowest():
    p = get_problem("zero")
    cat = enumerate_step_controls(p.space, 2, 1)
    dv = value_direct(p, 0.0, np.zeros(1), GaussianSampler(0, 1), cat, SimConfig(4, 16))
    assert dv.value == 0.0 and dv.argmax == 0


def test_value_direct_drift_only():
    p = get_problem("drift-only")
    cat = enumerate_step_controls(p.space, 2, 1)
    dv = value_direct(p, 0.25, np.array([0.5]), dirac([0.0]), cat, SimConfig(6, 8))
    assert dv.value == pytest.approx(0.5 + 0.75, abs=1e-12)
    assert np.all(cat[dv.argmax].table == 1)


def test_value_mkv_single_atom():
    p = get_problem("two-action-toy")
    cat = enumerate_step_controls(p.space, 2, 1)
    sim = SimConfig(10, 400)
    xi = dirac([0.2])
    assert value_mkv(p, 0.0, xi, cat, sim)["value"] == pytest.approx(
        value_direct(p, 0.0, np.array([0.2]), xi, cat, sim).value, abs=1e-12)


def test_value_mkv_linear_drift_only():
    p = get_problem("drift-only")
    cat = enumerate_step_controls(p.space, 1, 1)
    xi = EmpiricalMeasure(np.array([[-1.0], [2.0]]), np.array([0.3, 0.7]))
    out = value_mkv(p, 0.5, xi, cat, SimConfig(4, 10))
    assert out["value"] == pytest.approx(0.3 * (-0.5) + 0.7 * 2.5, abs=1e-12)
    assert value_mkv(get_problem("zero"), 0.0, xi, enumerate_step_controls(p.space, 1, 1), SimConfig(4, 10))["value"] == 0


def test_value_mkv_rejects_continuous():
    p = get_problem("zero")
    with pytest.raises(UnsupportedInput):
        value_mkv(p, 0.0, GaussianSampler(0, 1), enumerate_step_controls(p.space, 1, 1))


def test_joint_never_beats_disintegrated_drift_only():
    p = get_problem("drift-only")
    cat = enumerate_step_controls(p.space, 1, 1)
    xi = EmpiricalMeasure(np.array([[-1.0], [2.0]]), np.array([0.5, 0.5]))
    sim = SimConfig(4, 10)
    assert joint_product_value(p, 0.0, xi, cat, sim)["value"] == pytest.approx(value_mkv(p, 0.0, xi, cat, sim)["value"])


def test_krylov_cases():
    sp = ActionSpace([0.0, 0.5])
    a = StepControl.from_actions([0, 0], 1.0)
    b = StepControl.from_actions([0, 1], 1.0)
    assert krylov_distance(a, a, sp) == 0.0
    assert krylov_distance(a, b, sp) == pytest.approx(0.25)
    g = TimeGrid(0, 1, 2)
    c = StepControl(g, 2, np.array([[0, 0], [0, 1]]))
    assert krylov_distance(a, c, sp, seed=4) == krylov_distance(c, a, sp, seed=4)
    assert 0.0 < krylov_distance(a, c, sp, n_paths=4000, seed=4) < 0.5


def test_stability_zero_problem():
    p = get_problem("zero")
    rows = stability_probe(p, 0.0, np.zeros(1), dirac([0.0]), StepControl.constant(0, 1.0), sim=SimConfig(16, 8))
    assert all(r["delta_J"] == 0.0 for r in rows)


def test_stability_drift_only_linear_response():
    p = get_problem("drift-only")
    alpha = StepControl.constant(1, 1.0, 2)
    rows = stability_probe(p, 0.0, np.zeros(1), dirac([0.0]), alpha, levels=(1, 2, 4, 8), sim=SimConfig(64, 8))
    assert rows[0]["delta_J"] == 0.0
    for r in rows[1:]:
        # flipping +1 to -1 on width w changes x_T by exactly 2w
        assert r["delta_J"] == pytest.approx(2 * r["width"], abs=1e-12)


def test_value_growth_bound():
    p = get_problem("two-action-toy")
    cat = enumerate_step_controls(p.space, 2, 1)
    h = p.coefficients.growth_h
    for x in (-2.0, 0.0, 1.5):
        for std in (0.1, 1.0):
            pi = GaussianSampler(0.0, std)
            v = value_direct(p, 0.0, np.array([x]), pi, cat, SimConfig(10, 200)).value
            norm = (std**2) ** 0.5
            assert abs(v) <= (1 + p.horizon) * 2 * h(norm) * (1 + abs(x) ** 2)


def test_continuity_shrinking_perturbations():
    p = get_problem("two-action-toy")
    cat = enumerate_step_controls(p.space, 2, 1)
    sim = SimConfig(10, 1000)
    base_pi = empirical_from_samples(np.linspace(-1, 1, 11)[:, None])
    v0 = value_direct(p, 0.0, np.array([0.3]), base_pi, cat, sim).value
    devs = []
    for eps in (0.4, 0.2, 0.1):
        pi = empirical_from_samples(np.linspace(-1, 1, 11)[:, None] + eps)
        devs.append(abs(value_direct(p, 0.0, np.array([0.3 + eps]), pi, cat, sim).value - v0))
    assert devs[0] > devs[1] > devs[2]


def test_argmax_reproducible_and_stable_in_n():
    p = get_problem("two-action-toy")
    cat = enumerate_step_controls(p.space, 2, 1)
    pi = GaussianSampler(0, .5)
    a = value_direct(p, 0.0, np.zeros(1), pi, cat, SimConfig(20, 1000, seed=1))
    b = value_direct(p, 0.0, np.zeros(1), pi, cat, SimConfig(20, 1000, seed=1))
    c = value_direct(p, 0.0, np.zeros(1), pi, cat, SimConfig(20, 2000, seed=1))
    assert a.argmax == b.argmax == c.argmax and a.value == b.value
