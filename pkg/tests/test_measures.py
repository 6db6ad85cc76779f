import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvctl.errors import CapacityError, DegenerateInput, DimensionError
from mkvctl.measures import (EmpiricalMeasure, dirac, empirical_from_samples, moment_norm, subsample,
                             wasserstein2)


def test_uniform_weights_preserve_order():
    mu = empirical_from_samples([(1, 0), (0, 1)])
    np.testing.assert_array_equal(mu.points, [[1, 0], [0, 1]])
    np.testing.assert_allclose(mu.weights, [0.5, 0.5])


def test_single_sample_is_dirac():
    mu = empirical_from_samples([[3.0]])
    assert mu.points.shape == (1, 1) and mu.weights[0] == 1.0


@pytest.mark.parametrize("bad", [[], [[np.nan]], [[1.0], [np.inf]]])
def test_degenerate_samples_rejected(bad):
    with pytest.raises(DegenerateInput):
        empirical_from_samples(bad)


def test_weights_must_sum_to_one():
    with pytest.raises(DegenerateInput):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([0.5, 0.4]))


def test_w2_simple_cases():
    mu = empirical_from_samples([[0.0], [2.0]])
    assert wasserstein2(mu, mu) == 0.0
    assert wasserstein2(dirac([1.5]), dirac([-0.5])) == pytest.approx(2.0, abs=1e-12)
    assert wasserstein2(mu, dirac([1.0])) == pytest.approx(1.0, abs=1e-12)


def test_w2_dimension_mismatch():
    with pytest.raises(DimensionError):
        wasserstein2(dirac([0.0]), dirac([0.0, 0.0]))


def test_w2_capacity():
    rng = np.random.default_rng(0)
    a = empirical_from_samples(rng.normal(size=(40, 2)))
    b = empirical_from_samples(rng.normal(size=(40, 2)))
    with pytest.raises(CapacityError):
        wasserstein2(a, b, cap=1000)
    small = wasserstein2(subsample(a, 10, rng), subsample(b, 10, rng))
    assert small >= 0


def test_moment_norm_cases():
    assert moment_norm(dirac([0.0])) == 0.0
    assert moment_norm(empirical_from_samples([[-1.0], [1.0]])) == pytest.approx(1.0)
    assert moment_norm(empirical_from_samples([[0.0], [2.0]])) == pytest.approx(math.sqrt(2))


def test_moment_norm_is_distance_to_origin():
    rng = np.random.default_rng(3)
    for dim in (1, 3):
        mu = empirical_from_samples(rng.normal(size=(7, dim)))
        assert moment_norm(mu) == pytest.approx(wasserstein2(mu, dirac(np.zeros(dim))), abs=1e-9)


def test_1d_unequal_counts_against_lp():
    rng = np.random.default_rng(5)
    a = EmpiricalMeasure(rng.normal(size=(5, 1)), rng.dirichlet(np.ones(5)))
    b = EmpiricalMeasure(rng.normal(size=(8, 1)), rng.dirichlet(np.ones(8)))
    assert wasserstein2(a, b) == pytest.approx(wasserstein2(a, b, method="lp"), abs=1e-9)


def test_json_and_csv_round_trip():
    mu = EmpiricalMeasure(np.array([[0.1, 2.0], [-1.0, 3.5]]), np.array([0.25, 0.75]))
    back = EmpiricalMeasure.from_json(mu.to_json())
    np.testing.assert_array_equal(back.points, mu.points)
    assert set(json.loads(mu.to_json())) == {"points", "weights"}
    back = EmpiricalMeasure.from_csv(mu.to_csv())
    np.testing.assert_array_equal(back.weights, mu.weights)


_atoms = st.integers(1, 6)


@st.composite
def measures(draw, dim):
    k = draw(_atoms)
    pts = draw(st.lists(st.lists(st.floats(-5, 5), min_size=dim, max_size=dim), min_size=k, max_size=k))
    raw = draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
    w = np.asarray(raw) / sum(raw)
    return EmpiricalMeasure(np.asarray(pts, dtype=float), w)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_w2_axioms_random(data):
    dim = data.draw(st.sampled_from([1, 2]))
    a, b, c = (data.draw(measures(dim)) for _ in range(3))
    assert wasserstein2(a, a) == pytest.approx(0.0, abs=1e-7)
    assert wasserstein2(a, b) == wasserstein2(b, a) or abs(wasserstein2(a, b) - wasserstein2(b, a)) < 1e-12
    assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-9
