import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentprop.initial import (
    expand,
    kron_moment,
    mixed_moment,
    moment_norm,
    moment_norm_table,
    multiplicity,
    multisets,
    source_expectation,
)
from momentprop.model import (
    Add,
    Const,
    Gaussian,
    InitialStateModel,
    Mul,
    Point,
    Pow,
    Source,
    TruncatedGaussian,
    Uniform,
    raw_moment,
)
from momentprop.oracles import batch_kron_power, draw_initial


def test_order_zero_is_one(logistic, vehicle):
    assert kron_moment(logistic.init, 0).tolist() == [1.0]
    assert kron_moment(vehicle.init, 0).tolist() == [1.0]


def test_symmetric_truncated_gaussian(logistic):
    assert kron_moment(logistic.init, 1).item() == pytest.approx(0.5, abs=1e-12)
    second = kron_moment(logistic.init, 2).item()
    assert second == pytest.approx(0.26, abs=1e-5)
    assert 0.25 < second < 0.26


def test_point_norm_table():
    init = InitialStateModel.independent([Point(2.0)])
    np.testing.assert_allclose(moment_norm_table(init, 3), [1, 2, 4, 8])


def test_deterministic_unit_ball_gives_xi_one():
    x0 = np.array([0.3, -0.5])
    init = InitialStateModel.independent([Point(v) for v in x0])
    table = moment_norm_table(init, 6)
    np.testing.assert_allclose(table, np.linalg.norm(x0) ** np.arange(7), rtol=1e-13)
    assert table.max() == 1.0


def test_scalar_on_unit_interval_is_non_increasing(logistic):
    table = moment_norm_table(logistic.init, 32)
    assert table[0] == 1.0 and table.max() == 1.0
    assert np.all(np.diff(table) <= 0)


def test_independent_components_factor():
    u, v = Uniform(0.1, 0.9), Gaussian(0.3, 0.2)
    init = InitialStateModel.independent([u, v])
    m2 = kron_moment(init, 2)
    assert m2[1] == pytest.approx(raw_moment(u, 1) * raw_moment(v, 1), rel=1e-14)
    assert m2[1] == m2[2]


@pytest.mark.parametrize("j", range(1, 9))
def test_bare_source_diagonal_is_raw_moment(j):
    dists = [Uniform(0.3, 0.7), TruncatedGaussian(0.5, 0.1, 0, 1), Gaussian(0.1, 0.3)]
    init = InitialStateModel.independent(dists)
    m = kron_moment(init, j)
    for c, d in enumerate(dists):
        pos = sum(c * 3**e for e in range(j))
        assert m[pos] == pytest.approx(raw_moment(d, j), rel=1e-10, abs=1e-14)


def test_trig_expectation_closed_form():
    # E[cos(s + b)] = exp(-sigma^2 / 2) cos(b) for s ~ N(0, sigma^2)
    g = Gaussian(0.0, 0.1)
    b = math.pi / 8
    assert source_expectation(g, 0, (("cos", 1.0, b),)) == pytest.approx(math.exp(-0.005) * math.cos(b), rel=1e-12)
    # E[s sin(s)] = sigma^2 exp(-sigma^2 / 2)
    assert source_expectation(g, 1, (("sin", 1.0, 0.0),)) == pytest.approx(0.01 * math.exp(-0.005), rel=1e-12)
    # E[cos^2 + sin^2] = 1
    both = source_expectation(g, 0, (("cos", 1.0, b), ("cos", 1.0, b))) + source_expectation(
        g, 0, (("sin", 1.0, b), ("sin", 1.0, b))
    )
    assert both == pytest.approx(1.0, abs=1e-13)


def test_expand_separates_products():
    expr = Mul((Add((Const(2.0), Source(0))), Pow(Source(1), 2)))
    terms = expand(expr)
    assert terms == {((1, 2, ()),): 2.0, ((0, 1, ()), (1, 2, ())): 1.0}


def test_multiplicities_cover_all_positions():
    for n, j in [(1, 5), (2, 4), (3, 3), (6, 2)]:
        assert sum(multiplicity(a) for a in multisets(n, j)) == n**j


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 4), st.integers(0, 10**6))
def test_moment_norm_matches_dense_vector(n, j, seed):
    rng = np.random.default_rng(seed)
    init = InitialStateModel.independent([Uniform(*sorted(rng.uniform(-1, 1, 2) + [0, 0.1])) for _ in range(n)])
    assert moment_norm(init, j) == pytest.approx(np.linalg.norm(kron_moment(init, j)), rel=1e-12)


@pytest.mark.parametrize("name", ["logistic", "vehicle"])
@pytest.mark.parametrize("j", [1, 2, 3, 4])
def test_agrees_with_sampling(name, j, request):
    spec = request.getfixturevalue(name)
    X = draw_initial(spec, 100_000, seed=0)
    powers = batch_kron_power(X, j)
    mean = powers.mean(axis=0)
    se = powers.std(axis=0, ddof=1) / math.sqrt(len(X))
    exact = kron_moment(spec.init, j)
    assert np.all(np.abs(exact - mean) <= 4 * se + 1e-12)


def test_vehicle_heading_features_are_consistent(vehicle):
    # c^2 + s^2 = 1 holds for every draw, so E[c^2] + E[s^2] = 1
    c2 = mixed_moment(vehicle.init, (0, 0, 0, 0, 2, 0))
    s2 = mixed_moment(vehicle.init, (0, 0, 0, 0, 0, 2))
    assert c2 + s2 == pytest.approx(1.0, abs=1e-13)


def test_shared_source_is_not_treated_as_independent():
    init = InitialStateModel((Uniform(0, 1),), (Source(0), Source(0)))
    assert mixed_moment(init, (1, 1)) == pytest.approx(1 / 3, rel=1e-14)
