import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentprop.carleman import (
    build_E,
    build_E_jk,
    cache_path,
    cached_build_E,
    enumerate_H,
    expected_kron_block,
    load_E,
    sample_A_jk,
    save_E,
)
from momentprop.errors import MomentPropError, SizeLimitError
from momentprop.kron import kron_power, stacked_dim
from momentprop.model import CoefficientModel, Gaussian, Point, Uniform, demo_logistic_model

E_R2 = 0.79 / 3  # E[r^2] for r ~ U(0.3, 0.7)


def two_param_model(seed=7):
    rng = np.random.default_rng(seed)
    n, d = 2, 2
    consts = [rng.normal(size=(n, n**i)) * 0.3 for i in range(d + 1)]
    linear = [{0: rng.normal(size=(n, n**i)) * 0.2, 1: rng.normal(size=(n, n**i)) * 0.2} for i in range(d + 1)]
    return CoefficientModel(n, d, (Uniform(-1.0, 2.0), Gaussian(0.3, 0.5)), consts, linear)


def deterministic_model(n, d, seed):
    rng = np.random.default_rng(seed)
    consts = [rng.normal(size=(n, n**i)) * 0.4 for i in range(d + 1)]
    return CoefficientModel(n, d, (), consts)


def test_H_small_cases():
    assert enumerate_H(0, 0, 2).sequences == ((),)
    assert enumerate_H(2, 2, 2).sequences == ((0, 2), (1, 1), (2, 0))
    assert len(enumerate_H(1, 3, 2)) == 0
    assert len(enumerate_H(0, 1, 2)) == 0


@pytest.mark.parametrize("d_S", [0, 1, 2, 3])
@pytest.mark.parametrize("j", [0, 1, 2, 3, 4])
def test_H_matches_brute_force(j, d_S):
    for k in range(j * d_S + 2):
        brute = sorted(s for s in itertools.product(range(d_S + 1), repeat=j) if sum(s) == k)
        assert list(enumerate_H(j, k, d_S)) == brute


def test_expected_blocks_of_logistic(logistic):
    m = logistic.coeffs
    assert expected_kron_block(m, (1, 1)).item() == pytest.approx(E_R2, rel=1e-14)
    assert expected_kron_block(m, (2,)).item() == pytest.approx(-0.5, rel=1e-14)
    assert build_E_jk(m, 1, 1).item() == pytest.approx(0.5, rel=1e-14)
    assert build_E_jk(m, 1, 2).item() == pytest.approx(-0.5, rel=1e-14)
    assert build_E_jk(m, 2, 2).item() == pytest.approx(E_R2, rel=1e-14)
    assert not build_E_jk(m, 1, 3).any()


def test_deterministic_block_is_plain_kronecker():
    m = deterministic_model(2, 2, 1)
    np.testing.assert_allclose(expected_kron_block(m, (1, 2)), np.kron(m.constants[1], m.constants[2]), rtol=1e-14)


def test_E22_of_logistic(logistic):
    E = build_E(logistic.coeffs, 2, 2).matrix
    ref = np.array([[1, 0, 0], [0, 0.5, -0.5], [0, 0, E_R2]])
    np.testing.assert_allclose(E, ref, rtol=1e-14, atol=1e-15)
    assert build_E(logistic.coeffs, 0, 0).matrix.tolist() == [[1.0]]


def test_vehicle_E88_exceeds_default_limit(vehicle):
    with pytest.raises(SizeLimitError) as err:
        build_E(vehicle.coeffs, 8, 8)
    assert err.value.required == stacked_dim(6, 8) ** 2


@pytest.mark.parametrize("name", ["logistic", "vehicle"])
def test_row_block_zero_is_unit(name, request):
    m = request.getfixturevalue(name).coeffs
    N = 8 if m.n == 1 else 2
    E = build_E(m, N, N + 1).matrix
    expected = np.zeros(E.shape[1])
    expected[0] = 1.0
    np.testing.assert_array_equal(E[0], expected)


@pytest.mark.parametrize("model_name", ["two_param", "vehicle"])
def test_dynamic_programme_matches_explicit_expansion(model_name, vehicle):
    m = two_param_model() if model_name == "two_param" else vehicle.coeffs
    top = 3 if m.n == 6 else 4
    for j in range(top + 1):
        for k in range(j * m.d_S + 1):
            if m.n**j * m.n**k > 2e6:
                continue
            ref = sum(
                (expected_kron_block(m, seq) for seq in enumerate_H(j, k, m.d_S)),
                np.zeros((m.n**j, m.n**k)),
            )
            got = build_E_jk(m, j, k)
            np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-13 * max(1.0, np.abs(ref).max()))


def test_threaded_build_is_bitwise_identical():
    m = two_param_model()
    a = build_E(m, 4, 6, threads=1).matrix
    b = build_E(m, 4, 6, threads=4).matrix
    assert np.array_equal(a, b)


def _lagrange(nodes, x):
    """Columns L_m(x) of the Lagrange basis on ``nodes``."""
    out = np.ones((len(x), len(nodes)))
    for m, xm in enumerate(nodes):
        for q, xq in enumerate(nodes):
            if q != m:
                out[:, m] *= (x - xq) / (xm - xq)
    return out


def mc_check(model, j, k, draws=100_000, seed=0):
    """Compare E_{j,k} with the sample mean of A_{j,k}(w) over parameter draws.

    A_{j,k} is a polynomial of degree <= j in each parameter, so evaluating it at
    j+1 nodes per parameter and interpolating gives the exact value for every draw.
    """
    rng = np.random.default_rng(seed)
    P = model.num_params
    W = np.column_stack([d.ppf(rng.random(draws)) for d in model.params])
    nodes = np.linspace(-1.0, 1.0, j + 1) if j else np.zeros(1)
    grid = list(itertools.product(range(len(nodes)), repeat=P))
    A_nodes = np.stack([sample_A_jk(model, nodes[list(g)], j, k).ravel() for g in grid])
    basis = [_lagrange(nodes, W[:, p]) for p in range(P)]
    Phi = np.column_stack([np.prod([basis[p][:, g[p]] for p in range(P)], axis=0) for g in grid])
    mean = Phi.mean(axis=0) @ A_nodes
    cov = np.cov(Phi, rowvar=False).reshape(len(grid), len(grid))
    var = np.einsum("ke,kl,le->e", A_nodes, cov, A_nodes)
    se = np.sqrt(np.maximum(var, 0.0) / draws)
    E = build_E_jk(model, j, k).ravel()
    scale = max(1.0, np.abs(A_nodes).max())
    return np.abs(E - mean) <= 3 * se + 1e-10 * scale


@pytest.mark.parametrize("jk", [(1, 1), (1, 2), (2, 2), (2, 3), (2, 4), (3, 4), (3, 6)])
def test_E_jk_agrees_with_monte_carlo_logistic(jk):
    assert mc_check(demo_logistic_model().coeffs, *jk).all()


@pytest.mark.parametrize("jk", [(1, 0), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3)])
def test_E_jk_agrees_with_monte_carlo_vehicle(jk, vehicle):
    assert mc_check(vehicle.coeffs, *jk).all()


@pytest.mark.parametrize("jk", [(1, 1), (2, 2), (2, 3)])
def test_E_jk_agrees_with_monte_carlo_two_params(jk):
    assert mc_check(two_param_model(), *jk).all()


def _exact_chain(model, x0, j, t):
    """Iterate the block recursion from level j d^t down to level j."""
    d = model.d_S
    top = j * d**t
    y = np.concatenate([kron_power(x0[:, None], i).ravel() for i in range(top + 1)])
    for s in range(t - 1, -1, -1):
        y = build_E(model, j * d**s, j * d ** (s + 1)).matrix @ y
    return y[stacked_dim(model.n, j - 1):]


@pytest.mark.parametrize(
    "n,d,t_max",
    [(1, 2, 4), (2, 1, 4), (2, 2, 2)],
)
@pytest.mark.parametrize("seed", [0, 1])
def test_deterministic_recursion_matches_simulation(n, d, t_max, seed):
    m = deterministic_model(n, d, seed)
    x0 = np.random.default_rng(seed + 100).uniform(-0.8, 0.8, n)
    traj = [x0]
    for _ in range(t_max):
        x = traj[-1]
        traj.append(sum(m.constants[i] @ kron_power(x[:, None], i).ravel() for i in range(d + 1)))
    for j in (1, 2):
        for t in range(t_max + 1):
            if n**(j * d**t) > 1e5:
                continue
            got = _exact_chain(m, x0, j, t)
            ref = kron_power(traj[t][:, None], j).ravel()
            np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(ref).max()))


def test_cache_round_trip_is_bit_exact(tmp_path):
    m = two_param_model()
    E = build_E(m, 3, 5)
    path = tmp_path / "E.bin"
    save_E(E, path)
    back = load_E(path)
    assert np.array_equal(back.matrix, E.matrix)
    assert (back.N, back.M, back.n, back.model_hash) == (3, 5, 2, m.content_hash())
    assert np.array_equal(back.block(2, 3), E.block(2, 3))


def test_cached_build_reuses_and_repairs(tmp_path, logistic):
    m = logistic.coeffs
    first = cached_build_E(m, 8, 8, cache_dir=tmp_path)
    path = cache_path(tmp_path, m, 8, 8)
    assert path.exists()
    assert np.array_equal(cached_build_E(m, 8, 8, cache_dir=tmp_path).matrix, first.matrix)
    path.write_bytes(b"garbage")
    with pytest.raises(MomentPropError):
        load_E(path)
    assert np.array_equal(cached_build_E(m, 8, 8, cache_dir=tmp_path).matrix, first.matrix)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(0, 6), st.floats(-2, 2))
def test_point_parameters_reduce_to_kronecker_sum(j, k, w):
    m = two_param_model()
    fixed = CoefficientModel(m.n, m.d_S, (Point(w), Point(0.25)), m.constants, m.linear)
    np.testing.assert_allclose(
        build_E_jk(fixed, j, k), sample_A_jk(m, [w, 0.25], j, k), rtol=1e-11, atol=1e-11
    )
