import io
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from momentprop.errors import PreconditionError
from momentprop.oracles import empirical_tail
from momentprop.propagation import build_propagator, initial_state_for, propagate
from momentprop.tail import (
    clamp_probability,
    safety_bound,
    safety_inputs,
    safety_radius,
    tail_numerator,
    write_tail_rows,
)

nonneg = st.floats(0, 2, allow_nan=False)


def test_plain_chebyshev():
    assert safety_bound([0.0], [1.0], 0.0, [0.0], [0.0], 2.0) == 0.25


def test_hand_evaluated_example():
    got = safety_bound([0.5], [0.26], 0.05, [0.02], [0.01], 0.5)
    assert got == pytest.approx((0.27 - 0.48**2) / 0.45**2, rel=1e-14)
    assert got == pytest.approx(0.1956, abs=1e-4)


def test_radius_inside_error_ball_is_rejected():
    with pytest.raises(PreconditionError):
        safety_bound([0.0], [1.0], 0.3, [0.0], [0.0], 0.3)


def test_radius_examples():
    assert safety_radius([0.0], [1.0], 0.0, [0.0], [0.0], 0.05) == pytest.approx(math.sqrt(20), rel=1e-15)
    assert safety_radius([1.0], [1.0], 0.2, [0.0], [0.0], 1.0) == 0.2


def test_negative_numerator_clamps_to_eps():
    # inconsistent inputs (x2 < x1^2) give a negative variance surrogate
    assert safety_radius([1.0], [0.5], 0.1, [0.0], [0.0], 0.05) == 0.1


def test_p_max_range():
    with pytest.raises(PreconditionError):
        safety_radius([0.0], [1.0], 0.0, [0.0], [0.0], 0.0)
    with pytest.raises(PreconditionError):
        safety_radius([0.0], [1.0], 0.0, [0.0], [0.0], 1.5)


def test_clamp():
    assert clamp_probability(3.0) == 1.0 and clamp_probability(-0.1) == 0.0 and clamp_probability(0.3) == 0.3


@st.composite
def tail_inputs(draw, n=None):
    n = n or draw(st.integers(1, 4))
    x1 = np.array(draw(st.lists(st.floats(-3, 3), min_size=n, max_size=n)))
    var = np.array(draw(st.lists(st.floats(0, 2), min_size=n, max_size=n)))
    eps_i = np.array(draw(st.lists(nonneg, min_size=n, max_size=n))) * 0.1
    eps_ii = np.array(draw(st.lists(nonneg, min_size=n, max_size=n))) * 0.1
    eps = draw(nonneg) * 0.1
    return x1, x1**2 + var, eps, eps_i, eps_ii


@settings(max_examples=200, deadline=None)
@given(tail_inputs(), st.floats(1e-4, 1.0))
def test_radius_round_trip(inputs, p):
    x1, x2, eps, eps_i, eps_ii = inputs
    alpha = safety_radius(x1, x2, eps, eps_i, eps_ii, p)
    assume(alpha > eps)
    assert safety_bound(x1, x2, eps, eps_i, eps_ii, alpha) <= p * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(tail_inputs(), st.floats(0.01, 5))
def test_zero_error_is_standard_chebyshev(inputs, alpha):
    x1, x2, *_ = inputs
    n = len(x1)
    z = np.zeros(n)
    expected = math.fsum(x2 - x1**2) / alpha**2
    assert safety_bound(x1, x2, 0.0, z, z, alpha) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(tail_inputs(), st.floats(0.3, 5), st.floats(0.01, 3))
def test_monotone_in_alpha(inputs, alpha, extra):
    x1, x2, eps, eps_i, eps_ii = inputs
    a = safety_bound(x1, x2, eps, eps_i, eps_ii, alpha)
    b = safety_bound(x1, x2, eps, eps_i, eps_ii, alpha + extra)
    assert b <= a


@settings(max_examples=100, deadline=None)
@given(tail_inputs(), st.integers(0, 2), st.floats(0.0, 0.05))
def test_monotone_in_error_inputs(inputs, which, bump):
    x1, x2, eps, eps_i, eps_ii = inputs
    # the formula is monotone in eps_i only while |x1_i| >= eps_i
    assume(np.all(np.abs(x1) >= eps_i + bump))
    alpha = eps + bump + 1.0
    base = safety_bound(x1, x2, eps, eps_i, eps_ii, alpha)
    if which == 0:
        moved = safety_bound(x1, x2, eps + bump, eps_i, eps_ii, alpha)
    elif which == 1:
        moved = safety_bound(x1, x2, eps, eps_i + bump, eps_ii, alpha)
    else:
        moved = safety_bound(x1, x2, eps, eps_i, eps_ii + bump, alpha)
    assert moved >= base * (1 - 1e-12)


def test_empirical_validity_at_t3(logistic):
    p = build_propagator(logistic.coeffs, 16)
    state = propagate(p, initial_state_for(p, logistic.init), 3)[-1]
    si = safety_inputs(logistic, state, 18)
    alpha = safety_radius(si.x1, si.x2_diag, si.eps, si.eps_i, si.eps_ii, 0.05)
    bound = safety_bound(si.x1, si.x2_diag, si.eps, si.eps_i, si.eps_ii, alpha)
    est = empirical_tail(logistic, si.x1, alpha, 3, 10_000, seed=0)
    assert est.frequency <= bound + 3 * est.se
    assert est.frequency <= 0.05 + 3 * est.se


def test_vehicle_inputs_are_exact_for_one_step(vehicle):
    p = build_propagator(vehicle.coeffs, 3)
    state = propagate(p, initial_state_for(p, vehicle.init), 1)[-1]
    si = safety_inputs(vehicle, state, 6)
    # j0 d_S^t = 3 <= N_T for the mean, but 6 > 3 for second moments
    assert si.eps == 0.0 and not si.eps_i.any()
    assert np.all(si.eps_ii >= 0)
    assert tail_numerator(si.x1, si.x2_diag, si.eps_i, si.eps_ii) > 0


def test_tail_rows_format():
    buf = io.StringIO()
    write_tail_rows([[0, 0.5, 0.05, 0.05, 0.0, 0.01, "ok"]], buf, ["status"])
    assert buf.getvalue().splitlines() == ["t,alpha,bound_raw,bound_clamped,eps,numerator,status", "0,0.5,0.050000000000000003,0.050000000000000003,0,0.01,ok"]
