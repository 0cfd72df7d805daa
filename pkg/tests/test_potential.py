import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hagedorn_bohm.errors import ContractViolation
from hagedorn_bohm.potential import PotentialModel, check_GV, eval_derivatives, taylor_remainder

from oracles import cosine_remainder_m3, cosine_remainder_series

FAMILIES = [("harmonic", ()), ("cosine", (0.7, 1.3)), ("gaussian_well", (1.2, 0.8)), ("free", ())]


def test_harmonic_closed_form():
    V = PotentialModel("harmonic", 3)
    x = np.array([1.0, 0.0, 0.0])
    assert V(x) == 0.5
    assert np.array_equal(eval_derivatives(V, x, 1), [1.0, 0.0, 0.0])
    assert np.array_equal(eval_derivatives(V, x, 2), np.eye(3))


def test_free_is_zero():
    V = PotentialModel("free", 2)
    x = np.array([0.3, -2.0])
    for n in range(5):
        assert np.all(eval_derivatives(V, x, n) == 0)


def test_cosine_at_extremum():
    for d in (1, 2, 3):
        V = PotentialModel("cosine", d)
        x = np.zeros(d)
        assert V(x) == d
        assert np.allclose(eval_derivatives(V, x, 1), 0)
        assert np.allclose(eval_derivatives(V, x, 2), -np.eye(d))


def test_order_out_of_range():
    V = PotentialModel("cosine", 1)
    with pytest.raises(ContractViolation):
        V.derivative(np.zeros(1), 5)
    with pytest.raises(ContractViolation):
        V.derivative(np.array([np.nan]), 1)


def test_remainder_m1_and_quadratic():
    rng = np.random.default_rng(0)
    x, a = rng.normal(size=(2, 10, 2))
    V = PotentialModel("gaussian_well", 2)
    assert np.allclose(taylor_remainder(V, x, a, 1), V(x) - V(a), atol=1e-15)
    H = PotentialModel("harmonic", 2, (1.0, 2.5))
    assert np.max(np.abs(taylor_remainder(H, x, a, 3))) < 1e-14


def test_cosine_remainder_high_precision():
    V = PotentialModel("cosine", 1)
    got = taylor_remainder(V, np.array([0.1]), np.array([0.0]), 3)
    ref = cosine_remainder_series(0.1)
    assert abs(got - ref) < 1e-12
    assert abs(cosine_remainder_m3(0.1) - ref) < 1e-30 + 1e-15 * abs(ref)
    # off an extremum the third-order term survives
    got = taylor_remainder(V, np.array([0.8]), np.array([0.5]), 3)
    assert abs(got - cosine_remainder_m3(0.8, 0.5)) < 1e-12


def _taylor_poly(V, x, a, m):
    h = x - a
    total = 0.0
    for n in range(m):
        D = V.derivative(a, n)
        term = D
        for _ in range(n):
            term = term @ h
        total = total + term / math.factorial(n)
    return total


@settings(max_examples=60, deadline=None)
@given(fam=st.sampled_from(FAMILIES), d=st.integers(1, 3), m=st.integers(1, 4),
       seed=st.integers(0, 2**31 - 1))
def test_remainder_reconstructs_V(fam, d, m, seed):
    rng = np.random.default_rng(seed)
    V = PotentialModel(fam[0], d, fam[1])
    x, a = rng.uniform(-2, 2, size=(2, d))
    assert abs(taylor_remainder(V, x, a, m) + _taylor_poly(V, x, a, m) - V(x)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(fam=st.sampled_from(FAMILIES), d=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_gradient_matches_finite_differences(fam, d, seed):
    rng = np.random.default_rng(seed)
    V = PotentialModel(fam[0], d, fam[1])
    x = rng.uniform(-2, 2, size=d)
    h = 1e-5
    fd = np.array([(V(x + h * e) - V(x - h * e)) / (2 * h) for e in np.eye(d)])
    g = V.derivative(x, 1)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.max(np.abs(g))))


@settings(max_examples=40, deadline=None)
@given(fam=st.sampled_from(FAMILIES), d=st.integers(1, 3), m=st.integers(2, 4),
       seed=st.integers(0, 2**31 - 1))
def test_derivative_of_remainder(fam, d, m, seed):
    """D^alpha V_m = (D^alpha V)_{m-|alpha|}, checked against a finite-difference D^alpha of V_m."""
    rng = np.random.default_rng(seed)
    V = PotentialModel(fam[0], d, fam[1])
    x, a = rng.uniform(-1.5, 1.5, size=(2, d))
    j = int(rng.integers(d))
    alpha = [0] * d
    alpha[j] = 1
    e = np.eye(d)[j]
    h = 1e-5
    fd = (taylor_remainder(V, x + h * e, a, m) - taylor_remainder(V, x - h * e, a, m)) / (2 * h)
    assert abs(taylor_remainder(V, x, a, m, alpha) - fd) < 1e-8
    # second derivatives: compare against the tensor identity directly
    alpha2 = list(alpha)
    alpha2[j] = 2
    expect = V.derivative(x, 2)[j, j] - sum(_partial(V, a, x, j, n) for n in range(2, m))
    assert abs(taylor_remainder(V, x, a, m, alpha2) - expect) < 1e-10


def _partial(V, a, x, j, n):
    # (1/(n-2)!) D^n V(a)[e_j, e_j, h, ..., h]
    T = V.derivative(a, n)[j, j]
    h = x - a
    for _ in range(n - 2):
        T = T @ h
    return T / math.factorial(n - 2)


def test_check_GV():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = check_GV(PotentialModel("cosine", 1), (-10, 10), grid=2001)
    assert rep.passed and max(rep.max_abs) <= 1.0
    with pytest.warns(UserWarning):
        rep = check_GV(PotentialModel("harmonic", 1), (-10, 10), grid=2001)
    assert not rep.passed and abs(rep.max_abs[1] - 10.0) < 1e-12 and rep.C_V == 1.0
    rep = check_GV(PotentialModel("free", 2), (-1, 1), grid=11)
    assert rep.passed and max(rep.max_abs) == 0
    rep = check_GV(PotentialModel("gaussian_well", 2, (1.0, 0.7)), (-4, 4), grid=81)
    assert rep.passed
    with pytest.raises(ContractViolation):
        check_GV(PotentialModel("free", 1), (1, -1))


def test_sum_potential():
    V = PotentialModel.create("cosine+gaussian_well", 2, [(1.0, 1.0), (0.5, 2.0)])
    x = np.array([0.3, -0.4])
    parts = PotentialModel("cosine", 2, (1.0, 1.0)), PotentialModel("gaussian_well", 2, (0.5, 2.0))
    for n in range(5):
        assert np.allclose(V.derivative(x, n), sum(p.derivative(x, n) for p in parts))
    assert V.bounded and V.C_V == pytest.approx(sum(p.C_V for p in parts))
