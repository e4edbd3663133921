import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbc.tail import (
    NoTStarWithinRange,
    TailBoundModel,
    TBelowTStar,
    find_T_star,
    find_T_tilde,
    matrix_exp,
    sup_envelope,
    tail_bound_at,
    tail_curve,
)

LAM2 = np.array([[0.45, 0.1], [0.1, 0.45]])
M2 = np.array([[0.3, 0.1], [0.1, 0.3]])
L2 = np.array([1.000237, 1.000236])


def test_matrix_exp_basics():
    assert np.array_equal(matrix_exp(np.zeros((3, 3)), 2.0), np.eye(3))
    E = matrix_exp(np.diag([0.5, -2.0]), 1.5)
    assert np.allclose(E, np.diag([math.exp(0.75), math.exp(-3.0)]), rtol=1e-14)
    with pytest.raises(ValueError):
        matrix_exp([[np.inf]])


def test_matrix_exp_inverse_identity():
    rng = np.random.default_rng(7)
    for _ in range(50):
        A = rng.normal(size=(4, 4))
        A *= rng.uniform(0.1, 5.0) / np.linalg.norm(A, 2)
        P = matrix_exp(A) @ matrix_exp(-A)
        assert np.max(np.abs(P - np.eye(4))) <= 1e-10


@settings(max_examples=60, deadline=None, derandomize=True)
@given(arrays(float, (3, 3), elements=st.floats(-3, 3)), st.floats(0, 10))
def test_exp_of_essentially_nonnegative_matrix_is_nonnegative(A, t):
    off = np.abs(A) - np.diag(np.diag(np.abs(A)))
    lam = off + np.diag(np.diag(A))
    E = matrix_exp(lam, t)
    assert np.all(E >= -1e-12)


def test_decay_along_the_oscillator_eigenvector():
    v = np.array([1.0002365, 1.0002365])
    for t in (0.0, 0.5, 2.0, 7.0):
        assert np.allclose(matrix_exp(-LAM2, t) @ v, 1.0002365 * math.exp(-0.55 * t) * np.ones(2), rtol=1e-12)


def test_sup_envelope_examples():
    assert sup_envelope([[1.0]], [1.0]) == pytest.approx([1.0])
    assert sup_envelope(np.diag([0.5, 2.0]), [1.0, 1.0]) == pytest.approx([1.0, 1.0], abs=1e-12)
    # the paper's rounded level (1.000237, 1.000236) is 1.0002365 (1, 1) + 5e-7 (1, -1)
    sup = sup_envelope(LAM2, L2)
    assert np.all(sup <= 1.0002365 + 5e-7 + 1e-12)
    assert sup == pytest.approx(L2, abs=1e-12)
    with pytest.raises(ValueError):
        sup_envelope(LAM2, [1.0, -1.0])


def test_sup_envelope_is_an_upper_bound():
    rng = np.random.default_rng(2)
    for _ in range(10):
        lam = np.abs(rng.normal(size=(3, 3))) * 0.3 + np.diag(rng.uniform(0.4, 1.5, 3))
        if np.min(np.linalg.eigvals(lam).real) <= 0.05:
            continue
        v = rng.uniform(0.5, 2.0, 3)
        sup = sup_envelope(lam, v)
        ts = rng.uniform(0, 60, 1000)
        vals = np.array([matrix_exp(-lam, t) @ v for t in ts])
        assert np.all(vals <= sup + 1e-9)
        assert np.all(sup <= np.maximum(vals.max(axis=0), v) + 1e-3)


def test_T_star_scalar_and_oscillator():
    assert find_T_star([[1.0]], None, [1.0]) == 0.0
    assert find_T_star(LAM2, M2, L2) <= 1.2
    model = TailBoundModel.from_values(LAM2, 0.19946, L2)
    assert np.allclose(model.M, LAM2 / 2)
    assert math.isfinite(model.T_star)


# rotation-like coupling: exp(-Lambda t) l overshoots l for a while
LAM3 = np.array([[1.0, 3.0, 0.0], [0.0, 1.0, 3.0], [0.2, 0.0, 1.0]])


def _dense_ok(lam, M, l, T):
    v = matrix_exp(-(lam - M), T) @ l
    return all(np.all(matrix_exp(-lam, t) @ v <= l + 1e-9) for t in np.linspace(0, 40, 4001))


def test_T_star_positive_case_is_the_smallest():
    M = LAM3 / 2
    l = np.ones(3)
    T = find_T_star(LAM3, M, l)
    assert 0 < T < 100
    assert _dense_ok(LAM3, M, l, T)
    assert not _dense_ok(LAM3, M, l, T - 0.01)
    with pytest.raises(NoTStarWithinRange):
        find_T_star(LAM3, M, l, t_max=T / 2)


def test_split_matrix_is_checked():
    with pytest.raises(ValueError):
        TailBoundModel.from_values(LAM2, 0.2, L2, M=[[0.5, 0.1], [0.1, 0.5]])
    with pytest.raises(ValueError):
        TailBoundModel.from_values(LAM2, 0.2, L2, M=[[0.3, -0.1], [-0.1, 0.3]])


def test_population_closed_form():
    model = TailBoundModel.from_values([[1.0]], 0.12498, [1.0])
    assert tail_bound_at(model, 0.0) == pytest.approx(0.12498, rel=1e-15)
    for T in (0.5, 1.0, 4.0, 8.0):
        assert tail_bound_at(model, T) == pytest.approx(0.12498 * math.exp(-T), rel=1e-14)
    assert find_T_tilde(model, 1e-3) == pytest.approx(math.log(124.98), abs=1e-12)
    assert find_T_tilde(model, 1e-3) == pytest.approx(4.829, abs=1e-3)
    assert find_T_tilde(model, 0.2) == 0.0
    assert find_T_tilde(model, 0.12498) == 0.0


def test_nonlinear_drift_closed_form():
    model = TailBoundModel.from_values([[1.5]], 3.80070, [1.0])
    eps = 3.80070 * math.exp(-9)
    assert tail_bound_at(model, 6.0) == pytest.approx(eps, rel=1e-14)
    assert eps == pytest.approx(4.69e-4, abs=1e-6)
    assert find_T_tilde(model, eps) == pytest.approx(6.0, abs=1e-9)


def test_oscillator_bound_at_one():
    model = TailBoundModel.from_values(LAM2, 0.19946, L2, M=M2)
    # l is (1.0002365, 1.0002365) + 5e-7 (1, -1): the smaller component carries the minus sign
    expect = 0.19946 / (1.0002365 * math.exp(0.4) - 0.0000005 * math.exp(0.2))
    assert tail_bound_at(model, 1.0) == pytest.approx(expect, rel=1e-6)
    assert tail_bound_at(model, 1.0) == pytest.approx(0.133670, abs=2e-6)


@pytest.mark.parametrize("model", [
    TailBoundModel.from_values([[1.0]], 0.3, [1.0]),
    TailBoundModel.from_values(LAM2, 0.2, L2, M=M2),
])
def test_tail_strictly_decreasing(model):
    Ts = np.arange(model.T_star, model.T_star + 20, 0.25)
    vals = [model.raw(T) for T in Ts]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    curve = tail_curve(model, Ts)
    assert [v for _, v in curve] == [min(1.0, v) for v in vals]


def test_T_tilde_meets_epsilon():
    model = TailBoundModel.from_values(LAM2, 0.2, L2, M=M2)
    for eps in (0.1, 1e-3, 1e-6):
        T = find_T_tilde(model, eps)
        assert model.raw(T) <= eps
        assert model.raw(max(model.T_star, T - 2e-4)) > eps or T == model.T_star
    with pytest.raises(ValueError):
        find_T_tilde(model, 0.0)


def test_below_T_star_is_refused():
    model = TailBoundModel.from_values(LAM2, 0.2, L2, M=M2, T_star=1.0)
    with pytest.raises(TBelowTStar):
        model.raw(0.5)
    assert model.raw(1.0) > 0


def test_bound_is_capped_at_one_and_zero_alpha():
    model = TailBoundModel.from_values([[1.0]], 5.0, [1.0])
    assert tail_bound_at(model, 0.0) == 1.0
    assert model.raw(0.0) == 5.0
    assert TailBoundModel.from_values([[1.0]], 0.0, [1.0]).raw(3.0) == 0.0
