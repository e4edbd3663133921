from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbc.polynomial import (
    Polynomial,
    PolyMatrix,
    PolynomialSyntaxError,
    PolyVector,
    VariableMismatch,
    monomial_basis,
    parse_polynomial,
)

X1 = ("x1",)
X12 = ("x1", "x2")


def P(text, ctx=X12, exact=False):
    return parse_polynomial(text, ctx, exact=exact)


def test_difference_of_squares():
    x = Polynomial.var("x1", X1)
    assert (x + 1) * (x - 1) == P("x1^2 - 1", X1)


def test_additive_identity_and_scaling():
    p = P("3*x1*x2 - x2^2 + 7")
    assert p + Polynomial.zero(X12) == p
    assert P("2*x1*x2").scale(0.5) == P("x1*x2")


def test_no_zero_terms_stored():
    x = Polynomial.var(0, X1)
    assert len(x - x) == 0
    assert (x - x).degree() == -1


def test_context_mismatch():
    with pytest.raises(VariableMismatch):
        Polynomial.var(0, X1) + Polynomial.var(0, X12)


def test_derivatives():
    assert P("x1^2", X1).differentiate("x1") == P("2*x1", X1)
    assert Polynomial.constant(5, X1).differentiate(0).is_zero()
    assert P("x1^3*x2").differentiate("x2") == P("x1^3")
    with pytest.raises((KeyError, ValueError, IndexError)):
        P("x1").differentiate("x9")


def test_evaluate():
    assert P("x1^2 - 1", X1).evaluate([2.0]) == 3.0
    p = P("4*x1^3 - x1*x2 + 2.5")
    assert p.evaluate([0.0, 0.0]) == 2.5
    assert P("0.125023372121222*x1^2", X1).evaluate([2.0]) == pytest.approx(0.500093488484888, rel=1e-14)
    with pytest.raises(ValueError):
        p.evaluate([1.0])


def test_evaluate_many_matches_pointwise():
    p = P("x1^3*x2 - 2*x2^2 + x1 - 0.5")
    pts = np.random.default_rng(1).normal(size=(20, 2))
    np.testing.assert_allclose(p.evaluate_many(pts), [p.evaluate(q) for q in pts], rtol=1e-13)


def test_monomial_basis_examples():
    assert monomial_basis(1, 2) == [(0,), (1,), (2,)]
    assert monomial_basis(2, 1) == [(0, 0), (1, 0), (0, 1)]
    assert len(monomial_basis(2, 4)) == 15


@pytest.mark.parametrize("n", range(1, 7))
def test_monomial_basis_counts(n):
    for d in range(0, 11):
        assert len(monomial_basis(n, d)) == comb(n + d, d)


def test_parse_syntax():
    assert P("-0.5*x1^3 + x2") == P("x2 -   0.5 * x1 ^ 3")
    assert P("(x1 + 1)^2") == P("x1^2 + 2*x1 + 1")
    assert P("sqrt(2)/2*x1", X1).coefficients()[(1,)] == pytest.approx(2 ** 0.5 / 2)
    with pytest.raises(PolynomialSyntaxError) as err:
        P("x1 + * x2")
    assert err.value.column is not None
    with pytest.raises(PolynomialSyntaxError):
        P("x3 + 1")


def test_shift_and_scale_variable():
    p = P("x1^3*x2 + 2*x1 - x2^2")
    q = p.shift_variable(0, 1.5).scale_variable(1, 2.0)
    assert q.evaluate([0.5, 0.25]) == pytest.approx(p.evaluate([2.0, 0.5]))


def test_vector_and_matrix_shapes():
    v = PolyVector([P("x1"), P("x2")])
    assert v.shape == (2,)
    M = PolyMatrix([[P("x1"), P("0")], [P("1"), P("x2")]])
    assert M.shape == (2, 2)
    np.testing.assert_allclose((M @ M.transpose()).evaluate([2.0, 3.0]), [[4, 2], [2, 10]])
    with pytest.raises(ValueError):
        PolyMatrix([[P("x1")], [P("x1"), P("x2")]])


# randomized properties --------------------------------------------------------

coef = st.integers(-10, 10).map(Fraction)


@st.composite
def polys(draw, max_deg=3, exact=True):
    basis = monomial_basis(2, max_deg)
    cs = draw(st.lists(coef if exact else st.floats(-10, 10), min_size=len(basis), max_size=len(basis)))
    return Polynomial(dict(zip(basis, cs)), X12)


@settings(max_examples=60, deadline=None, derandomize=True)
@given(polys(), polys(), polys())
def test_ring_axioms_exact(p, q, r):
    assert (p + q) + r == p + (q + r)
    assert (p * q) * r == p * (q * r)
    assert p * (q + r) == p * q + p * r
    assert p + q == q + p
    assert p * q == q * p


@settings(max_examples=60, deadline=None, derandomize=True)
@given(polys(exact=False), polys(exact=False), polys(exact=False))
def test_ring_axioms_float(p, q, r):
    pts = np.random.default_rng(0).uniform(-1, 1, size=(8, 2))
    a = ((p * q) * r).evaluate_many(pts)
    b = (p * (q * r)).evaluate_many(pts)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * (1 + np.max(np.abs(a))))
    a = (p * (q + r)).evaluate_many(pts)
    b = (p * q + p * r).evaluate_many(pts)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * (1 + np.max(np.abs(a))))


@settings(max_examples=60, deadline=None, derandomize=True)
@given(polys(), polys(), st.sampled_from([0, 1]))
def test_leibniz_rule(p, q, i):
    assert (p * q).differentiate(i) == p.differentiate(i) * q + p * q.differentiate(i)


@settings(max_examples=40, deadline=None, derandomize=True)
@given(polys(max_deg=6, exact=False), st.sampled_from([0, 1]),
       st.tuples(st.floats(-1, 1), st.floats(-1, 1)))
def test_derivative_matches_finite_difference(p, i, x):
    h = 1e-4
    x = np.array(x)
    e = np.zeros(2)
    e[i] = h
    fd = (p.evaluate(x + e) - p.evaluate(x - e)) / (2 * h)
    exact = p.differentiate(i).evaluate(x)
    scale = p.abs_evaluate(np.abs(x) + h) + 1.0
    assert abs(fd - exact) <= 1e-6 * scale
