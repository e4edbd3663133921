import numpy as np
import pytest

from sbc.expcert import Infeasible, synthesize_exp, validate_lambda
from sbc.polynomial import Polynomial, monomial_basis, parse_polynomial
from sbc.sde import SemialgebraicSet
from sbc.sos import (
    AffinePoly,
    SosConstraint,
    SosProgram,
    StructurallyInfeasible,
    ValidationFailed,
    check_witness,
    encode_nonneg,
    witness_from_grams,
)

X1 = ("x1",)
X12 = ("x1", "x2")


def test_perfect_square_has_unit_gram():
    prog = SosProgram(X1)
    prog.add_nonneg(parse_polynomial("x1^2", X1), SemialgebraicSet.whole(X1), label="sq")
    res = prog.solve({})
    assert res.ok
    (w,) = res.witnesses
    Q = w.gram_matrices[0]
    assert Q.shape == (2, 2)
    assert Q[1, 1] == pytest.approx(1.0, abs=1e-6)
    assert Q[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert w.relative_residual <= 1e-6


def test_exact_gram_witness_has_zero_residual():
    enc = encode_nonneg(SosConstraint(AffinePoly.lift(parse_polynomial("x1^2", X1)), SemialgebraicSet.whole(X1)))
    w = witness_from_grams(enc, [], [np.array([[0.0, 0.0], [0.0, 1.0]])], [])
    assert w.residual == 0.0
    check_witness(w)


def test_negative_eigenvalue_fails_validation():
    enc = encode_nonneg(SosConstraint(AffinePoly.lift(parse_polynomial("x1^2 - 1e-3", X1)),
                                      SemialgebraicSet.whole(X1)))
    w = witness_from_grams(enc, [], [np.array([[-1e-3, 0.0], [0.0, 1.0]])], [])
    assert w.residual == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValidationFailed) as err:
        check_witness(w, tol_psd=1e-7)
    assert err.value.diagnostics["min_eigenvalue"] == pytest.approx(-1e-3)


def test_minus_one_is_infeasible():
    prog = SosProgram(X1)
    prog.add_nonneg(Polynomial.constant(-1.0, X1), SemialgebraicSet(X1, (parse_polynomial("x1", X1),)),
                    multiplier_degree=2)
    res = prog.solve({})
    assert not res.ok


def test_constant_mismatch_is_structural():
    enc = SosConstraint(AffinePoly.lift(parse_polynomial("x1^3", X1)), SemialgebraicSet.whole(X1), 0)
    # degree 3 target is raised to 4; x1^3 can still be matched by the Gram block
    assert encode_nonneg(enc) is not None
    with pytest.raises(StructurallyInfeasible):
        encode_nonneg(SosConstraint(AffinePoly.lift(parse_polynomial("x1", X1)),
                                    SemialgebraicSet(X1, (parse_polynomial("x1^3", X1),)), 0))


def test_linear_target_on_half_line():
    S = SemialgebraicSet(X1, (parse_polynomial("x1", X1),))
    prog = SosProgram(X1)
    prog.add_nonneg(parse_polynomial("x1", X1), S, multiplier_degree=0)
    res = prog.solve({})
    assert res.ok
    (w,) = res.witnesses
    sigma0, sigma1 = w.multiplier_polys
    assert sigma0.max_abs_coeff() < 1e-6
    assert sigma1.evaluate([0.0]) == pytest.approx(1.0, abs=1e-6)


def test_empty_set_is_vacuous_and_empty_program_is_zero():
    assert encode_nonneg(SosConstraint(AffinePoly.lift(Polynomial.constant(-1.0, X1)),
                                       SemialgebraicSet.nothing(X1))) is None
    res = SosProgram(X1).solve({})
    assert res.ok and res.objective == pytest.approx(0.0)


def test_equality_multiplier():
    # 1 - x1^2 >= 0 on {x1^2 = 1/4}
    S = SemialgebraicSet(X1, (), (parse_polynomial("x1^2 - 1/4", X1),))
    prog = SosProgram(X1)
    prog.add_nonneg(parse_polynomial("1 - x1^2", X1), S, multiplier_degree=2)
    res = prog.solve({})
    assert res.ok and res.max_residual() <= 1e-6


def test_minimise_scalar_lower_bound():
    # max c s.t. x1^2 - 2 x1 + 3 - c SOS -> c = 2
    prog = SosProgram(X1)
    k, c = prog.new_scalar("c")
    prog.add_nonneg(AffinePoly.lift(parse_polynomial("x1^2 - 2*x1 + 3", X1)) - c, SemialgebraicSet.whole(X1))
    res = prog.solve({k: -1.0})
    assert res.values[k] == pytest.approx(2.0, abs=1e-6)


def test_random_sos_roundtrip():
    rng = np.random.default_rng(3)
    basis = monomial_basis(2, 3)
    for _ in range(3):
        target = Polynomial.zero(X12)
        for _ in range(3):
            q = Polynomial({m: float(rng.normal()) for m in basis}, X12)
            target = target + q * q
        prog = SosProgram(X12)
        prog.add_nonneg(target, SemialgebraicSet.whole(X12))
        res = prog.solve({})
        assert res.ok
        assert res.max_residual() <= 1e-6
        assert res.min_eigenvalue() >= -1e-7


def test_assembly_is_deterministic():
    def build():
        prog = SosProgram(X12)
        _, V = prog.template(monomial_basis(2, 4), "V")
        S = SemialgebraicSet(X12, (parse_polynomial("1 - x1^2 - x2^2", X12),))
        prog.add_nonneg(V, S, 4)
        prog.add_nonneg(V - 1.0, SemialgebraicSet(X12, (parse_polynomial("x1 - 0.5", X12),)), 4)
        return prog.assemble({0: 1.0})

    assert build().structure_signature() == build().structure_signature()


def test_population_rejects_large_lambda(population):
    with pytest.raises(Infeasible):
        synthesize_exp(population.problem, validate_lambda([[10.0]]), 4)
