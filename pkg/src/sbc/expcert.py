"""Exponential stochastic barrier certificates.

A vector polynomial V with V >= 0 and AV <= -Lambda V on X, Lambda V <= 0 on
the boundary of X, V >= 1 on Xu and V <= alpha on X0 makes exp(Lambda t) V
a supermartingale of the stopped process.  That yields the exponentially
decaying tail bound in :mod:`sbc.tail`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .polynomial import Polynomial, PolyVector, monomial_basis
from .sde import SafetyProblem, SemialgebraicSet, generator_apply
from .sdp import SolverSettings, Status
from .sos import AffinePoly, SosProgram, SosWitness, ValidationFailed

log = logging.getLogger(__name__)

EIG_TOL = 1e-10


class NotEssentiallyNonneg(ValueError):
    pass


class NonPositiveSpectrum(ValueError):
    pass


class Infeasible(RuntimeError):
    def __init__(self, message: str, status: Status = Status.INFEASIBLE, attempts=()):
        super().__init__(message)
        self.status = status
        self.attempts = list(attempts)


class SamplingViolation(AssertionError):
    def __init__(self, message: str, report: "SamplingReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LambdaSpec:
    matrix: np.ndarray

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.matrix)

    @property
    def nonnegative(self) -> bool:
        return bool(np.all(self.matrix >= 0))

    def scaled(self, c: float) -> "LambdaSpec":
        return LambdaSpec(self.matrix * c)

    def tolist(self) -> list:
        return self.matrix.tolist()


def validate_lambda(matrix) -> LambdaSpec:
    """Check essential non-negativity and a spectrum in the open right half-plane."""
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"Lambda must be square, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("Lambda has non-finite entries")
    off = mat - np.diag(np.diag(mat))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise NotEssentiallyNonneg(f"off-diagonal entry ({i}, {j}) = {mat[i, j]} is negative")
    eig = np.linalg.eigvals(mat)
    if np.min(eig.real) <= EIG_TOL:
        raise NonPositiveSpectrum(f"eigenvalue with real part {np.min(eig.real):.3g} <= 0")
    mat = mat.copy()
    mat.setflags(write=False)
    return LambdaSpec(mat)


@dataclass(frozen=True)
class ExpCertificate:
    """Normalised certificate: every component of V is >= l_i >= 1 on Xu.

    ``scale`` is the factor applied to the raw SDP solution and ``l_raw`` the
    certified unsafe level before rescaling.
    """

    lam: LambdaSpec
    V: PolyVector
    alpha: float
    l: np.ndarray
    degree: int
    witnesses: tuple = ()
    l_raw: Optional[np.ndarray] = None
    scale: float = 1.0
    g: Optional[Polynomial] = None
    status: str = ""

    @property
    def m(self) -> int:
        return self.lam.m

    @property
    def ratio(self) -> float:
        """alpha / min(l), the scalar tail constant."""
        return self.alpha / float(np.min(self.l))

    def scaled(self, c: float) -> "ExpCertificate":
        if c <= 0:
            raise ValueError("scale factor must be positive")
        return replace(self, V=self.V.scale(c), alpha=self.alpha * c, l=self.l * c, scale=self.scale * c)

    def max_residual(self) -> float:
        return max((w.relative_residual for w in self.witnesses), default=0.0)

    def min_eigenvalue(self) -> float:
        return min((w.min_eigenvalue for w in self.witnesses), default=0.0)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam.tolist(),
            "degree": self.degree,
            "alpha": repr(float(self.alpha)),
            "l": [repr(float(v)) for v in self.l],
            "l_raw": [repr(float(v)) for v in self.l_raw] if self.l_raw is not None else None,
            "scale": repr(float(self.scale)),
            "variables": list(self.V.variables),
            "V": [poly_to_terms(p) for p in self.V],
            "max_residual": self.max_residual(),
            "min_gram_eigenvalue": self.min_eigenvalue(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpCertificate":
        variables = tuple(d["variables"])
        V = PolyVector(poly_from_terms(t, variables) for t in d["V"])
        l_raw = d.get("l_raw")
        return cls(validate_lambda(d["lambda"]), V, float(d["alpha"]),
                   np.array([float(v) for v in d["l"]]), int(d["degree"]),
                   l_raw=np.array([float(v) for v in l_raw]) if l_raw else None,
                   scale=float(d.get("scale", 1.0)))


def poly_to_terms(p: Polynomial) -> list:
    return [[list(m), repr(float(c))] for m, c in p.terms()]


def poly_from_terms(terms, variables) -> Polynomial:
    return Polynomial({tuple(m): float(c) for m, c in terms}, variables)


def boundary_multiplier(problem: SafetyProblem) -> Optional[Polynomial]:
    """Product of boundary equalities, vanishing on every boundary piece."""
    if not problem.boundary:
        return None
    g = Polynomial.constant(1.0, problem.variables)
    for piece in problem.boundary:
        if piece.empty:
            continue
        if len(piece.equalities) != 1:
            return None
        g = g * piece.equalities[0].to_float()
    return g if g.degree() > 0 else None


def synthesize_exp(problem: SafetyProblem, lam: LambdaSpec, degree: int,
                   settings: SolverSettings | None = None, multiplier_degree: int | None = None,
                   boundary_trick: bool = True, refine_level: bool = True,
                   rescale: bool = True) -> ExpCertificate:
    """Minimise alpha subject to the exponential barrier conditions.

    With ``rescale`` the SDP is posed in coordinates normalised by the
    sampling box and the certificate is mapped back afterwards.
    """
    if not rescale:
        return _synthesize_exp(problem, lam, degree, settings, multiplier_degree, boundary_trick, refine_level)
    factors = problem.natural_scale()
    cert = _synthesize_exp(problem.rescaled(factors), lam, degree, settings, multiplier_degree,
                           boundary_trick, refine_level)
    back = lambda p: unscale(p, factors)
    return replace(cert, V=cert.V.map(back), g=back(cert.g) if cert.g is not None else None)


def unscale(p: Polynomial, factors) -> Polynomial:
    """Map a polynomial in y (x = diag(factors) y) back to x."""
    for i, f in enumerate(factors):
        if f != 1.0:
            p = p.scale_variable(i, 1.0 / float(f))
    return p


def _synthesize_exp(problem: SafetyProblem, lam: LambdaSpec, degree: int,
                    settings: SolverSettings | None, multiplier_degree: int | None,
                    boundary_trick: bool, refine_level: bool) -> ExpCertificate:
    if degree < 2:
        raise ValueError("certificate degree must be >= 2")
    ctx = problem.variables
    m = lam.m
    Lam = lam.matrix
    if problem.unsafe_in_domain().empty:
        zero = PolyVector([Polynomial.zero(ctx)] * m)
        return ExpCertificate(lam, zero, 0.0, np.ones(m), degree, status="trivial")

    g = boundary_multiplier(problem) if boundary_trick and lam.nonnegative else None
    mdeg = multiplier_degree if multiplier_degree is not None else degree
    prog = SosProgram(ctx)
    V: list[AffinePoly] = []
    for i in range(m):
        if g is not None and g.degree() < degree:
            _, Vi = prog.template(monomial_basis(problem.n, degree - g.degree()), f"V{i}", times=g)
        else:
            _, Vi = prog.template(monomial_basis(problem.n, degree), f"V{i}")
        V.append(Vi)
    k_alpha, alpha = prog.new_scalar("alpha")
    AV = [v.map_linear(lambda p: generator_apply(problem.system, p)) for v in V]
    X = problem.domain
    Xu = problem.unsafe_in_domain()
    X0 = problem.initial_in_domain()
    for i in range(m):
        LV_i = _row_combination(Lam[i], V)
        prog.add_nonneg(V[i], X, mdeg, f"nonneg[{i}]")
        prog.add_nonneg(-(AV[i] + LV_i), X, mdeg, f"decay[{i}]")
        if g is None:
            for b, piece in enumerate(problem.boundary):
                prog.add_nonneg(-LV_i, piece, mdeg, f"boundary{b}[{i}]")
        prog.add_nonneg(V[i] - 1.0, Xu, mdeg, f"unsafe[{i}]")
        prog.add_nonneg(alpha - V[i], X0, mdeg, f"initial[{i}]")

    res = prog.solve({k_alpha: 1.0}, settings)
    if not res.ok:
        raise Infeasible(f"exponential certificate (degree {degree}, Lambda {Lam.tolist()}) "
                         f"not found: {res.status.value}; decrease Lambda (e.g. halve it) "
                         f"or raise the degree", res.status)
    values = res.values
    Vp = PolyVector(v.value(values) for v in V)
    alpha_val = float(values[k_alpha])
    # the SDP only guarantees V >= 1 - (solver slack) on Xu; certify the actual level
    l_raw = np.ones(m)
    if refine_level:
        l_raw = np.array([certified_min(Vp[i], Xu, mdeg, settings) for i in range(m)])
    # alpha must dominate every component on X0 in the final, validated numbers
    c = 1.0 / float(np.min(l_raw))
    cert = ExpCertificate(lam, Vp.scale(c), alpha_val * c, l_raw * c, degree,
                          tuple(res.witnesses), l_raw, c, g, res.status.value)
    log.info("exp certificate: alpha=%.6g l_raw=%s ratio=%.6g", alpha_val, l_raw, cert.ratio)
    return cert


def _row_combination(row, V: Sequence[AffinePoly]) -> AffinePoly:
    out = AffinePoly.zero(V[0].variables)
    for a, v in zip(row, V):
        if a:
            out = out + v.scale(float(a))
    return out


def certified_min(p: Polynomial, S: SemialgebraicSet, multiplier_degree: int,
                  settings: SolverSettings | None = None, floor: float = 1.0) -> float:
    """Largest c with p - c SOS-certified on S; never less than ``floor``.

    Falls back to ``floor`` when the SDP fails or does not validate, since
    the caller already holds a certificate for that level.
    """
    prog = SosProgram(p.variables)
    k, c = prog.new_scalar("level")
    prog.add_nonneg(AffinePoly.lift(p) - c, S, multiplier_degree, "level")
    try:
        res = prog.solve({k: -1.0}, settings)
    except ValidationFailed as exc:
        log.warning("unsafe level refinement failed validation: %s", exc)
        return floor
    if not res.ok:
        return floor
    return max(floor, float(res.values[k]))


def synthesize_exp_ladder(problem: SafetyProblem, lam: LambdaSpec, degree: int,
                          settings: SolverSettings | None = None, max_halvings: int = 3,
                          max_degree: int | None = None, **kw) -> tuple[ExpCertificate, list]:
    """Retry with Lambda halved, then with the degree raised by 2, until success."""
    max_degree = max_degree if max_degree is not None else degree + 4
    attempts = []
    for d in range(degree, max_degree + 1, 2):
        cur = lam
        for _ in range(max_halvings + 1):
            try:
                cert = synthesize_exp(problem, cur, d, settings, **kw)
                attempts.append({"lambda": cur.tolist(), "degree": d, "result": "ok"})
                return cert, attempts
            except (Infeasible, ValidationFailed) as exc:
                attempts.append({"lambda": cur.tolist(), "degree": d, "result": str(exc)})
                log.info("attempt failed: %s", exc)
            cur = cur.scaled(0.5)
    raise Infeasible("no exponential certificate found on the retry ladder", attempts=attempts)


# sampling check ---------------------------------------------------------------

@dataclass
class SamplingReport:
    worst: dict = field(default_factory=dict)      # condition -> (violation, point)
    counts: dict = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return all(v[0] <= 0.0 for v in self.worst.values())

    def record(self, name: str, slack: np.ndarray, pts: np.ndarray):
        """``slack`` holds (violation - tolerance) per sample; > 0 means violated."""
        self.counts[name] = self.counts.get(name, 0) + len(slack)
        if len(slack) == 0:
            return
        k = int(np.argmax(slack))
        if name not in self.worst or slack[k] > self.worst[name][0]:
            self.worst[name] = (float(slack[k]), pts[k].tolist())


def _check(report: SamplingReport, name: str, expr: Polynomial, pts: np.ndarray, tol: float):
    """Record violations of ``expr >= 0`` with relative tolerance."""
    if len(pts) == 0:
        report.record(name, np.empty(0), pts)
        return
    vals = expr.evaluate_many(pts)
    scale = 1.0 + _abs_many(expr, pts)
    report.record(name, -vals - tol * scale, pts)


def _abs_many(p: Polynomial, pts: np.ndarray) -> np.ndarray:
    if not p:
        return np.zeros(len(pts))
    q = Polynomial({m: abs(float(c)) for m, c in p.terms()}, p.variables)
    return q.evaluate_many(np.abs(pts))


def check_certificate_sampling(cert: ExpCertificate, problem: SafetyProblem, n_samples: int = 10_000,
                               tol: float = 1e-6, seed: int = 0, raise_on_violation: bool = True) -> SamplingReport:
    """Evaluate every certificate condition on random points of its set."""
    rng = np.random.default_rng(seed)
    box = problem.box()
    rep = SamplingReport()
    Lam = cert.lam.matrix
    V = cert.V
    AV = [generator_apply(problem.system, v) for v in V]
    LV = [V.matmul_const(Lam)[i] for i in range(cert.m)]
    ptsX = problem.domain.sample(n_samples, box, rng)
    ptsU = problem.unsafe_in_domain().sample(n_samples, box, rng)
    pts0 = problem.initial_in_domain().sample(n_samples, box, rng)
    for i in range(cert.m):
        _check(rep, "V>=0 on X", V[i], ptsX, tol)
        _check(rep, "AV+LV<=0 on X", -(AV[i] + LV[i]), ptsX, tol)
        for piece in problem.boundary:
            ptsB = piece.intersect(problem.domain).sample(n_samples, box, rng)
            _check(rep, "LV<=0 on boundary", -LV[i], ptsB, tol)
        _check(rep, "V>=l on Xu", V[i] - float(cert.l[i]), ptsU, tol)
        _check(rep, "V<=alpha on X0", cert.alpha - V[i], pts0, tol)
    if raise_on_violation and not rep.clean:
        name, (viol, pt) = max(rep.worst.items(), key=lambda kv: kv[1][0])
        raise SamplingViolation(f"{name} violated by {viol:.3g} at {pt}", rep)
    return rep
