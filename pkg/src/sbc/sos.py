"""Lower polynomial non-negativity on semialgebraic sets to an SDP.

A constraint ``target >= 0 on {g_i >= 0, h_j = 0}`` becomes the identity

    target = s_0 + sum_i s_i g_i + sum_j l_j h_j

with SOS multipliers ``s_i = z_i^T Q_i z_i`` (Gram blocks, PSD) and free
polynomial multipliers ``l_j``, matched coefficient by coefficient.  The
target may be affine in unknown template coefficients (``AffinePoly``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .polynomial import Polynomial, VariableMismatch, grlex_key, monomial_basis
from .sde import SemialgebraicSet
from .sdp import SQRT2, SdpProblem, SdpSolution, SolverSettings, Status, solve, svec_index, svec_size

log = logging.getLogger(__name__)

TOL_IDENTITY = 1e-6
TOL_PSD = 1e-7


class StructurallyInfeasible(ValueError):
    """A coefficient identity has a non-zero constant and no unknowns."""


class ValidationFailed(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AffinePoly:
    """Polynomial whose coefficients are affine in scalar decision variables.

    Stored as ``const + sum_k x_k * parts[k]`` with numeric polynomials.
    """

    __slots__ = ("parts", "const", "variables")

    def __init__(self, parts: Mapping[int, Polynomial] | None, const: Polynomial):
        self.variables = const.variables
        clean = {}
        for k, p in (parts or {}).items():
            if p.variables != self.variables:
                raise VariableMismatch("AffinePoly parts disagree on variables")
            if p:
                clean[int(k)] = p
        self.parts = clean
        self.const = const

    @classmethod
    def lift(cls, p: Polynomial) -> "AffinePoly":
        return cls({}, p)

    @classmethod
    def zero(cls, variables) -> "AffinePoly":
        return cls({}, Polynomial.zero(variables))

    def _coerce(self, other) -> "AffinePoly":
        if isinstance(other, AffinePoly):
            if other.variables != self.variables:
                raise VariableMismatch("AffinePoly contexts differ")
            return other
        if isinstance(other, Polynomial):
            return AffinePoly({}, other)
        return AffinePoly({}, Polynomial.constant(other, self.variables))

    def __add__(self, other):
        other = self._coerce(other)
        parts = dict(self.parts)
        for k, p in other.parts.items():
            parts[k] = parts[k] + p if k in parts else p
        return AffinePoly(parts, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c) -> "AffinePoly":
        return AffinePoly({k: p.scale(c) for k, p in self.parts.items()}, self.const.scale(c))

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            return AffinePoly({k: p * other for k, p in self.parts.items()}, self.const * other)
        if isinstance(other, AffinePoly):
            raise TypeError("product of two affine polynomials is not affine")
        return self.scale(other)

    __rmul__ = __mul__

    def map_linear(self, fn: Callable[[Polynomial], Polynomial]) -> "AffinePoly":
        """Apply a linear operator (derivative, generator, substitution) termwise."""
        return AffinePoly({k: fn(p) for k, p in self.parts.items()}, fn(self.const))

    def degree(self) -> int:
        return max([p.degree() for p in self.parts.values()] + [self.const.degree()])

    def variables_used(self) -> list[int]:
        return sorted(self.parts)

    def value(self, x: Sequence[float]) -> Polynomial:
        out = self.const.to_float()
        for k, p in self.parts.items():
            if x[k]:
                out = out + p.scale(float(x[k]))
        return out

    def coefficient_rows(self):
        """monomial -> ({var: coeff}, const)"""
        rows: dict = {}
        for k, p in self.parts.items():
            for m, c in p.coefficients().items():
                rows.setdefault(m, ({}, 0.0))[0][k] = float(c)
        for m, c in self.const.coefficients().items():
            entry = rows.setdefault(m, ({}, 0.0))
            rows[m] = (entry[0], entry[1] + float(c))
        return rows


def even_up(d: int) -> int:
    return d + (d % 2) if d > 0 else 0


@dataclass
class SosConstraint:
    target: AffinePoly
    set: SemialgebraicSet
    multiplier_degree: Optional[int] = None
    label: str = ""


@dataclass
class GramBlock:
    basis: list
    multiplier: Polynomial
    label: str


@dataclass
class FreeMultiplier:
    basis: list
    multiplier: Polynomial
    label: str


@dataclass
class EncodedConstraint:
    constraint: SosConstraint
    blocks: list
    free_multipliers: list
    rows: dict          # monomial -> list of (kind, a, b, coeff), const
    degree: int

    @property
    def n_lambda(self) -> int:
        return sum(len(f.basis) for f in self.free_multipliers)


def encode_nonneg(constraint: SosConstraint) -> EncodedConstraint | None:
    """Putinar-form encoding of one constraint; ``None`` when the set is empty."""
    target, S = constraint.target, constraint.set
    if S.variables != target.variables:
        raise VariableMismatch("constraint set and target use different variables")
    if S.empty:
        return None
    n = len(target.variables)
    req = constraint.multiplier_degree if constraint.multiplier_degree is not None else 0
    if req < 0:
        raise ValueError("multiplier_degree must be >= 0")
    D = max(even_up(max(target.degree(), 0)), even_up(req))
    blocks = [GramBlock(monomial_basis(n, D // 2), Polynomial.constant(1.0, target.variables),
                        f"{constraint.label}:sigma0")]
    for i, g in enumerate(S.inequalities):
        dg = g.degree()
        if dg < 0:
            continue
        half = (D - dg) // 2
        if half < 0:
            raise StructurallyInfeasible(
                f"{constraint.label}: inequality {g} exceeds encoding degree {D}")
        blocks.append(GramBlock(monomial_basis(n, half), g.to_float(), f"{constraint.label}:sigma{i + 1}"))
    free = []
    for j, h in enumerate(S.equalities):
        dh = h.degree()
        if dh < 0:
            continue
        if D - dh < 0:
            raise StructurallyInfeasible(
                f"{constraint.label}: equality {h} exceeds encoding degree {D}")
        free.append(FreeMultiplier(monomial_basis(n, D - dh), h.to_float(), f"{constraint.label}:lambda{j + 1}"))

    rows: dict = {}

    def add(m, entry):
        rows.setdefault(m, [[], 0.0])[0].append(entry)

    for m, (coeffs, const) in target.coefficient_rows().items():
        slot = rows.setdefault(m, [[], 0.0])
        slot[1] += const
        for k, c in sorted(coeffs.items()):
            slot[0].append(("x", k, 0, c))
    for bi, blk in enumerate(blocks):
        g_terms = list(blk.multiplier.coefficients().items())
        z = blk.basis
        for j in range(len(z)):
            for i in range(j + 1):
                base = tuple(a + b for a, b in zip(z[i], z[j]))
                w = 1.0 if i == j else SQRT2
                idx = svec_index(i, j)
                for e, cg in g_terms:
                    add(tuple(a + b for a, b in zip(base, e)), ("g", bi, idx, -w * float(cg)))
    for fi, fm in enumerate(free):
        h_terms = list(fm.multiplier.coefficients().items())
        for k, mono in enumerate(fm.basis):
            for e, ch in h_terms:
                add(tuple(a + b for a, b in zip(mono, e)), ("l", fi, k, -float(ch)))

    clean = {}
    for m in sorted(rows, key=grlex_key):
        entries, const = rows[m]
        merged: dict = {}
        for kind, a, b, c in entries:
            key = (kind, a, b)
            merged[key] = merged.get(key, 0.0) + c
        entries = [(k[0], k[1], k[2], c) for k, c in merged.items() if c != 0.0]
        if not entries:
            if abs(const) > 0.0:
                raise StructurallyInfeasible(
                    f"{constraint.label}: coefficient of monomial {m} cannot be matched")
            continue
        clean[m] = (entries, const)
    return EncodedConstraint(constraint, blocks, free, clean, D)


@dataclass
class Placement:
    block_ids: list
    lambda_offset: int


def assemble(objective: Mapping[int, float], constraints: Sequence[SosConstraint | EncodedConstraint],
             n_decision: int, decision_labels: Sequence[str] | None = None) -> SdpProblem:
    """Stack encoded constraints into one SDP over a shared decision space.

    Variable order: decision variables, then free-multiplier coefficients in
    constraint order, then Gram blocks in constraint order.
    """
    encoded = []
    for c in constraints:
        e = encode_nonneg(c) if isinstance(c, SosConstraint) else c
        if e is not None:
            encoded.append(e)
    for e in encoded:
        for _, (entries, _) in e.rows.items():
            for kind, a, _, _ in entries:
                if kind == "x" and not 0 <= a < n_decision:
                    raise VariableMismatch(f"{e.constraint.label}: decision variable {a} outside space")
    n_lambda = sum(e.n_lambda for e in encoded)
    n_free = n_decision + n_lambda
    sizes, block_labels, placements = [], [], []
    lam_at = n_decision
    for e in encoded:
        ids = []
        for blk in e.blocks:
            ids.append(len(sizes))
            sizes.append(len(blk.basis))
            block_labels.append(blk.label)
        placements.append(Placement(ids, lam_at))
        lam_at += e.n_lambda
    offsets, at = [], n_free
    for s in sizes:
        offsets.append(at)
        at += svec_size(s)
    n_total = at

    rr, cc, vv, b, row_labels = [], [], [], [], []
    for e, pl in zip(encoded, placements):
        lam_starts, acc = [], pl.lambda_offset
        for fm in e.free_multipliers:
            lam_starts.append(acc)
            acc += len(fm.basis)
        for m, (entries, const) in e.rows.items():
            r = len(b)
            for kind, a, bb, c in entries:
                if kind == "x":
                    col = a
                elif kind == "g":
                    col = offsets[pl.block_ids[a]] + bb
                else:
                    col = lam_starts[a] + bb
                rr.append(r)
                cc.append(col)
                vv.append(c)
            b.append(-const)
            row_labels.append(f"{e.constraint.label}:{m}")
    A = sp.csr_matrix((vv, (rr, cc)), shape=(len(b), n_total))
    A.sum_duplicates()
    cvec = np.zeros(n_total)
    for k, v in objective.items():
        if not 0 <= k < n_decision:
            raise VariableMismatch(f"objective references unknown variable {k}")
        cvec[k] = v
    labels = list(decision_labels or [f"x{k}" for k in range(n_decision)])
    labels += [f"lambda{k}" for k in range(n_lambda)]
    prob = SdpProblem(n_free, tuple(sizes), A, np.asarray(b, dtype=float), cvec,
                      labels, block_labels, row_labels)
    prob.encoded = encoded
    prob.placements = placements
    return prob


@dataclass
class SosWitness:
    label: str
    gram_matrices: list
    multiplier_polys: list
    free_multipliers: list
    residual: float
    scale: float
    min_eigenvalue: float

    @property
    def relative_residual(self) -> float:
        return self.residual / max(1.0, self.scale)


def witness_from_grams(encoded: EncodedConstraint, decision: Sequence[float], grams: Sequence[np.ndarray],
                       lambdas: Sequence[np.ndarray]) -> SosWitness:
    target = encoded.constraint.target.value(decision)
    ctx = target.variables
    rhs = Polynomial.zero(ctx)
    sigmas = []
    for blk, Q in zip(encoded.blocks, grams):
        s = _gram_poly(blk.basis, Q, ctx)
        sigmas.append(s)
        rhs = rhs + s * blk.multiplier
    lam_polys = []
    for fm, coef in zip(encoded.free_multipliers, lambdas):
        lam = Polynomial({m: float(c) for m, c in zip(fm.basis, coef)}, ctx)
        lam_polys.append(lam)
        rhs = rhs + lam * fm.multiplier
    diff = target - rhs
    residual = diff.max_abs_coeff()
    min_eig = min((float(np.linalg.eigvalsh(Q)[0]) for Q in grams if Q.size), default=0.0)
    return SosWitness(encoded.constraint.label, list(grams), sigmas, lam_polys, residual,
                      target.max_abs_coeff(), min_eig)


def _gram_poly(basis, Q: np.ndarray, ctx) -> Polynomial:
    out: dict = {}
    k = len(basis)
    for i in range(k):
        for j in range(k):
            v = Q[i, j]
            if v:
                m = tuple(a + b for a, b in zip(basis[i], basis[j]))
                out[m] = out.get(m, 0.0) + float(v)
    return Polynomial(out, ctx)


def check_witness(w: SosWitness, tol_identity: float = TOL_IDENTITY, tol_psd: float = TOL_PSD) -> SosWitness:
    if w.relative_residual > tol_identity or w.min_eigenvalue < -tol_psd:
        raise ValidationFailed(
            f"{w.label}: identity residual {w.residual:.3g} (relative {w.relative_residual:.3g}), "
            f"min Gram eigenvalue {w.min_eigenvalue:.3g}",
            {"label": w.label, "residual": w.residual, "relative_residual": w.relative_residual,
             "min_eigenvalue": w.min_eigenvalue})
    return w


def extract_and_validate(solution: SdpSolution, problem: SdpProblem,
                         tol_identity: float = TOL_IDENTITY, tol_psd: float = TOL_PSD) -> list[SosWitness]:
    """Rebuild every multiplier from the solution and re-check each identity."""
    if not solution.status.ok or solution.x is None:
        raise ValidationFailed(f"no usable solution (status {solution.status.value})")
    x = solution.x
    n_dec = len(problem.free_labels) - sum(e.n_lambda for e in problem.encoded)
    decision = x[:n_dec]
    out = []
    for e, pl in zip(problem.encoded, problem.placements):
        grams = [solution.block(problem, k) for k in pl.block_ids]
        lambdas, at = [], pl.lambda_offset
        for fm in e.free_multipliers:
            lambdas.append(x[at: at + len(fm.basis)])
            at += len(fm.basis)
        out.append(check_witness(witness_from_grams(e, decision, grams, lambdas), tol_identity, tol_psd))
    return out


@dataclass
class SosResult:
    status: Status
    values: Optional[np.ndarray]
    objective: float
    witnesses: list
    solution: SdpSolution
    problem: SdpProblem

    @property
    def ok(self) -> bool:
        return self.status.ok and self.values is not None

    def max_residual(self) -> float:
        return max((w.relative_residual for w in self.witnesses), default=0.0)

    def min_eigenvalue(self) -> float:
        return min((w.min_eigenvalue for w in self.witnesses), default=0.0)


class SosProgram:
    """Collects decision variables and non-negativity constraints.

    ``variables`` is the default polynomial context; individual constraints
    may live in another one (e.g. without time) as long as their set does.
    """

    def __init__(self, variables: Sequence[str]):
        self.variables = tuple(variables)
        self.labels: list[str] = []
        self.constraints: list[SosConstraint] = []

    @property
    def n_decision(self) -> int:
        return len(self.labels)

    def new_variables(self, count: int, label: str) -> list[int]:
        start = len(self.labels)
        self.labels += [f"{label}[{k}]" for k in range(count)]
        return list(range(start, start + count))

    def new_scalar(self, label: str) -> tuple[int, AffinePoly]:
        (k,) = self.new_variables(1, label)
        one = Polynomial.constant(1.0, self.variables)
        return k, AffinePoly({k: one}, Polynomial.zero(self.variables))

    def template(self, basis: Sequence, label: str, times: Polynomial | None = None) -> tuple[list[int], AffinePoly]:
        """Generic polynomial sum_k a_k m_k (optionally multiplied by ``times``)."""
        idx = self.new_variables(len(basis), label)
        parts = {}
        for k, m in zip(idx, basis):
            p = Polynomial.monomial(m, self.variables, 1.0)
            parts[k] = p * times if times is not None else p
        return idx, AffinePoly(parts, Polynomial.zero(self.variables))

    def add_nonneg(self, target: AffinePoly | Polynomial, on: SemialgebraicSet,
                   multiplier_degree: int | None = None, label: str = "") -> SosConstraint:
        if isinstance(target, Polynomial):
            target = AffinePoly.lift(target)
        if on.variables != target.variables:
            on = on.embed(target.variables)
        point = on.single_point()
        if point is not None:
            # equality multipliers are all free on a single point, which leaves the
            # solver a large flat direction; state the condition at the point instead
            ctx = target.variables
            target = target.map_linear(lambda p: Polynomial.constant(p.evaluate(point), ctx))
            on = SemialgebraicSet.whole(ctx)
        c = SosConstraint(target, on, multiplier_degree, label or f"c{len(self.constraints)}")
        self.constraints.append(c)
        return c

    def assemble(self, objective: Mapping[int, float]) -> SdpProblem:
        return assemble(objective, self.constraints, self.n_decision, self.labels)

    def solve(self, objective: Mapping[int, float], settings: SolverSettings | None = None,
              tol_identity: float = TOL_IDENTITY, tol_psd: float = TOL_PSD,
              validate: bool = True) -> SosResult:
        problem = self.assemble(objective)
        log.debug("SDP: %d free, %d blocks (max %d), %d rows", problem.n_free,
                  len(problem.block_sizes), max(problem.block_sizes, default=0), problem.n_rows)
        sol = solve(problem, settings)
        if not sol.status.ok:
            return SosResult(sol.status, None, math.nan, [], sol, problem)
        values = sol.x[: self.n_decision].copy()
        witnesses = extract_and_validate(sol, problem, tol_identity, tol_psd) if validate else []
        return SosResult(sol.status, values, sol.primal_objective, witnesses, sol, problem)
