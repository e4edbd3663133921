"""Time-dependent barrier certificates for the bounded horizon [0, T].

H(t, x) >= 0 on [0,T] x X, AH <= 0 on [0,T] x (X minus Xu), dH/dt <= 0 on
[0,T] x boundary, H >= 1 on [0,T] x Xu and H(0, .) <= beta on X0 give
P(hit Xu within [0, T]) <= beta.

Also holds the time-independent barrier (no time, AV <= 0 outside Xu)
used as a baseline for comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .expcert import Infeasible, SamplingReport, SamplingViolation, _check, unscale
from .polynomial import TIME, Polynomial, monomial_basis, with_time
from .sde import SafetyProblem, SemialgebraicSet, affine_map, generator_apply
from .sdp import SolverSettings
from .sos import AffinePoly, SosProgram

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeDepCertificate:
    H: Polynomial            # over (x1..xn, t)
    T: float
    beta: float
    degree: int
    eta: float = 1.0
    witnesses: tuple = ()
    status: str = ""

    def max_residual(self) -> float:
        return max((w.relative_residual for w in self.witnesses), default=0.0)

    def min_eigenvalue(self) -> float:
        return min((w.min_eigenvalue for w in self.witnesses), default=0.0)

    def to_dict(self) -> dict:
        from .expcert import poly_to_terms

        return {"T": self.T, "degree": self.degree, "eta": self.eta, "beta": repr(float(self.beta)),
                "variables": list(self.H.variables), "H": poly_to_terms(self.H),
                "max_residual": self.max_residual(), "min_gram_eigenvalue": self.min_eigenvalue()}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeDepCertificate":
        from .expcert import poly_from_terms

        return cls(poly_from_terms(d["H"], tuple(d["variables"])), float(d["T"]), float(d["beta"]),
                   int(d["degree"]), float(d.get("eta", 1.0)))


def bounded_bound(cert: TimeDepCertificate) -> float:
    """P(hit Xu within [0, T]) <= beta / eta, capped at 1."""
    return min(1.0, cert.beta / cert.eta)


def _time_window(ctx) -> Polynomial:
    """s (1 - s) >= 0 for normalised time s = t / T."""
    s = Polynomial.var(TIME, ctx)
    return s * (1.0 - s)


def synthesize_timedep(problem: SafetyProblem, T: float, degree: int,
                       settings: SolverSettings | None = None, multiplier_degree: int | None = None,
                       rescale: bool = False) -> TimeDepCertificate:
    """Minimise beta over polynomial H of the given total degree in (x, t).

    Internally time is normalised to s = t / T in [0, 1] and the state by
    the sampling box; H is returned in the original (x, t).
    """
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if degree < 2:
        raise ValueError("certificate degree must be >= 2")
    ctx = with_time(problem.variables)
    if problem.unsafe_in_domain().empty:
        return TimeDepCertificate(Polynomial.zero(ctx), float(T), 0.0, degree, status="trivial")
    factors = problem.natural_scale() if rescale else np.ones(problem.n)
    work = problem.rescaled(factors) if rescale else problem
    mdeg = multiplier_degree if multiplier_degree is not None else degree

    prog = SosProgram(ctx)
    _, G = prog.template(monomial_basis(len(ctx), degree), "H")
    k_beta, beta = prog.new_scalar("beta")
    ds = G.map_linear(lambda p: p.differentiate(TIME))
    AG = G.map_linear(lambda p: generator_apply(work.system, p)) + ds.scale(1.0 / T - 1.0)
    window = _time_window(ctx)

    def over_time(S: SemialgebraicSet) -> SemialgebraicSet:
        return S.embed(ctx).with_inequality(window)

    prog.add_nonneg(G, over_time(work.domain), mdeg, "nonneg")
    prog.add_nonneg(-AG, over_time(work.safe_region()), mdeg, "supermartingale")
    for b, piece in enumerate(work.boundary):
        prog.add_nonneg(-ds, over_time(piece), mdeg, f"boundary{b}")
    prog.add_nonneg(G - 1.0, over_time(work.unsafe_in_domain()), mdeg, "unsafe")
    state = work.variables
    G0 = G.map_linear(lambda p: p.substitute(TIME, 0).restrict(state))
    init = work.initial_in_domain()
    frame = init.tight_frame(work.box(), np.random.default_rng(0))
    if frame is not None:
        # a small X0 is badly scaled next to the box; pose it in its own frame
        G0, init = G0.map_linear(affine_map(*frame)), init.map_affine(*frame)
    prog.add_nonneg(AffinePoly({k_beta: Polynomial.constant(1.0, state)}, Polynomial.zero(state)) - G0,
                    init, mdeg, "initial")

    res = prog.solve({k_beta: 1.0}, settings)
    if not res.ok:
        raise Infeasible(f"time-dependent certificate (degree {degree}, T = {T}) not found: "
                         f"{res.status.value}; try a higher degree", res.status)
    Gv = G.value(res.values)
    H = unscale(Gv.scale_variable(TIME, 1.0 / T), list(factors) + [1.0])
    beta_val = float(res.values[k_beta])
    log.info("time-dependent certificate: T=%g beta=%.6g", T, beta_val)
    return TimeDepCertificate(H, float(T), beta_val, degree, 1.0, tuple(res.witnesses), res.status.value)


def check_timedep_sampling(cert: TimeDepCertificate, problem: SafetyProblem, n_samples: int = 10_000,
                           tol: float = 1e-6, seed: int = 0, raise_on_violation: bool = True) -> SamplingReport:
    """Evaluate the five bounded-horizon conditions on random (t, x) samples."""
    rng = np.random.default_rng(seed)
    box = problem.box()
    ctx = cert.H.variables
    H = cert.H
    AH = generator_apply(problem.system, H)
    dH = H.differentiate(TIME)
    rep = SamplingReport()

    def with_t(pts):
        return np.column_stack([pts, rng.uniform(0.0, cert.T, len(pts))]) if len(pts) else np.empty((0, len(ctx)))

    _check(rep, "H>=0 on X", H, with_t(problem.domain.sample(n_samples, box, rng)), tol)
    _check(rep, "AH<=0 outside Xu", -AH, with_t(problem.safe_region().sample(n_samples, box, rng)), tol)
    for piece in problem.boundary:
        pts = piece.intersect(problem.domain).sample(n_samples, box, rng)
        _check(rep, "dH/dt<=0 on boundary", -dH, with_t(pts), tol)
    _check(rep, "H>=eta on Xu", H - cert.eta, with_t(problem.unsafe_in_domain().sample(n_samples, box, rng)), tol)
    pts0 = problem.initial_in_domain().sample(n_samples, box, rng)
    pts0 = np.column_stack([pts0, np.zeros(len(pts0))]) if len(pts0) else np.empty((0, len(ctx)))
    _check(rep, "H(0)<=beta on X0", cert.beta - H, pts0, tol)
    if raise_on_violation and not rep.clean:
        name, (viol, pt) = max(rep.worst.items(), key=lambda kv: kv[1][0])
        raise SamplingViolation(f"{name} violated by {viol:.3g} at {pt}", rep)
    return rep


# time-independent baseline ----------------------------------------------------

@dataclass(frozen=True)
class StaticCertificate:
    V: Polynomial
    gamma: float
    degree: int
    witnesses: tuple = ()

    def as_timedep(self, T: float) -> TimeDepCertificate:
        """Read V(x) as H(t, x) = V(x) on [0, T]."""
        ctx = with_time(self.V.variables)
        return TimeDepCertificate(self.V.embed(ctx), float(T), self.gamma, self.degree)


def synthesize_static(problem: SafetyProblem, degree: int, settings: SolverSettings | None = None,
                      multiplier_degree: int | None = None, rescale: bool = False) -> StaticCertificate:
    """Classic supermartingale barrier: V >= 0, AV <= 0 outside Xu, V >= 1 on Xu.

    Bounds P(ever hit Xu) by gamma = sup of V over X0.
    """
    ctx = problem.variables
    if problem.unsafe_in_domain().empty:
        return StaticCertificate(Polynomial.zero(ctx), 0.0, degree)
    factors = problem.natural_scale() if rescale else np.ones(problem.n)
    work = problem.rescaled(factors) if rescale else problem
    mdeg = multiplier_degree if multiplier_degree is not None else degree
    prog = SosProgram(ctx)
    _, V = prog.template(monomial_basis(problem.n, degree), "V")
    k_gamma, gamma = prog.new_scalar("gamma")
    prog.add_nonneg(V, work.domain, mdeg, "nonneg")
    prog.add_nonneg(-V.map_linear(lambda p: generator_apply(work.system, p)), work.safe_region(), mdeg,
                    "supermartingale")
    prog.add_nonneg(V - 1.0, work.unsafe_in_domain(), mdeg, "unsafe")
    prog.add_nonneg(gamma - V, work.initial_in_domain(), mdeg, "initial")
    res = prog.solve({k_gamma: 1.0}, settings)
    if not res.ok:
        raise Infeasible(f"time-independent barrier (degree {degree}) not found: {res.status.value}",
                         res.status)
    return StaticCertificate(unscale(V.value(res.values), factors), float(res.values[k_gamma]), degree,
                             tuple(res.witnesses))
