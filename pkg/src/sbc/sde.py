"""SDE systems, semialgebraic sets, safety problems and the generator."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .polynomial import (
    TIME,
    Polynomial,
    PolyMatrix,
    PolyVector,
    VariableMismatch,
    with_time,
)

log = logging.getLogger(__name__)

TOL_MEMBERSHIP = 1e-9


@dataclass(frozen=True)
class SdeSystem:
    """Time-homogeneous polynomial SDE ``dX = b(X) dt + sigma(X) dW``."""

    drift: PolyVector
    diffusion: PolyMatrix

    def __post_init__(self):
        n = len(self.drift)
        rows, _ = self.diffusion.shape
        if rows != n:
            raise ValueError(f"diffusion has {rows} rows, drift has {n} entries")
        if self.drift.variables != self.diffusion.variables:
            raise VariableMismatch("drift and diffusion use different variables")
        if TIME in self.drift.variables:
            raise ValueError("drift/diffusion must not depend on time")
        if len(self.drift.variables) != n:
            raise ValueError("state dimension does not match the variable context")

    @property
    def n(self) -> int:
        return len(self.drift)

    @property
    def m_w(self) -> int:
        return self.diffusion.shape[1]

    @property
    def variables(self) -> tuple[str, ...]:
        return self.drift.variables

    @cached_property
    def covariance(self) -> PolyMatrix:
        """sigma sigma^T."""
        return self.diffusion @ self.diffusion.transpose()

    @cached_property
    def _coef_cache(self) -> dict:
        return {}

    def coefficients_in(self, variables):
        """Drift and covariance entries re-expressed over ``variables``."""
        hit = self._coef_cache.get(variables)
        if hit is not None:
            return hit
        b = [p.embed(variables) for p in self.drift]
        cov = self.covariance
        a = [[cov[i, j].embed(variables) for j in range(self.n)] for i in range(self.n)]
        self._coef_cache[variables] = (b, a)
        return b, a


def generator_apply(system: SdeSystem, f: Polynomial) -> Polynomial:
    """Infinitesimal generator applied to ``f(x)`` or ``f(x, t)``.

    Af = df/dt + sum_i b_i df/dx_i + 1/2 sum_ij (sigma sigma^T)_ij d2f/dx_i dx_j
    """
    ctx = f.variables
    if ctx not in (system.variables, with_time(system.variables)):
        raise VariableMismatch(f"f uses {ctx}, system state is {system.variables}")
    b, a = system.coefficients_in(ctx)
    out = f.differentiate(TIME) if TIME in ctx else Polynomial.zero(ctx)
    grads = [f.differentiate(i) for i in range(system.n)]
    for i in range(system.n):
        if b[i] and grads[i]:
            out = out + b[i] * grads[i]
    for i in range(system.n):
        if not grads[i]:
            continue
        for j in range(system.n):
            if a[i][j]:
                second = grads[i].differentiate(j)
                if second:
                    out = out + (a[i][j] * second).scale(0.5)
    return out


def generator_apply_vector(system: SdeSystem, F: Sequence[Polynomial]) -> PolyVector:
    return PolyVector(generator_apply(system, p) for p in F)


@dataclass(frozen=True)
class SemialgebraicSet:
    """``{x | g_i(x) >= 0, h_j(x) = 0}``.

    No constraints at all means the whole space; ``empty=True`` marks the
    empty set explicitly.
    """

    variables: tuple[str, ...]
    inequalities: tuple[Polynomial, ...] = ()
    equalities: tuple[Polynomial, ...] = ()
    empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "inequalities", tuple(self.inequalities))
        object.__setattr__(self, "equalities", tuple(self.equalities))
        for p in self.inequalities + self.equalities:
            if p.variables != self.variables:
                raise VariableMismatch(f"constraint over {p.variables}, set over {self.variables}")

    @classmethod
    def whole(cls, variables) -> "SemialgebraicSet":
        return cls(tuple(variables))

    @classmethod
    def nothing(cls, variables) -> "SemialgebraicSet":
        return cls(tuple(variables), empty=True)

    @property
    def unbounded_flag(self) -> bool:
        return not self.empty and not self.inequalities and not self.equalities

    @property
    def dim(self) -> int:
        return len(self.variables)

    def contains(self, x, tol: float = TOL_MEMBERSHIP) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point of dimension {self.dim}")
        if self.empty:
            return False
        return all(g.evaluate(x) >= -tol for g in self.inequalities) and \
            all(abs(h.evaluate(x)) <= tol for h in self.equalities)

    def contains_many(self, pts, tol: float = TOL_MEMBERSHIP) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.empty:
            return np.zeros(pts.shape[0], dtype=bool)
        ok = np.ones(pts.shape[0], dtype=bool)
        for g in self.inequalities:
            ok &= g.evaluate_many(pts) >= -tol
        for h in self.equalities:
            ok &= np.abs(h.evaluate_many(pts)) <= tol
        return ok

    def intersect(self, other: "SemialgebraicSet") -> "SemialgebraicSet":
        if other.variables != self.variables:
            raise VariableMismatch("sets over different variables")
        ineq = list(self.inequalities)
        for g in other.inequalities:
            if g not in ineq:
                ineq.append(g)
        eq = list(self.equalities)
        for h in other.equalities:
            if h not in eq:
                eq.append(h)
        return SemialgebraicSet(self.variables, tuple(ineq), tuple(eq), self.empty or other.empty)

    def with_inequality(self, g: Polynomial) -> "SemialgebraicSet":
        return SemialgebraicSet(self.variables, self.inequalities + (g,), self.equalities, self.empty)

    def embed(self, variables) -> "SemialgebraicSet":
        return SemialgebraicSet(tuple(variables),
                                tuple(g.embed(variables) for g in self.inequalities),
                                tuple(h.embed(variables) for h in self.equalities),
                                self.empty)

    def single_point(self, tol: float = TOL_MEMBERSHIP) -> Optional[np.ndarray]:
        """The point, when linear equalities pin the set down to one."""
        if self.empty or not self.equalities or any(h.degree() > 1 for h in self.equalities):
            return None
        zero = (0,) * self.dim
        rows = [[float(h.coeff(tuple(int(k == i) for k in range(self.dim)))) for i in range(self.dim)]
                for h in self.equalities]
        rhs = [-float(h.coeff(zero)) for h in self.equalities]
        A = np.array(rows).reshape(len(rows), self.dim)
        if np.linalg.matrix_rank(A) < self.dim:
            return None
        x, *_ = np.linalg.lstsq(A, np.array(rhs), rcond=None)
        return x if self.contains(x, tol) else None

    def map_affine(self, center, half) -> "SemialgebraicSet":
        """Preimage under ``x = center + half * u`` (coordinatewise)."""
        f = affine_map(center, half)
        return SemialgebraicSet(self.variables, tuple(f(g) for g in self.inequalities),
                                tuple(f(h) for h in self.equalities), self.empty)

    def tight_frame(self, box, rng: np.random.Generator, n: int = 4000, shrink: float = 0.25):
        """Sampled bounding box (center, half widths) when the set is small.

        Returns None unless some side is below ``shrink`` times the box side.
        The frame is only a conditioning aid, so a sampled one is fine.
        """
        box = np.asarray(box, dtype=float).reshape(self.dim, 2)
        if self.empty or self.equalities:
            return None
        pts = self.sample(n, box, rng, max_candidates=5_000_000)
        if len(pts) < 10:
            return None
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        half = 0.55 * (hi - lo)
        full = 0.5 * (box[:, 1] - box[:, 0])
        if np.any(half <= 0) or not np.any(half < shrink * full):
            return None
        return 0.5 * (lo + hi), half

    def sample(self, n: int, box, rng: np.random.Generator, max_candidates: int = 50_000_000) -> np.ndarray:
        """Draw up to ``n`` points of the set inside ``box`` (rows lo, hi).

        Uniform rejection sampling; equality constraints are met by a
        Gauss-Newton projection of each candidate before the inequality test.
        Batches grow with the observed rejection rate, so thin sets are fine
        as long as roughly ``n / rate`` candidates fit in ``max_candidates``.
        """
        box = np.asarray(box, dtype=float).reshape(self.dim, 2)
        if self.empty or n <= 0:
            return np.empty((0, self.dim))
        got = []
        count = drawn = 0
        batch = max(4 * n, 256)
        while count < n and drawn < max_candidates:
            batch = int(min(batch, max_candidates - drawn, 2_000_000))
            pts = rng.uniform(box[:, 0], box[:, 1], size=(batch, self.dim))
            drawn += batch
            if self.equalities:
                pts = _project(self.equalities, pts)
                inside = np.all((pts >= box[:, 0] - 1e-12) & (pts <= box[:, 1] + 1e-12), axis=1)
                pts = pts[inside]
            pts = pts[self.contains_many(pts, tol=1e-7)]
            got.append(pts)
            count += len(pts)
            rate = max(count, 1) / drawn
            batch = int(1.2 * (n - count) / rate) + 256
        out = np.concatenate(got) if got else np.empty((0, self.dim))
        return out[:n]


def affine_map(center, half):
    """p -> p(center + half * u) on the leading coordinates."""
    def f(p: Polynomial) -> Polynomial:
        for i, (c, r) in enumerate(zip(center, half)):
            p = p.scale_variable(i, float(r)).shift_variable(i, float(c) / float(r))
        return p

    return f


def _project(equalities, pts: np.ndarray, iters: int = 30) -> np.ndarray:
    grads = [[h.differentiate(i) for i in range(h.nvars)] for h in equalities]
    x = pts.copy()
    for _ in range(iters):
        r = np.stack([h.evaluate_many(x) for h in equalities], axis=1)          # (N, k)
        if np.max(np.abs(r), initial=0.0) < 1e-13:
            break
        J = np.stack([np.stack([g.evaluate_many(x) for g in row], axis=1) for row in grads],
                     axis=1)                                                  # (N, k, n)
        # minimum-norm Newton step per point: dx = J^T (J J^T)^-1 r
        JJt = J @ np.transpose(J, (0, 2, 1))
        JJt += 1e-14 * np.eye(len(equalities))
        sol = np.linalg.solve(JJt, r[..., None])
        x = x - (np.transpose(J, (0, 2, 1)) @ sol)[..., 0]
    r = np.stack([h.evaluate_many(x) for h in equalities], axis=1)
    ok = np.all(np.abs(r) < 1e-9, axis=1) & np.all(np.isfinite(x), axis=1)
    return x[ok]


@dataclass(frozen=True)
class SafetyProblem:
    """SDE plus domain X, initial set X0, unsafe set Xu and boundary pieces of X.

    ``boundary`` is a tuple of sets whose union over-approximates the boundary
    of X; leave it empty when X is the whole space.  ``unsafe_flip`` names the
    unsafe inequality whose negation describes X minus Xu.
    """

    system: SdeSystem
    domain: SemialgebraicSet
    initial: SemialgebraicSet
    unsafe: SemialgebraicSet
    boundary: tuple[SemialgebraicSet, ...] = ()
    name: str = "problem"
    unsafe_flip: Optional[int] = None
    sample_box: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "boundary", tuple(self.boundary))
        ctx = self.system.variables
        for s in (self.domain, self.initial, self.unsafe) + self.boundary:
            if s.variables != ctx:
                raise VariableMismatch(f"set over {s.variables}, system over {ctx}")
        if self.sample_box is not None:
            box = tuple(tuple(float(v) for v in row) for row in self.sample_box)
            if len(box) != self.n or any(len(r) != 2 or r[0] > r[1] for r in box):
                raise ValueError("sample_box must be n rows of [lo, hi]")
            object.__setattr__(self, "sample_box", box)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def variables(self) -> tuple[str, ...]:
        return self.system.variables

    def natural_scale(self) -> np.ndarray:
        """Per-coordinate magnitude of the sampling box (1 when none is given)."""
        if self.sample_box is None:
            return np.ones(self.n)
        s = np.max(np.abs(np.asarray(self.sample_box, dtype=float)), axis=1)
        return np.where(s > 0, s, 1.0)

    def rescaled(self, factors) -> "SafetyProblem":
        """Same problem in coordinates y with x = diag(factors) y."""
        factors = [float(f) for f in factors]
        if len(factors) != self.n or any(f <= 0 for f in factors):
            raise ValueError("need one positive factor per state variable")

        def sub(p: Polynomial) -> Polynomial:
            for i, f in enumerate(factors):
                if f != 1.0:
                    p = p.scale_variable(i, f)
            return p

        def sub_set(S: SemialgebraicSet) -> SemialgebraicSet:
            return SemialgebraicSet(S.variables, tuple(sub(g) for g in S.inequalities),
                                    tuple(sub(h) for h in S.equalities), S.empty)

        drift = PolyVector(sub(b).scale(1.0 / f) for b, f in zip(self.system.drift, factors))
        rows, cols = self.system.diffusion.shape
        diffusion = PolyMatrix([[sub(self.system.diffusion[i, j]).scale(1.0 / factors[i])
                                 for j in range(cols)] for i in range(rows)])
        box = None
        if self.sample_box is not None:
            box = tuple((lo / f, hi / f) for (lo, hi), f in zip(self.sample_box, factors))
        return SafetyProblem(SdeSystem(drift, diffusion), sub_set(self.domain), sub_set(self.initial),
                             sub_set(self.unsafe), tuple(sub_set(b) for b in self.boundary),
                             self.name, self.unsafe_flip, box)

    def box(self) -> np.ndarray:
        if self.sample_box is not None:
            return np.asarray(self.sample_box, dtype=float)
        return np.tile([-10.0, 10.0], (self.n, 1))

    def unsafe_in_domain(self) -> SemialgebraicSet:
        return self.unsafe.intersect(self.domain)

    def initial_in_domain(self) -> SemialgebraicSet:
        return self.initial.intersect(self.domain)

    def safe_region(self) -> SemialgebraicSet:
        """Closed over-approximation of X minus Xu.

        Adds the negation of the designated unsafe inequality to X; falls
        back to X itself when no single inequality can be flipped.
        """
        if self.unsafe.empty:
            return self.domain
        ineqs = self.unsafe.inequalities
        idx = self.unsafe_flip
        if idx is None:
            own = [i for i, g in enumerate(ineqs) if g not in self.domain.inequalities]
            if len(own) == 1 and not self.unsafe.equalities:
                idx = own[0]
        if idx is None or not 0 <= idx < len(ineqs):
            return self.domain
        return self.domain.with_inequality(-ineqs[idx])

    def check_containment(self, n_samples: int = 10_000, seed: int = 0) -> list[str]:
        """Sample X0 and Xu and warn about points found outside X."""
        rng = np.random.default_rng(seed)
        notes = []
        for label, s in (("initial", self.initial), ("unsafe", self.unsafe)):
            pts = s.sample(n_samples, self.box(), rng, max_candidates=2_000_000)
            if len(pts) == 0:
                continue
            bad = ~self.domain.contains_many(pts, tol=1e-7)
            if bad.any():
                msg = f"{label} set has {int(bad.sum())}/{len(pts)} samples outside the domain"
                notes.append(msg)
                warnings.warn(msg, stacklevel=2)
        return notes
