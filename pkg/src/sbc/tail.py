"""Exponentially decreasing tail bounds from an exponential certificate.

Scalar certificates give ``P(hit after T) <= alpha / (exp(lambda T) l)``.
Vector certificates need a split matrix M and are valid from T* on, with
``P(hit after T) <= min_i alpha / (exp(M T) l)_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .expcert import ExpCertificate, NonPositiveSpectrum, NotEssentiallyNonneg

T_GRID_STEP = 0.05
T_RESOLUTION = 1e-4
T_MAX = 100.0


class RangeError(OverflowError):
    pass


class TBelowTStar(ValueError):
    pass


class NoTStarWithinRange(RuntimeError):
    pass


def matrix_exp(A, t: float = 1.0) -> np.ndarray:
    """exp(A t) by scaling and squaring with a Pade approximant."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)) or not math.isfinite(t):
        raise ValueError("matrix_exp needs finite input")
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = sla.expm(A * t)
        except FloatingPointError as exc:
            raise RangeError(f"exp(A t) overflows for t = {t}") from exc
    if not np.all(np.isfinite(out)):
        raise RangeError(f"exp(A t) overflows for t = {t}")
    return out


class _Envelope:
    """exp(-Lambda t) tabulated on a log grid over [0, T_max]."""

    def __init__(self, lam: np.ndarray, points: int = 4000):
        self.lam = lam
        mu = float(np.min(np.linalg.eigvals(lam).real))
        if mu <= 0:
            raise NonPositiveSpectrum("envelope needs a spectrum with positive real parts")
        self.t_max = 50.0 / mu
        self.t = np.concatenate([[0.0], np.logspace(-6, math.log10(self.t_max), points)])
        self.E = np.stack([matrix_exp(-lam, t) for t in self.t])           # (K, m, m)
        self.h = np.diff(self.t)
        norm = float(np.max(np.sum(np.abs(lam), axis=1)))
        self.growth = np.exp(norm * self.h)
        self.lam2 = lam @ lam
        # uniform bound on ||exp(-Lambda s)||_inf, used past t_max
        self.kappa = float(np.max(np.sum(np.abs(self.E), axis=2)))

    def sup(self, v: np.ndarray) -> np.ndarray:
        f = self.E @ v                                                       # (K, m)
        # f - linear interpolant <= h^2/8 max|f''| on each cell, f'' = Lambda^2 f
        curv = np.abs(f @ self.lam2.T)
        cmax = np.maximum(curv[:-1], curv[1:]) * self.growth[:, None]
        cell = np.maximum(f[:-1], f[1:]) + (self.h ** 2 / 8.0)[:, None] * np.max(cmax, axis=1, keepdims=True)
        best = np.maximum(np.max(cell, axis=0), f[0])
        past = self.kappa * float(np.max(np.abs(f[-1])))
        return np.maximum(best, past)


@lru_cache(maxsize=32)
def _envelope(key: bytes, m: int) -> _Envelope:
    return _Envelope(np.frombuffer(key, dtype=float).reshape(m, m))


def sup_envelope(lam, v) -> np.ndarray:
    """Componentwise upper bound on sup_{t >= 0} exp(-Lambda t) v."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    if lam.shape != (len(v), len(v)):
        raise ValueError("Lambda and v have inconsistent shapes")
    if np.any(v <= 0):
        raise ValueError("v must be positive")
    env = _envelope(np.ascontiguousarray(lam).tobytes(), lam.shape[0])
    return env.sup(v)


def check_split(lam: np.ndarray, M: np.ndarray) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != lam.shape:
        raise ValueError(f"M has shape {M.shape}, Lambda has {lam.shape}")
    off = M - np.diag(np.diag(M))
    if np.any(off < 0):
        raise NotEssentiallyNonneg("M must be essentially non-negative")
    if np.min(np.linalg.eigvals(M).real) <= 0:
        raise NonPositiveSpectrum("eigenvalues of M need positive real parts")
    if np.min(np.linalg.eigvals(lam - M).real) <= 0:
        raise NonPositiveSpectrum("eigenvalues of Lambda - M need positive real parts")
    return M


def find_T_star(lam, M, l, step: float = T_GRID_STEP, t_max: float = T_MAX,
                resolution: float = T_RESOLUTION) -> float:
    """Smallest T from which sup_t exp(-Lambda t) exp(-(Lambda - M) T) l <= l holds."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    l = np.asarray(l, dtype=float).ravel()
    if lam.shape[0] == 1:
        return 0.0
    M = check_split(lam, M)
    D = lam - M
    lim = l * (1.0 + 1e-12)
    # exp(-D T) l may leave the positive orthant; the envelope bound holds for any sign
    env = _envelope(np.ascontiguousarray(lam).tobytes(), lam.shape[0])

    def ok(T: float) -> bool:
        return bool(np.all(env.sup(matrix_exp(-D, T) @ l) <= lim))

    grid = np.arange(0.0, t_max + step / 2, step)
    flags = np.array([ok(T) for T in grid])
    if flags.all():
        return 0.0
    last_bad = int(np.nonzero(~flags)[0][-1])
    if last_bad == len(grid) - 1:
        raise NoTStarWithinRange(f"condition still fails at T = {t_max}; check M")
    lo, hi = grid[last_bad], grid[last_bad + 1]
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return float(hi)


@dataclass(frozen=True)
class TailBoundModel:
    lam: np.ndarray
    alpha: float
    l: np.ndarray
    M: Optional[np.ndarray] = None
    T_star: float = 0.0

    @property
    def m(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def from_values(cls, lam, alpha: float, l, M=None, T_star: float | None = None) -> "TailBoundModel":
        lam = np.atleast_2d(np.asarray(lam, dtype=float))
        l = np.atleast_1d(np.asarray(l, dtype=float))
        if len(l) != lam.shape[0]:
            raise ValueError("l must have one entry per certificate component")
        if np.any(l <= 0):
            raise ValueError("unsafe level must be positive")
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        if lam.shape[0] == 1:
            return cls(lam, float(alpha), l, None, 0.0)
        M = check_split(lam, lam / 2.0 if M is None else M)
        if T_star is None:
            T_star = find_T_star(lam, M, l)
        return cls(lam, float(alpha), l, M, float(T_star))

    def raw(self, T: float) -> float:
        if T < self.T_star - 1e-12:
            raise TBelowTStar(f"T = {T} is below T* = {self.T_star}")
        if self.alpha == 0:
            return 0.0
        if self.m == 1:
            return self.alpha / (math.exp(self.lam[0, 0] * T) * self.l[0])
        return float(np.min(self.alpha / (matrix_exp(self.M, T) @ self.l)))


def tail_model(cert: ExpCertificate, M=None) -> TailBoundModel:
    return TailBoundModel.from_values(cert.lam.matrix, cert.alpha, cert.l, M)


def tail_bound_at(model: TailBoundModel, T: float) -> float:
    """Bound on P(the stopped process enters Xu at some time >= T), capped at 1."""
    return min(1.0, model.raw(T))


def find_T_tilde(model: TailBoundModel, epsilon: float, step: float = T_GRID_STEP,
                 resolution: float = T_RESOLUTION) -> float:
    """Smallest T >= T* whose tail bound is at most ``epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    T0 = model.T_star
    if model.raw(T0) <= epsilon:
        return T0
    if model.m == 1:
        lam = model.lam[0, 0]
        return max(T0, math.log(model.alpha / (model.l[0] * epsilon)) / lam)
    lo = T0
    hi = T0 + step
    while model.raw(hi) > epsilon:
        lo, hi = hi, hi + step
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if model.raw(mid) <= epsilon else (mid, hi)
    return float(hi)


def tail_curve(model: TailBoundModel, T_grid: Sequence[float]) -> list[tuple[float, float]]:
    return [(float(T), tail_bound_at(model, T)) for T in T_grid]
