"""Monte-Carlo simulation of the stopped process with unsafe-set hitting.

Euler-Maruyama on a fixed grid; a trial freezes when it leaves X and
counts as a hit when a grid point lands in Xu.  The step loop is a numba
kernel generated from the problem's polynomials.  Gaussian increments come
from Philox4x32-10 keyed by the seed with the trial index in the counter,
so every trial has its own stream and the result does not depend on how
trials are scheduled across threads.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from scipy import stats

from .polynomial import Polynomial
from .sde import SafetyProblem, SemialgebraicSet

log = logging.getLogger(__name__)

BLOCK = 10_000


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 20.0
    trials: int = 100_000
    seed: int = 0
    x0: Optional[tuple] = None          # point mass; otherwise uniform over X0
    scheme: str = "euler_maruyama"
    workers: int = 0                    # numba threads; 0 keeps the default

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon >= 0:
            raise ValueError("horizon must be non-negative")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))


@dataclass
class SimResult:
    hit_count: int
    trials: int
    blowups: int
    mean_stop_time: float
    hit_times: np.ndarray = field(repr=False)      # first hit time, nan when none
    config: Optional[SimConfig] = field(default=None, repr=False)

    @property
    def empirical_rate(self) -> float:
        return self.hit_count / self.trials

    @property
    def clopper_pearson_95(self) -> tuple[float, float]:
        return clopper_pearson(self.hit_count, self.trials, 0.95)

    def upper_one_sided(self, level: float = 0.99) -> float:
        """One-sided Clopper-Pearson upper limit."""
        k, n = self.hit_count, self.trials
        if k >= n:
            return 1.0
        return float(stats.beta.ppf(level, k + 1, n - k))

    def standard_error(self) -> float:
        p = self.empirical_rate
        return math.sqrt(max(p * (1 - p), 1.0 / self.trials) / self.trials)

    def as_row(self) -> dict:
        lo, hi = self.clopper_pearson_95
        return {"trials": self.trials, "hits": self.hit_count, "blowups": self.blowups,
                "rate": f"{self.empirical_rate:.6g}", "cp95_lo": f"{lo:.6g}", "cp95_hi": f"{hi:.6g}",
                "cp99_upper": f"{self.upper_one_sided():.6g}", "mean_stop_time": f"{self.mean_stop_time:.6g}"}


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


# Philox4x32-10 -----------------------------------------------------------------

_MASK = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_S32 = np.uint64(32)


@numba.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _S32) ^ c1 ^ k0) & _MASK, p1 & _MASK, ((p0 >> _S32) ^ c3 ^ k1) & _MASK, p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@numba.njit(cache=True, inline="always")
def _normals4(trial, draw, k0, k1, out):
    """Four standard normals for (trial, draw) by Box-Muller."""
    a, b, c, d = philox4x32(np.uint64(draw) & _MASK, np.uint64(draw) >> _S32,
                            np.uint64(trial) & _MASK, np.uint64(trial) >> _S32, k0, k1)
    r1 = math.sqrt(-2.0 * math.log((float(a) + 0.5) * 2.3283064365386963e-10))
    t1 = 6.283185307179586 * (float(b) + 0.5) * 2.3283064365386963e-10
    r2 = math.sqrt(-2.0 * math.log((float(c) + 0.5) * 2.3283064365386963e-10))
    t2 = 6.283185307179586 * (float(d) + 0.5) * 2.3283064365386963e-10
    out[0] = r1 * math.cos(t1)
    out[1] = r1 * math.sin(t1)
    out[2] = r2 * math.cos(t2)
    out[3] = r2 * math.sin(t2)


def trial_normals(seed: int, trial: int, count: int) -> np.ndarray:
    """The first ``count`` normals of one trial's stream (for tests)."""
    k0, k1 = _key(seed)
    out = np.empty(4 * ((count + 3) // 4))
    buf = np.empty(4)
    for d in range(len(out) // 4):
        _normals4(trial, d, k0, k1, buf)
        out[4 * d:4 * d + 4] = buf
    return out[:count]


def _key(seed: int) -> tuple:
    seed = int(seed)
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


# kernel generation --------------------------------------------------------------

def _expr(p: Polynomial, names: Sequence[str]) -> str:
    parts = []
    for m, c in p.terms():
        c = float(c)
        if c == 0.0:
            continue
        factors = [names[j] for j, e in enumerate(m) for _ in range(e)]
        parts.append("*".join([f"({c!r})"] + factors))
    return " + ".join(parts) if parts else "0.0"


def _set_expr(S: SemialgebraicSet, names: Sequence[str]) -> str:
    if S.empty:
        return "False"
    tests = [f"({_expr(g, names)}) >= 0.0" for g in S.inequalities]
    tests += [f"abs({_expr(h, names)}) <= 1e-9" for h in S.equalities]
    return " and ".join(tests) if tests else "True"


_TEMPLATE = """
def kernel(X0, first, k0, k1, dt, steps, hit_time, end_time, blow):
    sq = math.sqrt(dt)
    for r in numba.prange(X0.shape[0]):
        trial = first + r
        z = np.empty(4)
        draw = 0
        used = 4
{load}
        t = 0.0
        if {unsafe}:
            hit_time[r] = 0.0
            end_time[r] = 0.0
            continue
        if not ({domain}):
            end_time[r] = 0.0
            continue
        end_time[r] = steps * dt
        for k in range(1, steps + 1):
{noise}
{update}
            t = k * dt
            if not ({finite}):
                blow[r] = True
                hit_time[r] = t
                end_time[r] = t
                break
{commit}
            if {unsafe}:
                hit_time[r] = t
                end_time[r] = t
                break
            if not ({domain}):
                end_time[r] = t
                break
"""


def kernel_source(problem: SafetyProblem) -> str:
    n, mw = problem.n, problem.system.m_w
    x = [f"x{i}" for i in range(n)]
    ind = " " * 12
    load = "\n".join(f"        x{i} = X0[r, {i}]" for i in range(n))
    noise = []
    for j in range(mw):
        noise += [f"{ind}if used == 4:", f"{ind}    _normals4(trial, draw, k0, k1, z)",
                  f"{ind}    draw += 1", f"{ind}    used = 0", f"{ind}w{j} = z[used]", f"{ind}used += 1"]
    update = []
    for i in range(n):
        inc = [f"({_expr(problem.system.drift[i], x)}) * dt"]
        for j in range(mw):
            sij = problem.system.diffusion[i, j]
            if not sij.is_zero():
                inc.append(f"({_expr(sij, x)}) * sq * w{j}")
        update.append(f"{ind}y{i} = x{i} + " + " + ".join(inc))
    finite = " and ".join(f"math.isfinite(y{i})" for i in range(n))
    commit = "\n".join(f"{ind}x{i} = y{i}" for i in range(n))
    return _TEMPLATE.format(load=load, noise="\n".join(noise) or f"{ind}pass", update="\n".join(update),
                            finite=finite, commit=commit, unsafe=_set_expr(problem.unsafe, x),
                            domain=_set_expr(problem.domain, x))


_KERNELS: dict = {}


def _kernel(problem: SafetyProblem):
    src = kernel_source(problem)
    fn = _KERNELS.get(src)
    if fn is None:
        scope = {"math": math, "np": np, "numba": numba, "_normals4": _normals4}
        exec(compile(src, "<sbc-sim-kernel>", "exec"), scope)
        fn = numba.njit(parallel=True, error_model="numpy")(scope["kernel"])
        _KERNELS[src] = fn
    return fn


def _initial_states(problem: SafetyProblem, config: SimConfig) -> np.ndarray:
    trials = int(config.trials)
    if config.x0 is not None:
        if len(config.x0) != problem.n:
            raise ValueError("x0 has the wrong dimension")
        return np.tile(np.asarray(config.x0, dtype=float), (trials, 1))
    # initial points are drawn per fixed-size block from a stream keyed by
    # (seed, block), so trial i always gets the same start
    S = problem.initial_in_domain()
    out = []
    for block, start in enumerate(range(0, trials, BLOCK)):
        count = min(BLOCK, trials - start)
        rng = np.random.Generator(np.random.Philox(key=[int(config.seed), block]))
        pts = S.sample(count, problem.box(), rng)
        if len(pts) < count:
            raise ValueError("could not sample the initial set; give x0 or a sample_box")
        out.append(pts)
    return np.concatenate(out)


def simulate(problem: SafetyProblem, config: SimConfig) -> SimResult:
    """Estimate P(hit Xu within the horizon) for the stopped process."""
    trials = int(config.trials)
    X0 = np.ascontiguousarray(_initial_states(problem, config), dtype=float)
    steps = int(round(config.horizon / config.dt))
    hit_time = np.full(trials, np.nan)
    end_time = np.zeros(trials)
    blow = np.zeros(trials, dtype=np.bool_)
    k0, k1 = _key(config.seed)
    kern = _kernel(problem)
    if config.workers:
        numba.set_num_threads(min(int(config.workers), numba.config.NUMBA_NUM_THREADS))
    with warnings.catch_warnings():
        # numba complains about an old TBB before falling back to another layer
        warnings.filterwarnings("ignore", message=".*TBB.*")
        kern(X0, 0, k0, k1, float(config.dt), steps, hit_time, end_time, blow)
    hits = int(np.sum(~np.isnan(hit_time)))
    if blow.any():
        log.warning("%d trials blew up and were counted as hits", int(blow.sum()))
    return SimResult(hits, trials, int(blow.sum()), float(np.mean(end_time)), hit_time, config)


def empirical_curve(problem: SafetyProblem, config: SimConfig, T_grid: Sequence[float],
                    result: SimResult | None = None) -> list[tuple[float, float]]:
    """Fraction of trials whose first hit happens at time >= T, per grid T.

    Only first hits are seen, so this undercounts the event "some hit after
    T" for trials that also hit earlier.
    """
    res = result if result is not None else simulate(problem, config)
    ht = res.hit_times
    return [(float(T), float(np.sum(ht >= T)) / res.trials) for T in T_grid]


def write_sim_csv(result: SimResult, path) -> None:
    row = result.as_row()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)


def write_curve_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "rate"])
        for T, r in curve:
            w.writerow([f"{T:.6g}", f"{r:.6g}"])
