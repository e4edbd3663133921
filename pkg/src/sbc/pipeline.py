"""Unbounded-time verification: tail bound from T on plus a bound on [0, T].

P(ever hit Xu) <= P(hit within [0, T]) + P(hit at some t >= T).  The second
term comes from an exponential certificate, the first from a time-dependent
certificate on the reduced horizon.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .expcert import (
    ExpCertificate,
    Infeasible,
    check_certificate_sampling,
    synthesize_exp_ladder,
    validate_lambda,
)
from .sde import SafetyProblem
from .sdp import SolverSettings
from .simulate import SimConfig, SimResult, simulate
from .sos import ValidationFailed
from .tail import (
    NoTStarWithinRange,
    TailBoundModel,
    find_T_tilde,
    tail_bound_at,
    tail_model,
)
from .timedep import TimeDepCertificate, bounded_bound, check_timedep_sampling, synthesize_timedep

log = logging.getLogger(__name__)

CURVE_HEADER = ("T", "bounded", "tail", "total")

CAVEAT_NUMERIC = ("Certificates come from a floating-point SDP solve; they were checked by "
                  "recomputing the SOS identities and Gram eigenvalues and by sampling, "
                  "which is strong evidence but not an exact proof.")
CAVEAT_LIPSCHITZ = ("The drift or diffusion is nonlinear, so it is not globally Lipschitz; "
                    "the bound assumes the stopped process is well defined.")


@dataclass
class VerifyConfig:
    epsilon: float = 1e-3
    lam: Optional[list] = None
    M: Optional[list] = None
    deg_exp: int = 4
    deg_timedep: int = 4
    mult_deg_exp: Optional[int] = None
    mult_deg_timedep: Optional[int] = None
    T: Optional[float] = None
    T_grid: Optional[list] = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    simulate: bool = False
    sim: Optional[SimConfig] = None
    check_samples: int = 10_000

    def __post_init__(self):
        if self.T is None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive when T is chosen automatically")
        if self.T is not None and self.T < 0:
            raise ValueError("T must be non-negative")

    @classmethod
    def from_spec(cls, spec, **overrides) -> "VerifyConfig":
        """Defaults from a problem file's certificates/run sections."""
        cert, run = spec.certificates, spec.run
        kw = {
            "lam": cert.get("lambda"),
            "M": cert.get("M"),
            "deg_exp": int(cert.get("deg_exp", 4)),
            "deg_timedep": int(cert.get("deg_timedep", 4)),
            "mult_deg_exp": cert.get("mult_deg_exp"),
            "mult_deg_timedep": cert.get("mult_deg_timedep"),
            "epsilon": float(run.get("epsilon", 1e-3)),
            "T": float(run["T"]) if run.get("T") is not None else None,
            "T_grid": parse_grid(run["T_grid"]) if run.get("T_grid") else None,
        }
        solver = run.get("solver") or {}
        kw["solver"] = SolverSettings(**{k: solver[k] for k in ("max_iters", "tol_gap", "tol_feas")
                                         if k in solver})
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def parse_grid(text) -> list[float]:
    """``a:b:step`` (inclusive) or a list of numbers."""
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like a:b:step, got {text!r}")
    a, b, step = (float(p) for p in parts)
    if step <= 0:
        raise ValueError("grid step must be positive")
    if b < a:
        return []
    count = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + k * step, 12) for k in range(count)]


@dataclass
class SweepRow:
    T: float
    bounded: float
    tail: float
    total: float
    note: str = ""

    def csv_row(self) -> list[str]:
        return [_fmt(v) for v in (self.T, self.bounded, self.tail, self.total)]


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


@dataclass
class BoundReport:
    name: str
    status: str = "certified"          # certified | partial | trivial
    failed_stage: Optional[str] = None
    message: str = ""
    attempts: list = field(default_factory=list)
    exp: Optional[ExpCertificate] = None
    timedep: Optional[TimeDepCertificate] = None
    model: Optional[TailBoundModel] = None
    T_star: Optional[float] = None
    T_tilde: Optional[float] = None
    T_source: str = ""
    tail: Optional[float] = None
    bounded: Optional[float] = None
    total: Optional[float] = None
    curve: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    caveats: list = field(default_factory=list)
    simulation: Optional[SimResult] = None
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in ("certified", "trivial")

    def to_dict(self, timings: bool = False) -> dict:
        """Structured report; wall-clock timings only on request so files stay reproducible."""
        d = {
            "name": self.name,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "message": self.message,
            "retry_ladder": self.attempts,
            "T_star": self.T_star,
            "T_tilde": self.T_tilde,
            "T_source": self.T_source,
            "tail_bound": self.tail,
            "bounded_bound": self.bounded,
            "total_bound": self.total,
            "exp_certificate": self.exp.to_dict() if self.exp is not None else None,
            "timedep_certificate": self.timedep.to_dict() if self.timedep is not None else None,
            "split_matrix_M": self.model.M.tolist() if self.model is not None and self.model.M is not None
            else None,
            "curve": [{"T": r.T, "bounded": _num(r.bounded), "tail": _num(r.tail), "total": _num(r.total),
                       "note": r.note} for r in self.curve],
            "diagnostics": self.diagnostics,
            "caveats": self.caveats,
        }
        if timings:
            d["timings"] = self.timings
        if self.simulation is not None:
            d["simulation"] = self.simulation.as_row()
        return d

    def to_json(self, timings: bool = False) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=False, default=_json_default)

    def to_text(self) -> str:
        out = [f"problem: {self.name}", f"status: {self.status}"]
        if self.failed_stage:
            out.append(f"failed stage: {self.failed_stage}")
        if self.message:
            out.append(f"message: {self.message}")
        if self.exp is not None:
            c = self.exp
            out += ["", "exponential certificate",
                    f"  Lambda = {c.lam.tolist()}  degree = {c.degree}",
                    f"  alpha = {c.alpha:.6g}  l = {[float(f'{v:.6g}') for v in c.l]}"
                    f"  alpha/l = {c.ratio:.6g}",
                    f"  max SOS residual = {c.max_residual():.3g}  min Gram eigenvalue = "
                    f"{c.min_eigenvalue():.3g}"]
        if self.T_star is not None:
            out += ["", "tail bound",
                    f"  T* = {self.T_star:.6g}"]
            if self.model is not None and self.model.M is not None:
                out.append(f"  M = {self.model.M.tolist()}")
        if self.T_tilde is not None:
            out.append(f"  T = {self.T_tilde:.6g} ({self.T_source})")
        if self.tail is not None:
            out.append(f"  P(hit at some t >= T) <= {self.tail:.6g}")
        if self.timedep is not None:
            h = self.timedep
            out += ["", "time-dependent certificate",
                    f"  horizon T = {h.T:.6g}  degree = {h.degree}  beta = {h.beta:.6g}",
                    f"  max SOS residual = {h.max_residual():.3g}  min Gram eigenvalue = "
                    f"{h.min_eigenvalue():.3g}"]
        if self.bounded is not None:
            out.append(f"  P(hit within [0, T]) <= {self.bounded:.6g}")
        if self.total is not None:
            out += ["", f"P(ever hit the unsafe set) <= {self.total:.6g}"]
        if self.curve:
            out += ["", "sweep (T, bounded, tail, total)"]
            for r in self.curve:
                cells = "  ".join(_fmt(v) or "-" for v in (r.T, r.bounded, r.tail, r.total))
                out.append(f"  {cells}" + (f"  [{r.note}]" if r.note else ""))
        if self.simulation is not None:
            s = self.simulation
            out += ["", "Monte-Carlo",
                    f"  trials = {s.trials}  hits = {s.hit_count}  blow-ups = {s.blowups}",
                    f"  rate = {s.empirical_rate:.6g}  99% upper = {s.upper_one_sided():.6g}"]
        if self.attempts:
            out += ["", "retry ladder"]
            out += [f"  Lambda = {a['lambda']} degree = {a['degree']}: {a['result']}" for a in self.attempts]
        if self.diagnostics:
            out += ["", "validation"]
            for k, v in self.diagnostics.items():
                out.append(f"  {k}: {v}")
        if self.caveats:
            out += ["", "caveats"] + [f"  - {c}" for c in self.caveats]
        return "\n".join(out) + "\n"


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_curve_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def _caveats(problem: SafetyProblem) -> list[str]:
    notes = [CAVEAT_NUMERIC]
    sysm = problem.system
    degs = [p.degree() for p in sysm.drift] + [sysm.diffusion[i, j].degree()
                                               for i in range(problem.n) for j in range(sysm.m_w)]
    if max(degs, default=0) > 1:
        notes.append(CAVEAT_LIPSCHITZ)
    return notes


def _sampling_summary(rep) -> dict:
    return {k: f"{v[0]:.3g}" for k, v in rep.worst.items()}


def verify_unbounded(problem: SafetyProblem, config: VerifyConfig) -> BoundReport:
    """Exponential certificate, T*, T, time-dependent certificate, combined bound.

    Stage failures come back as a partial report naming the stage.
    """
    rep = BoundReport(problem.name or "problem", caveats=_caveats(problem))
    if problem.unsafe_in_domain().empty:
        rep.status, rep.T_star, rep.T_tilde, rep.T_source = "trivial", 0.0, 0.0, "empty unsafe set"
        rep.tail = rep.bounded = rep.total = 0.0
        rep.message = "the unsafe set does not meet the domain"
        return rep
    if config.lam is None:
        raise ValueError("no Lambda given (problem file certificates.lambda or --lambda)")
    lam = validate_lambda(config.lam)

    def fail(stage: str, msg: str) -> BoundReport:
        rep.status, rep.failed_stage, rep.message = "partial", stage, msg
        log.warning("%s stage failed: %s", stage, msg)
        return rep

    t0 = time.perf_counter()
    try:
        cert, rep.attempts = synthesize_exp_ladder(problem, lam, config.deg_exp, config.solver,
                                                   multiplier_degree=config.mult_deg_exp)
    except Infeasible as exc:
        rep.attempts = exc.attempts
        rep.timings["exp"] = time.perf_counter() - t0
        return fail("exponential certificate", str(exc))
    rep.exp = cert
    rep.timings["exp"] = time.perf_counter() - t0
    if cert.lam.tolist() != lam.tolist():
        rep.caveats.append(f"Lambda was reduced to {cert.lam.tolist()} by the retry ladder.")
    chk = check_certificate_sampling(cert, problem, config.check_samples, raise_on_violation=False)
    rep.diagnostics["exp sampling worst slack"] = _sampling_summary(chk)
    if not chk.clean:
        return fail("exponential certificate validation", "sampling found a violated condition")

    t0 = time.perf_counter()
    M = config.M
    if M is not None and cert.lam.tolist() != lam.tolist():
        M = None            # the given split was for the original Lambda
    try:
        model = tail_model(cert, M)
    except NoTStarWithinRange as exc:
        return fail("T*", str(exc))
    except ValueError as exc:
        return fail("T*", f"split matrix M rejected: {exc}")
    rep.model = model
    rep.T_star = model.T_star
    rep.timings["T_star"] = time.perf_counter() - t0

    if config.T is not None:
        if config.T < model.T_star:
            return fail("T", f"T = {config.T} is below T* = {model.T_star:.6g}")
        T, rep.T_source = float(config.T), "fixed by the user"
    else:
        T, rep.T_source = find_T_tilde(model, config.epsilon), f"smallest T with tail <= {config.epsilon:g}"
    rep.T_tilde = T
    rep.tail = tail_bound_at(model, T)

    t0 = time.perf_counter()
    if T == 0:
        # the tail bound already covers every t >= 0
        rep.bounded = 0.0
    else:
        try:
            h = synthesize_timedep(problem, T, config.deg_timedep, config.solver,
                                   multiplier_degree=config.mult_deg_timedep)
        except (Infeasible, ValidationFailed) as exc:
            rep.timings["timedep"] = time.perf_counter() - t0
            return fail("time-dependent certificate", str(exc))
        rep.timedep = h
        chk = check_timedep_sampling(h, problem, config.check_samples, raise_on_violation=False)
        rep.diagnostics["timedep sampling worst slack"] = _sampling_summary(chk)
        rep.timings["timedep"] = time.perf_counter() - t0
        if not chk.clean:
            return fail("time-dependent certificate validation", "sampling found a violated condition")
        rep.bounded = bounded_bound(h)
    rep.total = min(1.0, rep.bounded + rep.tail)

    if config.T_grid:
        t0 = time.perf_counter()
        rep.curve = sweep(problem, config, config.T_grid, model=model)
        rep.timings["sweep"] = time.perf_counter() - t0
    if config.simulate:
        t0 = time.perf_counter()
        sim = config.sim or SimConfig()
        sim = replace(sim, horizon=max(sim.horizon, T))
        rep.simulation = simulate(problem, sim)
        rep.timings["simulate"] = time.perf_counter() - t0
    return rep


def sweep(problem: SafetyProblem, config: VerifyConfig, T_grid: Sequence[float],
          model: TailBoundModel | None = None) -> list[SweepRow]:
    """Rows (T, bounded, tail, total) for each grid point, one timedep solve per T.

    The exponential certificate is shared by all rows.  Points below T* and
    failed solves are kept as rows with empty entries and a note.
    """
    grid = [float(T) for T in T_grid]
    if not grid:
        raise ValueError("empty T grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("T grid must be strictly increasing")
    if any(T <= 0 for T in grid):
        raise ValueError("T grid values must be positive")
    if problem.unsafe_in_domain().empty:
        return [SweepRow(T, 0.0, 0.0, 0.0) for T in grid]
    if model is None:
        cert, _ = synthesize_exp_ladder(problem, validate_lambda(config.lam), config.deg_exp, config.solver,
                                        multiplier_degree=config.mult_deg_exp)
        model = tail_model(cert, config.M)
    rows = []
    for T in grid:
        if T < model.T_star:
            rows.append(SweepRow(T, math.nan, math.nan, math.nan, f"below T* = {model.T_star:.4g}"))
            continue
        tail = tail_bound_at(model, T)
        try:
            h = synthesize_timedep(problem, T, config.deg_timedep, config.solver,
                                   multiplier_degree=config.mult_deg_timedep)
        except (Infeasible, ValidationFailed) as exc:
            rows.append(SweepRow(T, math.nan, tail, math.nan, f"time-dependent certificate failed: {exc}"))
            continue
        b = bounded_bound(h)
        rows.append(SweepRow(T, b, tail, min(1.0, b + tail)))
    return rows
