"""Semidefinite programs in a small standard form, and the solver bridge.

Decision vector ``x = [free ; svec(Q_1) ; ... ; svec(Q_k)]`` with

    minimize  c.x   subject to  A x = b,  Q_k PSD.

``svec`` stacks the upper triangle column by column with off-diagonal
entries scaled by sqrt(2), so that ``<P, Q> = svec(P).svec(Q)``.

Two embedded interior-point backends are available: Clarabel (default) and
CVXOPT.  The environment variable ``SBC_SOLVER`` picks one when the settings
do not.  Problems can be exported to and imported from a plain sparse text
format for cross-checking elsewhere.
"""

from __future__ import annotations

import enum
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, TextIO

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
# a stalled interior-point run is still reported (as NearOptimal) when its
# last iterate satisfies these recomputed bounds
STALL_FEAS = 1e-6
STALL_GAP = 1e-3


def svec_size(n: int) -> int:
    return n * (n + 1) // 2


def svec_index(i: int, j: int) -> int:
    if i > j:
        i, j = j, i
    return j * (j + 1) // 2 + i


def svec(mat: np.ndarray) -> np.ndarray:
    n = mat.shape[0]
    out = np.empty(svec_size(n))
    for j in range(n):
        for i in range(j + 1):
            v = mat[i, j]
            out[svec_index(i, j)] = v if i == j else v * SQRT2
    return out


def smat(vec: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, n))
    for j in range(n):
        for i in range(j + 1):
            v = vec[svec_index(i, j)]
            if i == j:
                out[i, i] = v
            else:
                out[i, j] = out[j, i] = v / SQRT2
    return out


@dataclass
class SdpProblem:
    n_free: int
    block_sizes: tuple
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    free_labels: list = field(default_factory=list)
    block_labels: list = field(default_factory=list)
    row_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.block_sizes = tuple(int(s) for s in self.block_sizes)
        self.A = sp.csr_matrix(self.A)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.A.shape != (len(self.b), self.n_total):
            raise ValueError(f"A has shape {self.A.shape}, expected ({len(self.b)}, {self.n_total})")
        if self.c.shape != (self.n_total,):
            raise ValueError("objective length does not match variable count")

    @property
    def n_total(self) -> int:
        return self.n_free + sum(svec_size(s) for s in self.block_sizes)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def block_offsets(self) -> list[int]:
        offs, at = [], self.n_free
        for s in self.block_sizes:
            offs.append(at)
            at += svec_size(s)
        return offs

    def block_slice(self, k: int) -> slice:
        start = self.block_offsets()[k]
        return slice(start, start + svec_size(self.block_sizes[k]))

    def structure_signature(self) -> tuple:
        """Everything that defines the problem, for determinism checks."""
        A = self.A.tocoo()
        order = np.lexsort((A.col, A.row))
        return (self.n_free, self.block_sizes, tuple(A.row[order]), tuple(A.col[order]),
                tuple(A.data[order]), tuple(self.b), tuple(self.c))

    # debug text format ------------------------------------------------------
    def dump(self, out: TextIO | str | Path) -> None:
        if isinstance(out, (str, Path)):
            with open(out, "w") as fh:
                self.dump(fh)
            return
        out.write("# sbc sparse sdp v1\n")
        out.write(f"free {self.n_free}\n")
        out.write("blocks " + " ".join(str(s) for s in self.block_sizes) + "\n")
        out.write(f"rows {self.n_rows}\n")
        for j in np.flatnonzero(self.c):
            out.write(f"c {j} {float(self.c[j])!r}\n")
        for i in np.flatnonzero(self.b):
            out.write(f"b {i} {float(self.b[i])!r}\n")
        A = self.A.tocoo()
        for i, j, v in sorted(zip(A.row.tolist(), A.col.tolist(), A.data.tolist())):
            out.write(f"A {i} {j} {v!r}\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, src: TextIO | str | Path) -> "SdpProblem":
        if isinstance(src, (str, Path)) and Path(src).exists():
            with open(src) as fh:
                return cls.load(fh)
        if isinstance(src, str):
            src = io.StringIO(src)
        n_free, blocks, rows = 0, (), 0
        c_ent, b_ent, a_ent = [], [], []
        for lineno, line in enumerate(src, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            try:
                if tag == "free":
                    n_free = int(rest[0])
                elif tag == "blocks":
                    blocks = tuple(int(r) for r in rest)
                elif tag == "rows":
                    rows = int(rest[0])
                elif tag == "c":
                    c_ent.append((int(rest[0]), float(rest[1])))
                elif tag == "b":
                    b_ent.append((int(rest[0]), float(rest[1])))
                elif tag == "A":
                    a_ent.append((int(rest[0]), int(rest[1]), float(rest[2])))
                else:
                    raise ValueError(f"unknown tag {tag!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        n_total = n_free + sum(svec_size(s) for s in blocks)
        c = np.zeros(n_total)
        for j, v in c_ent:
            c[j] = v
        b = np.zeros(rows)
        for i, v in b_ent:
            b[i] = v
        if a_ent:
            r, cc, v = zip(*a_ent)
        else:
            r, cc, v = (), (), ()
        A = sp.csr_matrix((v, (r, cc)), shape=(rows, n_total))
        return cls(n_free, blocks, A, b, c)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    NEAR_OPTIMAL = "NearOptimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"

    @property
    def ok(self) -> bool:
        return self in (Status.OPTIMAL, Status.NEAR_OPTIMAL)


@dataclass
class SolverSettings:
    max_iters: int = 200
    tol_gap: float = 1e-8
    tol_feas: float = 1e-8
    verbosity: int = 0
    backend: Optional[str] = None

    def __post_init__(self):
        if self.tol_gap <= 0 or self.tol_feas <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def backend_id(self) -> str:
        return (self.backend or os.environ.get("SBC_SOLVER") or "clarabel").lower()


@dataclass
class SdpSolution:
    status: Status
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None          # equality multipliers, dual: max b.y, c - A^T y in K*
    primal_objective: float = math.nan
    dual_objective: float = math.nan
    primal_residual: float = math.nan
    dual_residual: float = math.nan
    gap: float = math.nan
    backend: str = ""
    backend_status: str = ""
    backend_residuals: dict = field(default_factory=dict)
    iterations: int = 0
    solve_time: float = 0.0

    def free_values(self, problem: SdpProblem) -> np.ndarray:
        return self.x[: problem.n_free]

    def block(self, problem: SdpProblem, k: int) -> np.ndarray:
        return smat(self.x[problem.block_slice(k)], problem.block_sizes[k])


def solve(problem: SdpProblem, settings: SolverSettings | None = None) -> SdpSolution:
    """Solve with the configured backend; solver failures come back as a status."""
    settings = settings or SolverSettings()
    backend = settings.backend_id()
    impl = _BACKENDS.get(backend)
    if impl is None:
        raise ValueError(f"unknown SDP backend {backend!r} (choose from {', '.join(_BACKENDS)})")
    try:
        sol = impl(problem, settings)
    except Exception as exc:  # backend crashed: report, never propagate
        log.warning("backend %s failed: %s", backend, exc)
        return SdpSolution(Status.NUMERICAL_FAILURE, backend=backend, backend_status=repr(exc))
    if sol.x is not None and sol.y is not None:
        _fill_metrics(problem, sol)
        if sol.status is Status.OPTIMAL and not _meets(sol, settings):
            sol.status = Status.NEAR_OPTIMAL
        if sol.status is Status.NUMERICAL_FAILURE:
            # stalled run: keep the last iterate only if it is usable
            if sol.primal_residual <= STALL_FEAS and sol.gap <= STALL_GAP:
                sol.status = Status.NEAR_OPTIMAL
            else:
                sol.x = sol.y = None
    return sol


def _meets(sol: SdpSolution, settings: SolverSettings) -> bool:
    return sol.gap <= settings.tol_gap and sol.primal_residual <= settings.tol_feas \
        and sol.dual_residual <= settings.tol_feas


def _fill_metrics(problem: SdpProblem, sol: SdpSolution) -> None:
    """Recompute objectives and residuals from the returned (x, y) only."""
    x, y = sol.x, sol.y
    A, b, c = problem.A, problem.b, problem.c
    p_obj = float(c @ x)
    d_obj = float(b @ y)
    scale_b = max(1.0, np.max(np.abs(b), initial=0.0))
    r_eq = np.max(np.abs(A @ x - b), initial=0.0) / (scale_b + np.max(np.abs(x), initial=0.0))
    min_eig_x = 0.0
    slack = c - A.T @ y
    r_free = np.max(np.abs(slack[: problem.n_free]), initial=0.0)
    min_eig_s = 0.0
    for k, n in enumerate(problem.block_sizes):
        sl = problem.block_slice(k)
        ex = np.linalg.eigvalsh(smat(x[sl], n))[0]
        es = np.linalg.eigvalsh(smat(slack[sl], n))[0]
        min_eig_x = min(min_eig_x, ex)
        min_eig_s = min(min_eig_s, es)
    scale_c = max(1.0, np.max(np.abs(c), initial=0.0))
    sol.primal_objective = p_obj
    sol.dual_objective = d_obj
    sol.primal_residual = max(r_eq, -min_eig_x / (1.0 + np.max(np.abs(x), initial=0.0)))
    sol.dual_residual = max(r_free, -min_eig_s) / (scale_c + np.max(np.abs(y), initial=0.0))
    sol.gap = abs(p_obj - d_obj) / (1.0 + abs(p_obj) + abs(d_obj))


# Clarabel ---------------------------------------------------------------------

_CLARABEL_STATUS = {
    "Solved": Status.OPTIMAL,
    "AlmostSolved": Status.NEAR_OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "AlmostPrimalInfeasible": Status.INFEASIBLE,
    "DualInfeasible": Status.UNBOUNDED,
    "AlmostDualInfeasible": Status.UNBOUNDED,
}


_CLARABEL_STALLED = {"NumericalError", "InsufficientProgress", "MaxIterations", "MaxTime"}


def _solve_clarabel(problem: SdpProblem, settings: SolverSettings) -> SdpSolution:
    import clarabel

    n, m = problem.n_total, problem.n_rows
    n_psd = n - problem.n_free
    E = sp.hstack([sp.csr_matrix((n_psd, problem.n_free)), -sp.identity(n_psd, format="csr")])
    A = sp.vstack([problem.A, E]).tocsc()
    b = np.concatenate([problem.b, np.zeros(n_psd)])
    cones = []
    if m:
        cones.append(clarabel.ZeroConeT(m))
    cones += [clarabel.PSDTriangleConeT(s) for s in problem.block_sizes]
    st = clarabel.DefaultSettings()
    st.verbose = settings.verbosity > 0
    st.max_iter = settings.max_iters
    st.tol_gap_abs = settings.tol_gap
    st.tol_gap_rel = settings.tol_gap
    st.tol_feas = settings.tol_feas
    st.presolve_enable = False
    P = sp.csc_matrix((n, n))
    res = clarabel.DefaultSolver(P, problem.c, A, b, cones, st).solve()
    name = str(res.status)
    status = _CLARABEL_STATUS.get(name, Status.NUMERICAL_FAILURE)
    sol = SdpSolution(status, backend="clarabel", backend_status=name,
                      iterations=res.iterations, solve_time=res.solve_time,
                      backend_residuals={"primal": res.r_prim, "dual": res.r_dual})
    if status.ok or name in _CLARABEL_STALLED:
        x = np.asarray(res.x)
        # PSD parts from the slack, which the solver keeps inside the cone;
        # any mismatch shows up in the recomputed equality residual instead
        x[problem.n_free:] = np.asarray(res.s)[m:]
        sol.x = x
        sol.y = -np.asarray(res.z)[:m]
    return sol


# CVXOPT -----------------------------------------------------------------------

_CVXOPT_STATUS = {
    "optimal": Status.OPTIMAL,
    "primal infeasible": Status.INFEASIBLE,
    "dual infeasible": Status.UNBOUNDED,
}


def _independent_rows(A: sp.csr_matrix, b: np.ndarray, tol: float = 1e-10):
    import scipy.linalg as sla

    dense = A.toarray()
    if dense.shape[0] == 0:
        return np.arange(0)
    _, R, piv = sla.qr(dense.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag.max(initial=0.0), 1.0)))
    return np.sort(piv[:rank])


def _solve_cvxopt(problem: SdpProblem, settings: SolverSettings) -> SdpSolution:
    import cvxopt
    from cvxopt import solvers

    keep = _independent_rows(problem.A, problem.b)
    A = problem.A[keep]
    b = problem.b[keep]
    rows, cols, vals = [], [], []
    r0 = 0
    for k, s in enumerate(problem.block_sizes):
        off = problem.block_slice(k).start
        for j in range(s):
            for i in range(j + 1):
                col = off + svec_index(i, j)
                w = 1.0 if i == j else 1.0 / SQRT2
                rows.append(r0 + i + j * s)
                cols.append(col)
                vals.append(-w)
                if i != j:
                    rows.append(r0 + j + i * s)
                    cols.append(col)
                    vals.append(-w)
        r0 += s * s
    G = cvxopt.spmatrix(vals, rows, cols, (r0, problem.n_total))
    h = cvxopt.matrix(0.0, (r0, 1))
    Ac = A.tocoo()
    Acv = cvxopt.spmatrix(Ac.data.tolist(), Ac.row.tolist(), Ac.col.tolist(), A.shape)
    opts = {"show_progress": settings.verbosity > 0, "maxiters": settings.max_iters,
            "abstol": settings.tol_gap, "reltol": settings.tol_gap, "feastol": settings.tol_feas}
    dims = {"l": 0, "q": [], "s": list(problem.block_sizes)}
    res = solvers.conelp(cvxopt.matrix(problem.c), G, h, dims, Acv, cvxopt.matrix(b), options=opts)
    name = res["status"]
    status = _CVXOPT_STATUS.get(name, Status.NUMERICAL_FAILURE)
    if name == "unknown" and res.get("x") is not None \
            and max(res["primal infeasibility"] or 1, res["dual infeasibility"] or 1) < 1e-6:
        status = Status.NEAR_OPTIMAL
    sol = SdpSolution(status, backend="cvxopt", backend_status=name,
                      iterations=res.get("iterations", 0),
                      backend_residuals={"primal": res.get("primal infeasibility"),
                                         "dual": res.get("dual infeasibility")})
    if status.ok:
        sol.x = np.asarray(res["x"]).ravel()
        y = np.zeros(problem.n_rows)
        y[keep] = -np.asarray(res["y"]).ravel()
        sol.y = y
    return sol


_BACKENDS = {"clarabel": _solve_clarabel, "cvxopt": _solve_cvxopt}
