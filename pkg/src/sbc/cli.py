"""Command-line front end: ``sbc verify|sweep|simulate PROBLEM``.

PROBLEM is a problem file path or the name of a bundled fixture
(``population``, ``oscillator``, ``nonlinear_drift``).

Exit codes: 0 certified, 2 no certificate found, 1 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .expcert import Infeasible, NonPositiveSpectrum, NotEssentiallyNonneg
from .pipeline import VerifyConfig, parse_grid, sweep, verify_unbounded, write_curve_csv
from .problem_file import ProblemFileError, ProblemSpec, builtin_path, load_problem
from .sdp import SolverSettings
from .simulate import SimConfig, simulate, write_sim_csv

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

log = logging.getLogger("sbc")


class UsageError(Exception):
    pass


def _matrix(text: str, flag: str):
    try:
        val = yaml.safe_load(text)
    except yaml.YAMLError:
        raise UsageError(f"{flag}: cannot read matrix {text!r}") from None
    if isinstance(val, (int, float)):
        return [[float(val)]]
    if isinstance(val, list) and val and all(isinstance(v, (int, float)) for v in val):
        val = [val]
    if not (isinstance(val, list) and val and all(isinstance(r, list) for r in val)):
        raise UsageError(f"{flag}: expected a number or a matrix like [[1, 0], [0, 1]]")
    try:
        return [[float(v) for v in row] for row in val]
    except (TypeError, ValueError):
        raise UsageError(f"{flag}: matrix entries must be numbers") from None


def _load(arg: str) -> ProblemSpec:
    path = Path(arg)
    if not path.exists() and path.suffix == "" and len(path.parts) == 1:
        path = builtin_path(arg)
    if not path.exists():
        raise UsageError(f"problem file not found: {arg}")
    return load_problem(path)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sbc", description="Stochastic barrier certificates for polynomial SDEs")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("problem", help="problem file or bundled fixture name")
        p.add_argument("--out-dir", default=".", help="directory for output files")

    def cert_flags(p):
        p.add_argument("--epsilon", type=float, help="tail budget used to pick T")
        p.add_argument("--deg-exp", type=int, help="degree of the exponential certificate")
        p.add_argument("--deg-timedep", type=int, help="degree of the time-dependent certificate")
        p.add_argument("--lambda", dest="lam", help="Lambda as a number or inline matrix")
        p.add_argument("--M", dest="M", help="split matrix M as an inline matrix")
        p.add_argument("--solver-tol", type=float, help="SDP gap and feasibility tolerance")

    def sim_flags(p):
        p.add_argument("--seed", type=int, help="simulation seed")
        p.add_argument("--trials", type=int, help="number of Monte-Carlo trials")
        p.add_argument("--dt", type=float, help="Euler-Maruyama step")
        p.add_argument("--horizon", type=float, help="simulated time span")

    v = sub.add_parser("verify", help="certify a bound on the probability of ever hitting Xu")
    common(v)
    cert_flags(v)
    v.add_argument("--T", type=float, help="fix the horizon T instead of choosing it from epsilon")
    v.add_argument("--T-grid", help="also sweep T over a:b:step")
    v.add_argument("--simulate", action="store_true", help="also run the Monte-Carlo check")
    sim_flags(v)

    s = sub.add_parser("sweep", help="bounded, tail and total bound over a grid of T")
    common(s)
    cert_flags(s)
    s.add_argument("--T-grid", help="grid a:b:step (default from the problem file)")

    m = sub.add_parser("simulate", help="Monte-Carlo estimate of the hitting probability")
    common(m)
    sim_flags(m)
    return ap


def _verify_config(spec: ProblemSpec, args) -> VerifyConfig:
    over = {
        "epsilon": args.epsilon,
        "deg_exp": args.deg_exp,
        "deg_timedep": args.deg_timedep,
        "lam": _matrix(args.lam, "--lambda") if args.lam else None,
        "M": _matrix(args.M, "--M") if args.M else None,
        "T": getattr(args, "T", None),
    }
    grid = getattr(args, "T_grid", None)
    if grid is not None:
        try:
            over["T_grid"] = parse_grid(grid)
        except ValueError as exc:
            raise UsageError(f"--T-grid: {exc}") from None
        if not over["T_grid"]:
            raise UsageError("--T-grid is empty")
    cfg = VerifyConfig.from_spec(spec, **over)
    if args.solver_tol is not None:
        if args.solver_tol <= 0:
            raise UsageError("--solver-tol must be positive")
        cfg.solver = replace(cfg.solver, tol_gap=args.solver_tol, tol_feas=args.solver_tol)
    if over["lam"] is not None and args.M is None:
        cfg.M = None        # a split given for the file's Lambda does not carry over
    return cfg


def _sim_config(spec: ProblemSpec, args) -> SimConfig:
    s = dict(spec.simulate)
    kw = {
        "dt": float(s.get("dt", 1e-3)),
        "horizon": float(s.get("horizon", 20.0)),
        "trials": int(s.get("trials", 100_000)),
        "seed": int(s.get("seed", 0)),
        "x0": s.get("x0"),
    }
    for key in ("seed", "trials", "dt", "horizon"):
        val = getattr(args, key, None)
        if val is not None:
            kw[key] = val
    if kw["trials"] < 1:
        raise UsageError("--trials must be at least 1")
    return SimConfig(**kw)


def _out(args, spec: ProblemSpec, suffix: str) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / f"{spec.name}.{suffix}"


def cmd_verify(args) -> int:
    spec = _load(args.problem)
    cfg = _verify_config(spec, args)
    if args.simulate:
        cfg.simulate = True
        cfg.sim = _sim_config(spec, args)
    rep = verify_unbounded(spec.problem, cfg)
    _out(args, spec, "report.txt").write_text(rep.to_text())
    _out(args, spec, "report.json").write_text(rep.to_json() + "\n")
    if rep.curve:
        write_curve_csv(rep.curve, _out(args, spec, "curve.csv"))
    if rep.simulation is not None:
        write_sim_csv(rep.simulation, _out(args, spec, "sim.csv"))
    sys.stdout.write(rep.to_text())
    for k, t in rep.timings.items():
        log.info("%s: %.1f s", k, t)
    return EXIT_OK if rep.ok else EXIT_INFEASIBLE


def cmd_sweep(args) -> int:
    spec = _load(args.problem)
    cfg = _verify_config(spec, args)
    if not cfg.T_grid:
        raise UsageError("no T grid: pass --T-grid a:b:step or set run.T_grid")
    rows = sweep(spec.problem, cfg, cfg.T_grid)
    path = _out(args, spec, "curve.csv")
    write_curve_csv(rows, path)
    print("T,bounded,tail,total")
    for r in rows:
        print(",".join(r.csv_row()) + (f"  # {r.note}" if r.note else ""))
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = _load(args.problem)
    cfg = _sim_config(spec, args)
    res = simulate(spec.problem, cfg)
    write_sim_csv(res, _out(args, spec, "sim.csv"))
    lo, hi = res.clopper_pearson_95
    print(f"{spec.name}: {res.hit_count}/{res.trials} hits, rate {res.empirical_rate:.6g}, "
          f"95% CI [{lo:.6g}, {hi:.6g}], 99% upper {res.upper_one_sided():.6g}")
    return EXIT_OK


_COMMANDS = {"verify": cmd_verify, "sweep": cmd_sweep, "simulate": cmd_simulate}


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except Infeasible as exc:
        print(f"sbc: no certificate: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UsageError, ProblemFileError, NotEssentiallyNonneg, NonPositiveSpectrum, ValueError, OSError) as exc:
        print(f"sbc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
