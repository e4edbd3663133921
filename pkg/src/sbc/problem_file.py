"""Problem files: YAML documents describing an SDE safety problem.

Layout::

    name: population
    system:
      n: 1
      m_w: 1
      drift: ["-x1"]
      diffusion: [["sqrt(2)/2*x1"]]
    sets:
      domain: ["x1 >= 0"]
      initial: ["x1 = 1"]
      unsafe: ["x1 >= 2"]
      boundary: [["x1 = 0"]]
      sample_box: [[0, 10]]
    certificates: {m: 1, lambda: [[1]], deg_exp: 4, deg_timedep: 4}
    run: {epsilon: 1.0e-3, T: 6, T_grid: "1:8:1", solver: {tol_gap: 1.0e-8}}
    simulate: {dt: 1.0e-3, horizon: 20, trials: 100000, seed: 0, x0: [1.0]}

Constraint strings use ``>=``, ``<=`` or ``=`` between two polynomials.
An empty list for a set means the whole space; ``unsafe: empty`` gives the
empty set.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .polynomial import (
    PolyMatrix,
    PolyVector,
    PolynomialSyntaxError,
    parse_polynomial,
    state_variables,
)
from .sde import SafetyProblem, SdeSystem, SemialgebraicSet


class ProblemFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.column = column


class Located(str):
    """String that remembers where it sat in the source (1-based)."""

    line: int
    column: int

    def __new__(cls, value: str, line: int, column: int):
        s = super().__new__(cls, value)
        s.line, s.column = line, column
        return s


def _convert(node) -> Any:
    if isinstance(node, yaml.ScalarNode):
        loader = yaml.SafeLoader("")
        value = loader.construct_object(node, deep=True)
        if isinstance(value, str):
            return Located(value, node.start_mark.line + 1, node.start_mark.column + 1)
        return value
    if isinstance(node, yaml.SequenceNode):
        return [_convert(n) for n in node.value]
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            out[str(_convert(k))] = _convert(v)
        return out
    raise ProblemFileError("unsupported YAML node")


def _where(obj) -> tuple:
    return (obj.line, obj.column) if isinstance(obj, Located) else (None, None)


@dataclass
class ProblemSpec:
    problem: SafetyProblem
    name: str
    certificates: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    source: Optional[str] = None


_REL = re.compile(r"(>=|<=|==|=)")


def parse_constraint(text: str, variables) -> tuple[str, Any]:
    """``lhs OP rhs`` -> ("ineq", lhs - rhs) or ("eq", lhs - rhs), sign-normalised."""
    line, col = _where(text)
    parts = _REL.split(str(text))
    if len(parts) != 3:
        raise ProblemFileError(f"expected one of >=, <=, = in constraint {str(text)!r}", line, col)
    lhs, op, rhs = parts
    try:
        left = parse_polynomial(lhs, variables)
    except PolynomialSyntaxError as exc:
        raise _located(exc, line, col, 0) from None
    try:
        right = parse_polynomial(rhs, variables)
    except PolynomialSyntaxError as exc:
        raise _located(exc, line, col, len(lhs) + len(op)) from None
    if op == "<=":
        return "ineq", right - left
    if op == ">=":
        return "ineq", left - right
    return "eq", left - right


def _located(exc: PolynomialSyntaxError, line, col, offset) -> ProblemFileError:
    column = None
    if col is not None:
        column = col + offset + (exc.column or 0)
    return ProblemFileError(str(exc), line, column)


def _poly(text, variables):
    line, col = _where(text)
    try:
        return parse_polynomial(str(text), variables)
    except PolynomialSyntaxError as exc:
        raise _located(exc, line, col, 0) from None


def _set(items, variables, what: str) -> SemialgebraicSet:
    if items is None or (isinstance(items, str) and items.strip() == "whole"):
        return SemialgebraicSet.whole(variables)
    if isinstance(items, str) and items.strip() == "empty":
        return SemialgebraicSet.nothing(variables)
    if not isinstance(items, list):
        line, col = _where(items)
        raise ProblemFileError(f"{what} must be a list of constraints", line, col)
    ineq, eq = [], []
    for it in items:
        kind, p = parse_constraint(it, variables)
        (ineq if kind == "ineq" else eq).append(p)
    return SemialgebraicSet(variables, tuple(ineq), tuple(eq))


def _require(d: dict, key: str, ctx: str):
    if not isinstance(d, dict) or key not in d:
        raise ProblemFileError(f"missing '{key}' in {ctx}")
    return d[key]


def load_problem_text(text: str, source: str | None = None) -> ProblemSpec:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ProblemFileError(str(getattr(exc, "problem", exc)),
                               mark.line + 1 if mark else None, mark.column + 1 if mark else None) from None
    if node is None:
        raise ProblemFileError("empty problem file")
    doc = _convert(node)
    if not isinstance(doc, dict):
        raise ProblemFileError("problem file must be a mapping")
    name = str(doc.get("name") or (Path(source).name.split(".")[0] if source else "problem"))
    system = _require(doc, "system", "document")
    drift_src = _require(system, "drift", "system")
    n = int(system.get("n", len(drift_src)))
    if len(drift_src) != n:
        raise ProblemFileError(f"drift has {len(drift_src)} entries, n = {n}", *_where(drift_src))
    variables = state_variables(n)
    drift = PolyVector(_poly(s, variables) for s in drift_src)
    diff_src = _require(system, "diffusion", "system")
    if not isinstance(diff_src, list) or not all(isinstance(r, list) for r in diff_src):
        raise ProblemFileError("diffusion must be a list of rows")
    m_w = int(system.get("m_w", len(diff_src[0]) if diff_src else 0))
    if len(diff_src) != n or any(len(r) != m_w for r in diff_src):
        raise ProblemFileError(f"diffusion must be {n} x {m_w}")
    diffusion = PolyMatrix([[_poly(s, variables) for s in row] for row in diff_src])
    sets = _require(doc, "sets", "document")
    domain = _set(sets.get("domain"), variables, "domain")
    initial = _set(_require(sets, "initial", "sets"), variables, "initial")
    unsafe = _set(_require(sets, "unsafe", "sets"), variables, "unsafe")
    boundary = tuple(_set(piece, variables, "boundary") for piece in (sets.get("boundary") or []))
    flip = sets.get("unsafe_flip")
    box = sets.get("sample_box")
    try:
        problem = SafetyProblem(SdeSystem(drift, diffusion), domain, initial, unsafe, boundary,
                                name, int(flip) if flip is not None else None,
                                tuple(tuple(float(v) for v in row) for row in box) if box else None)
    except ValueError as exc:
        raise ProblemFileError(str(exc)) from None
    return ProblemSpec(problem, name, dict(doc.get("certificates") or {}), dict(doc.get("run") or {}),
                       dict(doc.get("simulate") or {}), source)


def load_problem(path: str | Path) -> ProblemSpec:
    path = Path(path)
    return load_problem_text(path.read_text(), str(path))


def builtin_path(name: str) -> Path:
    """Path of a fixture shipped with the package (``population`` etc.)."""
    from importlib import resources

    return Path(str(resources.files("sbc") / "problems" / f"{name}.prob"))
