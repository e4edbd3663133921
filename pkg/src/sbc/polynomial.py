"""Multivariate polynomials over a named, ordered variable context.

Terms are stored as a mapping from dense exponent tuples to coefficients.
Coefficients are either ``float`` or ``fractions.Fraction``; arithmetic on two
exact polynomials stays exact, anything touching a float becomes float.

Canonical term order is graded lexicographic (total degree first, then
``x1 > x2 > ...``), which is what ``terms()`` and ``str()`` report.
"""

from __future__ import annotations

import ast
import math
from fractions import Fraction
from itertools import combinations_with_replacement
from numbers import Rational, Real
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

Coeff = Union[float, Fraction]
Monomial = tuple  # dense exponent tuple, one entry per context variable

TIME = "t"


class VariableMismatch(ValueError):
    """Operands live in different variable contexts."""


class PolynomialSyntaxError(ValueError):
    def __init__(self, message: str, column: int | None = None):
        self.column = column
        where = f" (column {column})" if column is not None else ""
        super().__init__(message + where)


def _coerce(c) -> Coeff:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, bool):
        return Fraction(int(c))
    if isinstance(c, int):
        return Fraction(c)
    if isinstance(c, Rational):
        return Fraction(c.numerator, c.denominator)
    if isinstance(c, Real):
        return float(c)
    raise TypeError(f"unsupported coefficient type {type(c).__name__}")


def _is_scalar(c) -> bool:
    return isinstance(c, (Real, Fraction)) and not isinstance(c, Polynomial)


def grlex_key(m: Monomial):
    return (sum(m), tuple(-e for e in m))


def monomial_degree(m: Monomial) -> int:
    return sum(m)


def monomial_basis(n_vars: int, degree: int) -> list[Monomial]:
    """All monomials in ``n_vars`` variables of total degree <= ``degree``, grlex order."""
    if n_vars < 1:
        raise ValueError("n_vars must be >= 1")
    if degree < 0:
        return []
    out = []
    for d in range(degree + 1):
        block = []
        for combo in combinations_with_replacement(range(n_vars), d):
            e = [0] * n_vars
            for i in combo:
                e[i] += 1
            block.append(tuple(e))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


def monomial_str(m: Monomial, variables: Sequence[str]) -> str:
    parts = []
    for name, e in zip(variables, m):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts)


class Polynomial:
    """Immutable multivariate polynomial.

    >>> x = Polynomial.var("x1", ("x1",))
    >>> str((x + 1) * (x - 1))
    'x1^2 - 1'
    """

    __slots__ = ("_terms", "variables", "_hash")

    def __init__(self, terms: Mapping[Monomial, Coeff] | None = None,
                 variables: Sequence[str] = ("x1",)):
        variables = tuple(variables)
        if len(set(variables)) != len(variables):
            raise ValueError(f"duplicate variable names in {variables}")
        n = len(variables)
        clean: dict = {}
        for m, c in (terms or {}).items():
            m = tuple(int(e) for e in m)
            if len(m) != n:
                raise ValueError(f"monomial {m} does not match {n} variables")
            if any(e < 0 for e in m):
                raise ValueError(f"negative exponent in {m}")
            c = _coerce(c)
            if m in clean:
                c = clean[m] + c
            clean[m] = c
        self._terms = {m: c for m, c in clean.items() if c != 0}
        self.variables = variables
        self._hash = None

    # construction -----------------------------------------------------------
    @classmethod
    def constant(cls, c, variables: Sequence[str]) -> "Polynomial":
        variables = tuple(variables)
        return cls({(0,) * len(variables): c}, variables)

    @classmethod
    def zero(cls, variables: Sequence[str]) -> "Polynomial":
        return cls({}, variables)

    @classmethod
    def var(cls, which: int | str, variables: Sequence[str]) -> "Polynomial":
        variables = tuple(variables)
        i = _index(which, variables)
        e = [0] * len(variables)
        e[i] = 1
        return cls({tuple(e): Fraction(1)}, variables)

    @classmethod
    def monomial(cls, m: Monomial, variables: Sequence[str], c=1) -> "Polynomial":
        return cls({tuple(m): c}, variables)

    # inspection -------------------------------------------------------------
    @property
    def nvars(self) -> int:
        return len(self.variables)

    def terms(self) -> list[tuple[Monomial, Coeff]]:
        return sorted(self._terms.items(), key=lambda mc: grlex_key(mc[0]))

    def coefficients(self) -> dict:
        return dict(self._terms)

    def coeff(self, m: Monomial) -> Coeff:
        return self._terms.get(tuple(m), 0)

    def monomials(self) -> list[Monomial]:
        return [m for m, _ in self.terms()]

    def degree(self) -> int:
        """Total degree; the zero polynomial has degree -1."""
        if not self._terms:
            return -1
        return max(sum(m) for m in self._terms)

    def degree_in(self, which: int | str) -> int:
        i = _index(which, self.variables)
        if not self._terms:
            return -1
        return max(m[i] for m in self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def is_exact(self) -> bool:
        return all(isinstance(c, Fraction) for c in self._terms.values())

    def uses(self, which: int | str) -> bool:
        i = _index(which, self.variables)
        return any(m[i] for m in self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def __bool__(self) -> bool:
        return bool(self._terms)

    # arithmetic -------------------------------------------------------------
    def _check(self, other: "Polynomial"):
        if self.variables != other.variables:
            raise VariableMismatch(f"{self.variables} vs {other.variables}")

    def _lift(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if _is_scalar(other):
            return Polynomial.constant(other, self.variables)
        return NotImplemented

    def __add__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0) + c
        return Polynomial(out, self.variables)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial({m: -c for m, c in self._terms.items()}, self.variables)

    def __sub__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c) -> "Polynomial":
        c = _coerce(c)
        return Polynomial({m: v * c for m, v in self._terms.items()}, self.variables)

    def __mul__(self, other):
        if _is_scalar(other):
            return self.scale(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check(other)
        out: dict = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0) + c1 * c2
        return Polynomial(out, self.variables)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            return NotImplemented
        other = _coerce(other)
        return self.scale(1 / other)

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only non-negative integer powers")
        out = Polynomial.constant(1, self.variables)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other):
        if isinstance(other, Polynomial):
            return self.variables == other.variables and self._terms == other._terms
        if _is_scalar(other):
            return self == Polynomial.constant(other, self.variables)
        return NotImplemented

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.variables, frozenset(self._terms.items())))
        return self._hash

    # calculus ---------------------------------------------------------------
    def differentiate(self, which: int | str) -> "Polynomial":
        i = _index(which, self.variables)
        out = {}
        for m, c in self._terms.items():
            e = m[i]
            if e:
                mm = list(m)
                mm[i] = e - 1
                out[tuple(mm)] = c * e
        return Polynomial(out, self.variables)

    def gradient(self) -> list["Polynomial"]:
        return [self.differentiate(i) for i in range(self.nvars)]

    # evaluation -------------------------------------------------------------
    def evaluate(self, point) -> float:
        point = _point(point, self.nvars)
        total = 0.0
        for m, c in self.terms():
            v = float(c)
            for x, e in zip(point, m):
                if e:
                    v *= x ** e
            total += v
        return total

    __call__ = evaluate

    def evaluate_exact(self, point: Sequence) -> Fraction:
        if len(point) != self.nvars:
            raise ValueError(f"expected {self.nvars} coordinates, got {len(point)}")
        total = Fraction(0)
        for m, c in self.terms():
            v = Fraction(c)
            for x, e in zip(point, m):
                v *= Fraction(x) ** e
            total += v
        return total

    def abs_evaluate(self, point) -> float:
        """Sum of |term| at ``point``; the natural floating-point error scale."""
        point = _point(point, self.nvars)
        total = 0.0
        for m, c in self._terms.items():
            v = abs(float(c))
            for x, e in zip(point, m):
                if e:
                    v *= abs(x) ** e
            total += v
        return total

    def evaluate_many(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.nvars:
            raise ValueError(f"expected {self.nvars} columns, got {pts.shape[1]}")
        if not self._terms:
            return np.zeros(pts.shape[0])
        exps, coeffs = self.as_arrays()
        return _eval_arrays(exps, coeffs, pts)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        items = self.terms()
        exps = np.array([m for m, _ in items], dtype=np.int64).reshape(len(items), self.nvars)
        coeffs = np.array([float(c) for _, c in items])
        return exps, coeffs

    # conversions ------------------------------------------------------------
    def to_float(self) -> "Polynomial":
        return Polynomial({m: float(c) for m, c in self._terms.items()}, self.variables)

    def to_exact(self) -> "Polynomial":
        return Polynomial({m: Fraction(c) for m, c in self._terms.items()}, self.variables)

    def embed(self, variables: Sequence[str]) -> "Polynomial":
        """Re-express in a context containing all current variables."""
        variables = tuple(variables)
        idx = [_index(v, variables) for v in self.variables]
        out = {}
        for m, c in self._terms.items():
            e = [0] * len(variables)
            for j, k in zip(idx, m):
                e[j] = k
            out[tuple(e)] = c
        return Polynomial(out, variables)

    def restrict(self, variables: Sequence[str]) -> "Polynomial":
        """Drop variables that do not occur; fails if a dropped one is used."""
        variables = tuple(variables)
        keep = [_index(v, self.variables) for v in variables]
        dropped = set(range(self.nvars)) - set(keep)
        out = {}
        for m, c in self._terms.items():
            if any(m[i] for i in dropped):
                raise VariableMismatch("polynomial uses a variable being dropped")
            out[tuple(m[i] for i in keep)] = c
        return Polynomial(out, variables)

    def scale_variable(self, which: int | str, factor) -> "Polynomial":
        """Substitute ``v -> factor * v``."""
        i = _index(which, self.variables)
        factor = _coerce(factor)
        return Polynomial({m: c * factor ** m[i] for m, c in self._terms.items()},
                          self.variables)

    def shift_variable(self, which: int | str, offset) -> "Polynomial":
        """Substitute ``v -> v + offset``."""
        i = _index(which, self.variables)
        offset = _coerce(offset)
        out: dict = {}
        for m, c in self._terms.items():
            e = m[i]
            for k in range(e + 1):
                mm = m[:i] + (k,) + m[i + 1:]
                out[mm] = out.get(mm, 0) + c * math.comb(e, k) * offset ** (e - k)
        return Polynomial(out, self.variables)

    def substitute(self, which: int | str, value) -> "Polynomial":
        """Substitute a numeric value for one variable (context unchanged)."""
        i = _index(which, self.variables)
        value = _coerce(value)
        out: dict = {}
        for m, c in self._terms.items():
            mm = list(m)
            mm[i] = 0
            mm = tuple(mm)
            out[mm] = out.get(mm, 0) + c * value ** m[i]
        return Polynomial(out, self.variables)

    def max_abs_coeff(self) -> float:
        return max((abs(float(c)) for c in self._terms.values()), default=0.0)

    # formatting -------------------------------------------------------------
    def __str__(self) -> str:
        if not self._terms:
            return "0"
        pieces = []
        # highest degree first reads most naturally
        for m, c in sorted(self._terms.items(),
                           key=lambda mc: (-sum(mc[0]), tuple(-e for e in mc[0]))):
            neg = c < 0
            a = -c if neg else c
            mono = monomial_str(m, self.variables)
            if isinstance(a, Fraction):
                cs = str(a) if a.denominator == 1 else f"({a})"
            else:
                cs = repr(float(a))
            if mono:
                body = mono if a == 1 else f"{cs}*{mono}"
            else:
                body = cs
            if not pieces:
                pieces.append(("-" if neg else "") + body)
            else:
                pieces.append(("- " if neg else "+ ") + body)
        return " ".join(pieces)

    def __repr__(self) -> str:
        return f"Polynomial({str(self)!r}, variables={self.variables})"


def _eval_arrays(exps: np.ndarray, coeffs: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[0])
    for e, c in zip(exps, coeffs):
        term = np.full(pts.shape[0], c)
        for j, k in enumerate(e):
            if k:
                term = term * pts[:, j] ** k
        out += term
    return out


def _index(which: int | str, variables: Sequence[str]) -> int:
    if isinstance(which, str):
        try:
            return variables.index(which)
        except ValueError:
            raise VariableMismatch(f"unknown variable {which!r} in {tuple(variables)}") from None
    if not 0 <= which < len(variables):
        raise VariableMismatch(f"variable index {which} out of range for {tuple(variables)}")
    return which


def _point(point, n: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.shape != (n,):
        raise ValueError(f"expected a point of dimension {n}, got shape {p.shape}")
    return p


def state_variables(n: int) -> tuple[str, ...]:
    return tuple(f"x{i + 1}" for i in range(n))


def with_time(variables: Sequence[str]) -> tuple[str, ...]:
    variables = tuple(variables)
    return variables if TIME in variables else variables + (TIME,)


class PolyVector(tuple):
    """Fixed-length tuple of polynomials sharing one variable context."""

    def __new__(cls, entries: Iterable[Polynomial]):
        entries = tuple(entries)
        if not entries:
            raise ValueError("empty PolyVector")
        ctx = entries[0].variables
        for p in entries:
            if not isinstance(p, Polynomial):
                raise TypeError("PolyVector entries must be Polynomial")
            if p.variables != ctx:
                raise VariableMismatch("PolyVector entries disagree on variables")
        return super().__new__(cls, entries)

    @property
    def variables(self) -> tuple[str, ...]:
        return self[0].variables

    @property
    def shape(self) -> tuple[int]:
        return (len(self),)

    def evaluate(self, point) -> np.ndarray:
        return np.array([p.evaluate(point) for p in self])

    def degree(self) -> int:
        return max(p.degree() for p in self)

    def map(self, fn) -> "PolyVector":
        return PolyVector(fn(p) for p in self)

    def scale(self, c) -> "PolyVector":
        return PolyVector(p.scale(c) for p in self)

    def matmul_const(self, matrix) -> "PolyVector":
        """Return ``matrix @ self`` for a constant matrix."""
        mat = np.asarray(matrix, dtype=float)
        if mat.shape[1] != len(self):
            raise ValueError("shape mismatch")
        zero = Polynomial.zero(self.variables)
        out = []
        for row in mat:
            acc = zero
            for a, p in zip(row, self):
                if a:
                    acc = acc + p.scale(float(a))
            out.append(acc)
        return PolyVector(out)


class PolyMatrix:
    """Rectangular array of polynomials sharing one variable context."""

    __slots__ = ("rows",)

    def __init__(self, rows: Iterable[Iterable[Polynomial]]):
        rows = tuple(tuple(r) for r in rows)
        if not rows or not rows[0]:
            raise ValueError("empty PolyMatrix")
        width = len(rows[0])
        ctx = rows[0][0].variables
        for r in rows:
            if len(r) != width:
                raise ValueError("ragged PolyMatrix")
            for p in r:
                if p.variables != ctx:
                    raise VariableMismatch("PolyMatrix entries disagree on variables")
        self.rows = rows

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.rows[0])

    @property
    def variables(self) -> tuple[str, ...]:
        return self.rows[0][0].variables

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    def evaluate(self, point) -> np.ndarray:
        return np.array([[p.evaluate(point) for p in r] for r in self.rows])

    def degree(self) -> int:
        return max(p.degree() for r in self.rows for p in r)

    def transpose(self) -> "PolyMatrix":
        return PolyMatrix(zip(*self.rows))

    def __matmul__(self, other: "PolyMatrix") -> "PolyMatrix":
        n, k = self.shape
        k2, m = other.shape
        if k != k2:
            raise ValueError("shape mismatch")
        zero = Polynomial.zero(self.variables)
        out = []
        for i in range(n):
            row = []
            for j in range(m):
                acc = zero
                for l in range(k):
                    a, b = self.rows[i][l], other.rows[l][j]
                    if a and b:
                        acc = acc + a * b
                row.append(acc)
            out.append(row)
        return PolyMatrix(out)


# parsing ----------------------------------------------------------------------

_ALLOWED_FUNCS = {"sqrt": math.sqrt}


def parse_polynomial(text: str, variables: Sequence[str], exact: bool = False) -> Polynomial:
    """Parse ``-0.5*x1^3 + x2`` style text into a Polynomial.

    Supports ``+ - * /`` (division by constants only), ``^`` or ``**`` with
    non-negative integer exponents, parentheses and ``sqrt(<constant>)``.
    With ``exact=True`` numeric literals become Fractions.
    """
    variables = tuple(variables)
    src = text.replace("^", "**")
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as exc:
        raise PolynomialSyntaxError(f"cannot parse {text!r}: {exc.msg}", exc.offset) from None

    def num(v):
        if exact:
            return Fraction(v) if isinstance(v, int) else Fraction(repr(v))
        return float(v)

    def walk(node) -> Polynomial:
        col = getattr(node, "col_offset", None)
        col = None if col is None else col + 1
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise PolynomialSyntaxError(f"unexpected literal {node.value!r}", col)
            return Polynomial.constant(num(node.value), variables)
        if isinstance(node, ast.Name):
            if node.id not in variables:
                raise PolynomialSyntaxError(
                    f"unknown variable {node.id!r} (expected one of {', '.join(variables)})", col)
            return Polynomial.var(node.id, variables)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            p = walk(node.operand)
            return -p if isinstance(node.op, ast.USub) else p
        if isinstance(node, ast.BinOp):
            left = walk(node.left)
            if isinstance(node.op, ast.Pow):
                k = _const_int(node.right)
                if k is None or k < 0:
                    raise PolynomialSyntaxError("exponent must be a non-negative integer", col)
                return left ** k
            right = walk(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                if right.degree() > 0:
                    raise PolynomialSyntaxError("division by a non-constant", col)
                c = right.coeff((0,) * len(variables))
                if c == 0:
                    raise PolynomialSyntaxError("division by zero", col)
                return left / c
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _ALLOWED_FUNCS and len(node.args) == 1 and not node.keywords:
            arg = walk(node.args[0])
            if arg.degree() > 0:
                raise PolynomialSyntaxError(f"{node.func.id}() of a non-constant", col)
            val = _ALLOWED_FUNCS[node.func.id](float(arg.coeff((0,) * len(variables))))
            return Polynomial.constant(val, variables)
        raise PolynomialSyntaxError(f"unsupported syntax {type(node).__name__}", col)

    return walk(tree)


def _const_int(node) -> int | None:
    if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
        return node.value
    return None
