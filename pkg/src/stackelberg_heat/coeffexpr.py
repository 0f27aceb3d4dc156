"""Arithmetic expression language for coefficients, data and nonlinearities.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-'? power
    power  := atom ('^' factor)?
    atom   := number | ident | func '(' args ')' | '(' expr ')'

Functions: ``sin cos exp tanh sqrt abs`` (one argument) and ``min2 max2``
(two arguments).  Evaluation is vectorized over numpy arrays; division by
zero and any non-finite result raise :class:`NonFiniteError` instead of
producing infinities.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    ArityError,
    ConfigError,
    EllipticityViolation,
    ExprSyntaxError,
    NonFiniteError,
    UnboundIdentifierError,
    UnknownIdentifierError,
)

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Unary",
    "Binary",
    "Call",
    "COORD_IDENTS",
    "parse_expr",
    "eval_expr",
    "derivative",
    "CoefficientTables",
    "sample_coefficients",
    "sample_field",
]

COORD_IDENTS = frozenset({"x", "y", "r", "th", "t", "pi"})

FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "tanh": (1, np.tanh),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "min2": (2, np.minimum),
    "max2": (2, np.maximum),
}

CONSTANTS = {"pi": np.pi}


class Expr:
    """Base class of expression tree nodes."""

    def evaluate(self, env):
        raise NotImplementedError

    @property
    def identifiers(self) -> frozenset:
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def __str__(self):
        return self.to_text()


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def evaluate(self, env):
        return np.float64(self.value)

    @property
    def identifiers(self):
        return frozenset()

    def to_text(self):
        if self.value < 0:
            return f"(-{repr(-self.value)})"
        return repr(self.value)


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def evaluate(self, env):
        if self.name in env:
            return env[self.name]
        if self.name in CONSTANTS:
            return np.float64(CONSTANTS[self.name])
        raise UnboundIdentifierError(f"identifier '{self.name}' is not bound here")

    @property
    def identifiers(self):
        return frozenset({self.name})

    def to_text(self):
        return self.name


@dataclass(frozen=True)
class Unary(Expr):
    operand: Expr

    def evaluate(self, env):
        return -self.operand.evaluate(env)

    @property
    def identifiers(self):
        return self.operand.identifiers

    def to_text(self):
        return f"(-{self.operand.to_text()})"


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        with np.errstate(all="ignore"):
            if self.op == "+":
                out = a + b
            elif self.op == "-":
                out = a - b
            elif self.op == "*":
                out = a * b
            elif self.op == "/":
                if np.any(np.asarray(b) == 0):
                    raise NonFiniteError(f"division by zero in '{self.to_text()}'")
                out = a / b
            else:
                out = np.power(a, b)
        return _check_finite(out, self)

    @property
    def identifiers(self):
        return self.left.identifiers | self.right.identifiers

    def to_text(self):
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple

    def evaluate(self, env):
        fn = FUNCTIONS[self.name][1]
        vals = [a.evaluate(env) for a in self.args]
        with np.errstate(all="ignore"):
            out = fn(*vals)
        return _check_finite(out, self)

    @property
    def identifiers(self):
        out = frozenset()
        for a in self.args:
            out |= a.identifiers
        return out

    def to_text(self):
        return f"{self.name}({', '.join(a.to_text() for a in self.args)})"


def _check_finite(value, node):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value in '{node.to_text()}'")
    return value


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


class _Parser:
    def __init__(self, text, allowed):
        self.text = text
        self.allowed = allowed
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _offset(self, char_index):
        return len(self.text[:char_index].encode("utf-8"))

    def _tokenize(self, text):
        tokens = []
        i = 0
        while i < len(text):
            if text[i].isspace():
                i += 1
                continue
            m = _TOKEN.match(text, i)
            if m is None or m.end() == i:
                raise ExprSyntaxError(
                    f"unexpected character {text[i]!r}", self._offset(i)
                )
            kind = m.lastgroup
            start = m.start(kind)
            tokens.append((kind, m.group(kind), start))
            i = m.end()
        tokens.append(("end", "", len(text)))
        return tokens

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value):
        kind, val, start = self.take()
        if val != value or kind == "end":
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", self._offset(start))

    def parse(self):
        if self.peek()[0] == "end":
            raise ExprSyntaxError("empty expression", 0)
        node = self.expr()
        kind, val, start = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", self._offset(start))
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.factor())
        return node

    def factor(self):
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Unary(self.power())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Binary("^", base, self.factor())
        return base

    def atom(self):
        kind, val, start = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            if val in FUNCTIONS:
                arity = FUNCTIONS[val][0]
                self.expect("(")
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != arity:
                    raise ArityError(
                        f"function {val} takes {arity} argument(s), got {len(args)} "
                        f"(byte offset {self._offset(start)})"
                    )
                return Call(val, tuple(args))
            if val not in self.allowed:
                raise UnknownIdentifierError(
                    f"unknown identifier '{val}' at byte offset {self._offset(start)}; "
                    f"allowed: {', '.join(sorted(self.allowed))}"
                )
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", self._offset(start))


def parse_expr(text: str, allowed=COORD_IDENTS) -> Expr:
    """Parse expression text into an AST.

    Parameters
    ----------
    text : str
        Nonempty expression.
    allowed : iterable of str
        Identifiers permitted in this context (``pi`` is always a constant).

    Raises
    ------
    ExprSyntaxError, UnknownIdentifierError, ArityError
    """
    if not isinstance(text, str):
        raise ConfigError(f"expression must be a string, got {type(text).__name__}")
    allowed = frozenset(allowed) | {"pi"}
    return _Parser(text, allowed).parse()


def eval_expr(e: Expr, point=None, t=0.0, **bindings):
    """Evaluate an expression at a point (or arrays of points) and time.

    Parameters
    ----------
    e : Expr or str
    point : float, mapping or None
        A scalar binds ``x``; a mapping binds any identifiers by name.
    t : float
        Time.
    **bindings
        Additional identifier values.

    Returns
    -------
    float or ndarray
    """
    if isinstance(e, str):
        e = parse_expr(e, allowed=set(COORD_IDENTS) | set(bindings) | _point_names(point))
    env = {"t": t}
    if isinstance(point, dict):
        env.update(point)
    elif point is not None:
        env["x"] = point
    env.update(bindings)
    value = e.evaluate(env)
    if np.ndim(value) == 0:
        return float(value)
    return np.asarray(value, dtype=float)


def _point_names(point):
    return set(point) if isinstance(point, dict) else set()


# ---------------------------------------------------------------------------
# Symbolic differentiation (used for nonlinearity derivatives)
# ---------------------------------------------------------------------------


def _is_const(e, var):
    return var not in e.identifiers


def _num(e):
    return e.value if isinstance(e, Num) else None


def _add(a, b):
    if _num(a) == 0:
        return b
    if _num(b) == 0:
        return a
    return Binary("+", a, b)


def _sub(a, b):
    if _num(b) == 0:
        return a
    if _num(a) == 0:
        return Unary(b)
    return Binary("-", a, b)


def _mul(a, b):
    if _num(a) == 0 or _num(b) == 0:
        return Num(0.0)
    if _num(a) == 1:
        return b
    if _num(b) == 1:
        return a
    return Binary("*", a, b)


def _div(a, b):
    if _num(a) == 0:
        return Num(0.0)
    if _num(b) == 1:
        return a
    return Binary("/", a, b)


def derivative(e: Expr, var: str) -> Expr:
    """Symbolic partial derivative of an expression.

    Raises
    ------
    ConfigError
        For non-differentiable constructs (``min2``, ``max2``) or powers with
        a variable exponent.
    """
    if _is_const(e, var):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0)
    if isinstance(e, Unary):
        d = derivative(e.operand, var)
        return Num(0.0) if _num(d) == 0 else Unary(d)
    if isinstance(e, Binary):
        u, v = e.left, e.right
        du, dv = derivative(u, var), derivative(v, var)
        if e.op == "+":
            return _add(du, dv)
        if e.op == "-":
            return _sub(du, dv)
        if e.op == "*":
            return _add(_mul(du, v), _mul(u, dv))
        if e.op == "/":
            return _div(_sub(_mul(du, v), _mul(u, dv)), Binary("^", v, Num(2.0)))
        if not _is_const(v, var):
            raise ConfigError(f"cannot differentiate variable exponent in '{e.to_text()}'")
        return _mul(_mul(v, Binary("^", u, _sub(v, Num(1.0)))), du)
    if isinstance(e, Call):
        if e.name in ("min2", "max2"):
            raise ConfigError(f"{e.name} is not differentiable; supply the derivative")
        (u,) = e.args
        du = derivative(u, var)
        outer = {
            "sin": lambda: Call("cos", (u,)),
            "cos": lambda: Unary(Call("sin", (u,))),
            "exp": lambda: Call("exp", (u,)),
            "tanh": lambda: _sub(Num(1.0), Binary("^", Call("tanh", (u,)), Num(2.0))),
            "sqrt": lambda: _div(Num(0.5), Call("sqrt", (u,))),
            "abs": lambda: _div(u, Call("abs", (u,))),
        }[e.name]()
        return _mul(outer, du)
    raise ConfigError(f"cannot differentiate node {e!r}")


# ---------------------------------------------------------------------------
# Sampling onto mesh x time grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientTables:
    """Coefficient samples on mesh nodes and time levels.

    Attributes
    ----------
    A : ndarray, shape (n_bulk,)
        Scalar bulk diffusion ``c(x)`` (tensor ``c(x) I``).
    A_gamma : ndarray, shape (n_boundary,)
        Boundary diffusion (disk); ones and unused in 1D.
    a : ndarray, shape (M+1, n_bulk)
        Bulk potential.
    b : ndarray, shape (M+1, n_boundary)
        Boundary potential.
    B : ndarray, shape (M+1, n_bulk, dim)
        Bulk drift vector.
    B_gamma : ndarray, shape (M+1, n_boundary)
        Tangential boundary drift (zero in 1D).
    report : dict
        Validation summary (minimum diffusion samples, warnings).
    """

    A: np.ndarray
    A_gamma: np.ndarray
    a: np.ndarray
    b: np.ndarray
    B: np.ndarray
    B_gamma: np.ndarray
    report: dict

    @property
    def n_levels(self) -> int:
        return self.a.shape[0]

    def level_key(self, k: int) -> bytes:
        """Bytes identifying the time-dependent samples at level ``k``."""
        return b"".join(
            np.ascontiguousarray(arr[k]).tobytes()
            for arr in (self.a, self.b, self.B, self.B_gamma)
        )

    def replace(self, **changes) -> "CoefficientTables":
        fields = dict(
            A=self.A,
            A_gamma=self.A_gamma,
            a=self.a,
            b=self.b,
            B=self.B,
            B_gamma=self.B_gamma,
            report=self.report,
        )
        fields.update(changes)
        return CoefficientTables(**fields)


def sample_field(expr, mesh, times, which="bulk", static=False):
    """Sample an expression on bulk or boundary nodes at every time level.

    Returns an array of shape ``(len(times), n_nodes)`` (or ``(n_nodes,)``
    when ``static``).
    """
    if isinstance(expr, (int, float)):
        expr = Num(float(expr))
    elif isinstance(expr, str):
        expr = parse_expr(expr)
    coords = mesh.coordinates(which)
    n = len(next(iter(coords.values())))
    unbound = expr.identifiers - set(coords) - {"t", "pi"}
    if unbound:
        raise ConfigError(
            f"identifier(s) {sorted(unbound)} not available on a {mesh.kind} mesh"
        )
    if static:
        if "t" in expr.identifiers:
            raise ConfigError(f"expression '{expr.to_text()}' must not depend on t")
        return np.broadcast_to(eval_expr(expr, coords, t=0.0), (n,)).astype(float)
    out = np.empty((len(times), n))
    for k, tk in enumerate(times):
        out[k] = np.broadcast_to(eval_expr(expr, coords, t=float(tk)), (n,))
    return out


_COEFF_KEYS = {"A", "AGamma", "bGamma", "a", "b", "Bx", "By", "BGamma"}


def sample_coefficients(config: dict, mesh, timegrid) -> CoefficientTables:
    """Sample coefficient expressions on the mesh and validate them.

    Parameters
    ----------
    config : dict
        Coefficient expressions keyed by ``A``, ``AGamma`` (alias
        ``bGamma``), ``a``, ``b``, ``Bx``, ``By``, ``BGamma``.  Missing keys
        default to ``"1"`` for diffusions and ``"0"`` otherwise.
    mesh : Mesh
    timegrid : TimeGrid
        Anything with a ``times`` array.

    Raises
    ------
    EllipticityViolation
        If a diffusion sample is not strictly positive.
    NonFiniteError
        If any sample is not finite.
    """
    config = dict(config or {})
    unknown = set(config) - _COEFF_KEYS
    if unknown:
        raise ConfigError(f"unknown coefficient key(s): {sorted(unknown)}")
    if "bGamma" in config and "AGamma" in config:
        raise ConfigError("give the boundary diffusion as AGamma or bGamma, not both")
    if "bGamma" in config:
        config["AGamma"] = config.pop("bGamma")
    warnings = []
    if mesh.kind == "interval":
        for key in ("AGamma", "BGamma", "By"):
            if key in config:
                warnings.append(f"coefficient {key} is ignored on the interval")
                config.pop(key)
    times = np.asarray(timegrid.times)
    nl = len(times)

    A = sample_field(config.get("A", "1"), mesh, times, "bulk", static=True)
    min_A = float(A.min())
    if min_A <= 0:
        raise EllipticityViolation(f"diffusion A has minimum sample {min_A:.3e} <= 0")
    if mesh.kind == "disk":
        A_gamma = sample_field(config.get("AGamma", "1"), mesh, times, "boundary", static=True)
        min_Ag = float(A_gamma.min())
        if min_Ag <= 0:
            raise EllipticityViolation(
                f"boundary diffusion AGamma has minimum sample {min_Ag:.3e} <= 0"
            )
    else:
        A_gamma = np.ones(mesh.n_boundary)
        min_Ag = None
    a = sample_field(config.get("a", "0"), mesh, times, "bulk")
    b = sample_field(config.get("b", "0"), mesh, times, "boundary")
    comps = [sample_field(config.get("Bx", "0"), mesh, times, "bulk")]
    if mesh.dim == 2:
        comps.append(sample_field(config.get("By", "0"), mesh, times, "bulk"))
    B = np.stack(comps, axis=-1)
    if mesh.kind == "disk":
        B_gamma = sample_field(config.get("BGamma", "0"), mesh, times, "boundary")
    else:
        B_gamma = np.zeros((nl, mesh.n_boundary))
    report = {"min_eig_A": min_A, "min_A_gamma": min_Ag, "warnings": warnings}
    return CoefficientTables(A, A_gamma, a, b, B, B_gamma, report)
