"""Smooth scalar expressions over x1..xn, y1..ym.

Expressions are parsed into an immutable AST and evaluated with numpy, either
at a single point or over a batch of points.  Exact first and second
derivatives come from forward-mode propagation of (value, gradient, Hessian)
triples; :func:`fd_check` compares them with central differences.

Grammar::

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' expo)?
    expo   := '-' expo | atom ('^' expo)?
    atom   := number | ident | func '(' expr ')' | '(' expr ')'

Unary minus binds looser than ``^`` so that ``-(y1+1)^2`` means
``-((y1+1)^2)``.  Constant exponents are folded to a float; a non-constant
exponent ``a^b`` is rewritten to ``exp(b*log(a))``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "ExprDomainError",
    "Num",
    "Var",
    "Neg",
    "Bin",
    "Pow",
    "Func",
    "Expr",
    "EvalPoint",
    "Derivatives",
    "parse",
    "to_string",
    "evaluate",
    "evaluate_batch",
    "differentiate",
    "jet_batch",
    "fd_check",
    "substitute",
    "poly_degree",
    "is_constant",
    "const",
    "variables",
]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, column: int):
        super().__init__(f"{message} at column {column}")
        self.column = column


class ExprDomainError(ExprError):
    def __init__(self, message: str, subexpr: str):
        super().__init__(f"{message} in '{subexpr}'")
        self.subexpr = subexpr


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # 'x' or 'y'
    index: int  # zero-based


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Bin:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: float


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, Bin, Pow, Func]

FUNCS = ("exp", "log", "sqrt", "sin", "cos")


def const(value: float) -> Expr:
    """Literal node; negative values become ``Neg(Num(|v|))`` to stay printable."""
    value = float(value)
    if value < 0:
        return Neg(Num(-value))
    return Num(value)


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            col = pos + 1
            while col <= len(text) and text[col - 1].isspace():
                col += 1
            raise ExprSyntaxError(f"unexpected character {text[col - 1]!r}", col)
        kind = m.lastgroup
        col = m.start(kind) + 1
        tokens.append((kind, m.group(kind), col))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, n: int, m: int):
        self.tokens = _tokenize(text)
        self.i = 0
        self.n = n
        self.m = m

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            # report the column of the last token consumed
            col = self.tokens[-1][2] if self.tokens else 1
            raise ExprSyntaxError("unexpected end of input", col)
        self.i += 1
        return tok

    def accept(self, value: str) -> bool:
        tok = self.peek()
        if tok is not None and tok[0] == "op" and tok[1] == value:
            self.i += 1
            return True
        return False

    def expect(self, value: str):
        tok = self.next()
        if tok[0] != "op" or tok[1] != value:
            raise ExprSyntaxError(f"expected {value!r}, found {tok[1]!r}", tok[2])

    def parse(self) -> Expr:
        if not self.tokens:
            raise ExprSyntaxError("empty expression", 1)
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            raise ExprSyntaxError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            if self.accept("+"):
                node = Bin("+", node, self.term())
            elif self.accept("-"):
                node = Bin("-", node, self.term())
            else:
                return node

    def term(self) -> Expr:
        node = self.unary()
        while True:
            if self.accept("*"):
                node = Bin("*", node, self.unary())
            elif self.accept("/"):
                node = Bin("/", node, self.unary())
            else:
                return node

    def unary(self) -> Expr:
        if self.accept("-"):
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.accept("^"):
            return _make_pow(base, self.expo())
        return base

    def expo(self) -> Expr:
        if self.accept("-"):
            return Neg(self.expo())
        base = self.atom()
        if self.accept("^"):
            return _make_pow(base, self.expo())
        return base

    def atom(self) -> Expr:
        kind, value, col = self.next()
        if kind == "num":
            return Num(float(value))
        if kind == "id":
            if value in FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(value, arg)
            mt = re.fullmatch(r"([xy])(\d+)", value)
            if mt is None:
                raise ExprSyntaxError(f"unknown identifier {value!r}", col)
            vkind, idx = mt.group(1), int(mt.group(2))
            limit = self.n if vkind == "x" else self.m
            if idx < 1 or idx > limit:
                raise ExprSyntaxError(
                    f"variable {value} out of range ({vkind}1..{vkind}{limit})", col
                )
            return Var(vkind, idx - 1)
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected token {value!r}", col)


def _make_pow(base: Expr, expo: Expr) -> Expr:
    if is_constant(expo):
        p = float(evaluate(expo, EvalPoint(np.zeros(0), np.zeros(0))))
        return Pow(base, p)
    # non-constant exponent: a^b = exp(b*log(a)), log enforces a > 0
    return Func("exp", Bin("*", expo, Func("log", base)))


def parse(text: str, n: int, m: int) -> Expr:
    """Parse ``text`` into an AST with variables checked against ``(n, m)``."""
    return _Parser(text, n, m).parse()


def _fmt_num(v: float) -> str:
    s = repr(float(v))
    return s


def to_string(node: Expr) -> str:
    """Print an AST so that ``parse(to_string(ast))`` rebuilds it exactly."""
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return f"{node.kind}{node.index + 1}"
    if isinstance(node, Neg):
        return f"(-{to_string(node.arg)})"
    if isinstance(node, Bin):
        return f"({to_string(node.left)} {node.op} {to_string(node.right)})"
    if isinstance(node, Pow):
        p = node.exponent
        ps = _fmt_num(p) if p >= 0 else f"(-{_fmt_num(-p)})"
        return f"({to_string(node.base)})^{ps}"
    if isinstance(node, Func):
        return f"{node.name}({to_string(node.arg)})"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Structural helpers


def variables(node: Expr) -> set[tuple[str, int]]:
    if isinstance(node, Var):
        return {(node.kind, node.index)}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Bin):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Pow):
        return variables(node.base)
    return variables(node.arg)


def is_constant(node: Expr) -> bool:
    return not variables(node)


def substitute(node: Expr, mapping: dict[tuple[str, int], Expr]) -> Expr:
    """Replace variables by sub-expressions (keys are ``(kind, index)``)."""
    if isinstance(node, Var):
        return mapping.get((node.kind, node.index), node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.arg, mapping))
    if isinstance(node, Bin):
        return Bin(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    if isinstance(node, Pow):
        return Pow(substitute(node.base, mapping), node.exponent)
    return Func(node.name, substitute(node.arg, mapping))


def poly_degree(node: Expr) -> float:
    """Total polynomial degree, or ``inf`` when the expression is not polynomial."""
    if isinstance(node, Num):
        return 0
    if isinstance(node, Var):
        return 1
    if isinstance(node, Neg):
        return poly_degree(node.arg)
    if isinstance(node, Bin):
        dl, dr = poly_degree(node.left), poly_degree(node.right)
        if node.op in "+-":
            return max(dl, dr)
        if node.op == "*":
            return dl + dr
        return dl if dr == 0 else math.inf
    if isinstance(node, Pow):
        d = poly_degree(node.base)
        if d == 0:
            return 0
        p = node.exponent
        if p >= 0 and float(p).is_integer():
            return d * p
        return math.inf
    return 0 if is_constant(node.arg) else math.inf


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalPoint:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("evaluation point must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class Derivatives:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def _domain_check(ok, message: str, node: Expr):
    if not np.all(ok):
        raise ExprDomainError(message, to_string(node))


def _pow_values(a, p: float, node: Expr):
    if float(p).is_integer():
        if p < 0:
            _domain_check(a != 0, "zero raised to a negative power", node)
        return np.power(a, p)
    _domain_check(a >= 0 if p > 0 else a > 0, "non-integer power of a negative number", node)
    return np.power(a, p)


def _eval(node: Expr, X: np.ndarray, Y: np.ndarray):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return X[..., node.index] if node.kind == "x" else Y[..., node.index]
    if isinstance(node, Neg):
        return -_eval(node.arg, X, Y)
    if isinstance(node, Bin):
        a = _eval(node.left, X, Y)
        b = _eval(node.right, X, Y)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        _domain_check(np.asarray(b) != 0, "division by zero", node)
        return a / b
    if isinstance(node, Pow):
        return _pow_values(_eval(node.base, X, Y), node.exponent, node)
    a = _eval(node.arg, X, Y)
    if node.name == "exp":
        return np.exp(a)
    if node.name == "log":
        _domain_check(np.asarray(a) > 0, "log of a nonpositive number", node)
        return np.log(a)
    if node.name == "sqrt":
        _domain_check(np.asarray(a) >= 0, "sqrt of a negative number", node)
        return np.sqrt(a)
    if node.name == "sin":
        return np.sin(a)
    return np.cos(a)


def evaluate(node: Expr, p: EvalPoint) -> float:
    """Value of the expression at a single point."""
    return float(_eval(node, p.x, p.y))


def evaluate_batch(node: Expr, X, Y) -> np.ndarray:
    """Values at many points; ``X[..., i]`` and ``Y[..., j]`` broadcast together."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    with np.errstate(all="ignore"):
        out = _eval(node, X, Y)
    shape = np.broadcast_shapes(X.shape[:-1], Y.shape[:-1])
    return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()


class _Jet:
    """Value, gradient and Hessian over a batch: shapes (B,), (B, d), (B, d, d)."""

    __slots__ = ("v", "g", "h")

    def __init__(self, v, g, h):
        self.v = v
        self.g = g
        self.h = h

    @classmethod
    def constant(cls, c, batch: int, d: int):
        return cls(np.full(batch, float(c)), np.zeros((batch, d)), np.zeros((batch, d, d)))

    def __add__(self, o):
        return _Jet(self.v + o.v, self.g + o.g, self.h + o.h)

    def __sub__(self, o):
        return _Jet(self.v - o.v, self.g - o.g, self.h - o.h)

    def __neg__(self):
        return _Jet(-self.v, -self.g, -self.h)

    def __mul__(self, o):
        cross = self.g[:, :, None] * o.g[:, None, :]
        h = self.h * o.v[:, None, None] + o.h * self.v[:, None, None] + cross + cross.transpose(0, 2, 1)
        return _Jet(self.v * o.v, self.g * o.v[:, None] + o.g * self.v[:, None], h)

    def chain(self, f0, f1, f2):
        """Compose with a scalar function given its value and first two derivatives."""
        outer = self.g[:, :, None] * self.g[:, None, :]
        return _Jet(
            f0,
            self.g * f1[:, None],
            self.h * f1[:, None, None] + outer * f2[:, None, None],
        )


def _jet(node: Expr, X, Y, seeds: dict, batch: int, d: int) -> _Jet:
    if isinstance(node, Num):
        return _Jet.constant(node.value, batch, d)
    if isinstance(node, Var):
        col = X[:, node.index] if node.kind == "x" else Y[:, node.index]
        g = np.zeros((batch, d))
        k = seeds.get((node.kind, node.index))
        if k is not None:
            g[:, k] = 1.0
        return _Jet(col.astype(float).copy(), g, np.zeros((batch, d, d)))
    if isinstance(node, Neg):
        return -_jet(node.arg, X, Y, seeds, batch, d)
    if isinstance(node, Bin):
        a = _jet(node.left, X, Y, seeds, batch, d)
        b = _jet(node.right, X, Y, seeds, batch, d)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        _domain_check(b.v != 0, "division by zero", node)
        inv = 1.0 / b.v
        return a * b.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    if isinstance(node, Pow):
        a = _jet(node.base, X, Y, seeds, batch, d)
        p = node.exponent
        f0 = _pow_values(a.v, p, node)
        if float(p).is_integer():
            f1 = p * np.power(a.v, p - 1) if p != 0 else np.zeros(batch)
            f2 = p * (p - 1) * np.power(a.v, p - 2) if p not in (0, 1) else np.zeros(batch)
        else:
            _domain_check(a.v > 0, "non-integer power not differentiable at 0", node)
            f1 = p * np.power(a.v, p - 1)
            f2 = p * (p - 1) * np.power(a.v, p - 2)
        return a.chain(f0, f1, f2)
    a = _jet(node.arg, X, Y, seeds, batch, d)
    u = a.v
    if node.name == "exp":
        e = np.exp(u)
        return a.chain(e, e, e)
    if node.name == "log":
        _domain_check(u > 0, "log of a nonpositive number", node)
        return a.chain(np.log(u), 1.0 / u, -1.0 / (u * u))
    if node.name == "sqrt":
        _domain_check(u > 0, "sqrt not differentiable at nonpositive argument", node)
        s = np.sqrt(u)
        return a.chain(s, 0.5 / s, -0.25 / (s * u))
    if node.name == "sin":
        s, c = np.sin(u), np.cos(u)
        return a.chain(s, c, -s)
    s, c = np.sin(u), np.cos(u)
    return a.chain(c, -s, -c)


def jet_batch(node: Expr, X, Y, wrt: Sequence[tuple[str, int]] | None = None):
    """Batched value, gradient and Hessian.

    ``X`` has shape (B, n) and ``Y`` shape (B, m).  ``wrt`` lists the
    differentiation variables as ``(kind, index)`` pairs; by default all of
    x then y.  Returns arrays of shapes (B,), (B, d), (B, d, d).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    batch = max(X.shape[0], Y.shape[0])
    if X.shape[0] != batch:
        X = np.broadcast_to(X, (batch, X.shape[1]))
    if Y.shape[0] != batch:
        Y = np.broadcast_to(Y, (batch, Y.shape[1]))
    if wrt is None:
        wrt = [("x", i) for i in range(X.shape[1])] + [("y", j) for j in range(Y.shape[1])]
    seeds = {key: k for k, key in enumerate(wrt)}
    d = len(wrt)
    with np.errstate(all="ignore"):
        j = _jet(node, X, Y, seeds, batch, d)
    h = 0.5 * (j.h + j.h.transpose(0, 2, 1))
    return j.v, j.g, h


def differentiate(node: Expr, p: EvalPoint, symmetrize: bool = True) -> Derivatives:
    """Exact value, gradient and Hessian over (x, y) at ``p``."""
    X = p.x[None, :]
    Y = p.y[None, :]
    wrt = [("x", i) for i in range(p.x.size)] + [("y", j) for j in range(p.y.size)]
    seeds = {key: k for k, key in enumerate(wrt)}
    with np.errstate(all="ignore"):
        j = _jet(node, X, Y, seeds, 1, len(wrt))
    h = j.h[0]
    if symmetrize:
        h = 0.5 * (h + h.T)
    return Derivatives(float(j.v[0]), j.g[0].copy(), h.copy())


def fd_check(node: Expr, p: EvalPoint, h: float = 1e-5) -> float:
    """Max relative error of AD gradient and Hessian against central differences.

    The gradient is differenced from values; the Hessian from AD gradients.
    Relative error is ``|AD - FD| / max(1, |AD|)``.
    """
    z0 = np.concatenate([p.x, p.y])
    n = p.x.size
    d = z0.size
    ad = differentiate(node, p)

    def split(z):
        return EvalPoint(z[:n], z[n:])

    worst = 0.0
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fp = evaluate(node, split(z0 + e))
        fm = evaluate(node, split(z0 - e))
        g_fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(ad.gradient[k] - g_fd) / max(1.0, abs(ad.gradient[k])))
        gp = differentiate(node, split(z0 + e)).gradient
        gm = differentiate(node, split(z0 - e)).gradient
        col = (gp - gm) / (2 * h)
        err = np.abs(ad.hessian[:, k] - col) / np.maximum(1.0, np.abs(ad.hessian[:, k]))
        worst = max(worst, float(err.max()))
    return worst


def compile_scalar(node: Expr) -> Callable[[np.ndarray, np.ndarray], float]:
    """Convenience closure ``(x, y) -> value`` for scipy callbacks."""

    def fun(x, y):
        return float(_eval(node, np.asarray(x, float), np.asarray(y, float)))

    return fun
