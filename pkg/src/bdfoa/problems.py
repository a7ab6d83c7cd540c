"""Bilevel problem model, config loading, built-in instances and the
principal-agent builder."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import Derivatives, EvalPoint, Expr

__all__ = [
    "ProblemError",
    "BoxSet",
    "BilevelProblem",
    "PrincipalAgentSpec",
    "ProblemPoint",
    "load_problem",
    "problem_from_dict",
    "builtin",
    "BUILTIN_NAMES",
    "solve_y0",
    "build_principal_agent",
    "eval_bundle",
    "Bundle",
]

DEFAULT_WINDOW = 10.0


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class BoxSet:
    """Product of closed intervals; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ProblemError("box bounds have different lengths")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ProblemError("box requires lower <= upper")
        if np.any(lo == np.inf) or np.any(hi == -np.inf):
            raise ProblemError("box bounds must leave a nonempty interval")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def free(cls, m: int) -> "BoxSet":
        return cls(np.full(m, -np.inf), np.full(m, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, y, tol: float = 1e-12) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(y >= self.lower - tol) and np.all(y <= self.upper + tol))

    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def window(self, half_width: float = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
        """Finite sampling window: the box intersected with [-w, w]^m.

        Coordinates whose box lies outside [-w, w] get a window of width 2w
        anchored at the finite bound.
        """
        w = float(half_width)
        lo = np.maximum(self.lower, -w)
        hi = np.minimum(self.upper, w)
        for i in np.flatnonzero(lo > hi):
            if np.isfinite(self.lower[i]) and self.lower[i] > w:
                lo[i], hi[i] = self.lower[i], min(self.upper[i], self.lower[i] + 2 * w)
            else:
                lo[i], hi[i] = max(self.lower[i], self.upper[i] - 2 * w), self.upper[i]
        return lo, hi

    def to_json(self) -> dict:
        return {
            "Y_lower": [_bound_out(v) for v in self.lower],
            "Y_upper": [_bound_out(v) for v in self.upper],
        }


def _bound_out(v: float):
    if v == np.inf:
        return "inf"
    if v == -np.inf:
        return "-inf"
    return float(v)


def _bound_in(v, where: str) -> float:
    if isinstance(v, str):
        s = v.strip().lower()
        if s in ("inf", "+inf"):
            return math.inf
        if s == "-inf":
            return -math.inf
        raise ProblemError(f"{where}: bound must be a number or 'inf'/'-inf', got {v!r}")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ProblemError(f"{where}: bound must be a number, got {v!r}")
    return float(v)


@dataclass(frozen=True)
class BilevelProblem:
    """``min F(x,y)`` s.t. ``y in argmin_{y' in Y} f(x,y')``, ``G(x,y) <= 0``."""

    name: str
    n: int
    m: int
    F: Expr
    f: Expr
    G: tuple = ()
    Y: BoxSet = None
    point: tuple | None = None  # optional reference (x, y)
    x_box: BoxSet | None = None  # sampling box for upper variables, informational
    sources: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.Y is None:
            object.__setattr__(self, "Y", BoxSet.free(self.m))
        if self.Y.dim != self.m:
            raise ProblemError(f"Y has dimension {self.Y.dim}, expected m={self.m}")
        for label, node in [("F", self.F), ("f", self.f)] + [
            (f"G[{i}]", g) for i, g in enumerate(self.G)
        ]:
            for kind, idx in ex.variables(node):
                limit = self.n if kind == "x" else self.m
                if idx >= limit:
                    raise ProblemError(f"{label} references {kind}{idx + 1} beyond dimension {limit}")
        object.__setattr__(self, "G", tuple(self.G))

    @property
    def q(self) -> int:
        return len(self.G)

    def reference_point(self) -> tuple[np.ndarray, np.ndarray]:
        if self.point is None:
            raise ProblemError(f"problem {self.name!r} has no reference point")
        x, y = self.point
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)

    def to_config(self) -> dict:
        doc = {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "F": ex.to_string(self.F),
            "f": ex.to_string(self.f),
            "G": [ex.to_string(g) for g in self.G],
        }
        doc.update(self.Y.to_json())
        if self.point is not None:
            doc["point"] = {"x": [float(v) for v in self.point[0]], "y": [float(v) for v in self.point[1]]}
        return doc


@dataclass(frozen=True)
class ProblemPoint:
    point: EvalPoint
    role: str = "candidate"  # candidate | feasible-sample | reference

    def check(self, prob: BilevelProblem, tol: float = 1e-12) -> None:
        if not prob.Y.contains(self.point.y, tol):
            raise ProblemError("y lies outside the lower-level box")


# ---------------------------------------------------------------------------
# loading

_REQUIRED = ("name", "n", "m", "F", "f")


def problem_from_dict(doc: Mapping[str, Any]) -> BilevelProblem:
    """Validate a config document and build the problem."""
    if not isinstance(doc, Mapping):
        raise ProblemError("problem config must be an object")
    for key in _REQUIRED:
        if key not in doc:
            raise ProblemError(f"missing field {key!r}")
    name = doc["name"]
    if not isinstance(name, str) or not name:
        raise ProblemError("'name' must be a nonempty string")
    n, m = doc["n"], doc["m"]
    for label, v in (("n", n), ("m", m)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ProblemError(f"{label!r} must be a positive integer")
    G_src = doc.get("G", [])
    if not isinstance(G_src, list) or not all(isinstance(g, str) for g in G_src):
        raise ProblemError("'G' must be an array of strings")

    def _parse(label, text):
        if not isinstance(text, str):
            raise ProblemError(f"{label!r} must be a string")
        try:
            return ex.parse(text, n, m)
        except ex.ExprError as err:
            raise ProblemError(f"{label}: {err}") from err

    F = _parse("F", doc["F"])
    f = _parse("f", doc["f"])
    G = tuple(_parse(f"G[{i}]", g) for i, g in enumerate(G_src))

    def _bounds(key, default):
        raw = doc.get(key)
        if raw is None:
            return np.full(m, default)
        if isinstance(raw, (str, int, float)) and not isinstance(raw, bool):
            raw = [raw] * m
        if not isinstance(raw, list) or len(raw) != m:
            raise ProblemError(f"{key!r} must have {m} entries")
        return np.array([_bound_in(v, key) for v in raw])

    Y = BoxSet(_bounds("Y_lower", -np.inf), _bounds("Y_upper", np.inf))
    point = None
    if "point" in doc and doc["point"] is not None:
        pt = doc["point"]
        try:
            x = np.asarray(pt["x"], dtype=float).reshape(-1)
            y = np.asarray(pt["y"], dtype=float).reshape(-1)
        except (KeyError, TypeError, ValueError) as err:
            raise ProblemError("'point' must have numeric arrays 'x' and 'y'") from err
        if x.size != n or y.size != m:
            raise ProblemError("'point' dimensions do not match (n, m)")
        point = (x, y)
    sources = {"F": doc["F"], "f": doc["f"], "G": list(G_src)}
    return BilevelProblem(name, n, m, F, f, G, Y, point, sources=sources)


def load_problem(config) -> BilevelProblem:
    """Load a problem from a JSON string, a path, or an already-parsed mapping."""
    if isinstance(config, Mapping):
        return problem_from_dict(config)
    if isinstance(config, Path) or (isinstance(config, str) and not config.lstrip().startswith("{")):
        text = Path(config).read_text()
    else:
        text = config
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ProblemError(f"invalid JSON: {err}") from err
    return problem_from_dict(doc)


# ---------------------------------------------------------------------------
# built-in instances


def solve_y0(max_iter: int = 200) -> float:
    """Root of (1-y)e^{4y} = 1+y in [0.9, 1.0] by bisection."""

    def g(y):
        return (1.0 - y) * math.exp(4.0 * y) - (1.0 + y)

    lo, hi = 0.9, 1.0
    glo, ghi = g(lo), g(hi)
    if not (glo > 0 > ghi):
        raise AssertionError("bracket [0.9, 1.0] lost its sign change")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        gm = g(mid)
        if gm == 0.0:
            return mid
        if gm > 0:
            lo = mid
        else:
            hi = mid
    # of the two final endpoints keep the smaller residual
    return lo if abs(g(lo)) <= abs(g(hi)) else hi


MIRRLEES_f = "-x1*exp(-(y1+1)^2) - exp(-(y1-1)^2)"


def _mirrlees() -> BilevelProblem:
    y0 = solve_y0()
    return problem_from_dict(
        {
            "name": "mirrlees",
            "n": 1,
            "m": 1,
            "F": "(x1-2)^2 + (y1-1)^2",
            "f": MIRRLEES_f,
            "G": [],
            "point": {"x": [1.0], "y": [y0]},
        }
    )


def _modified_mirrlees() -> BilevelProblem:
    y0 = solve_y0()
    y0s = repr(y0)
    return problem_from_dict(
        {
            "name": "modified-mirrlees",
            "n": 2,
            "m": 1,
            "F": f"(x1-0.5)^2 + (x1+x2)*(1+y1) - (1-y1)*exp(4*y1) + (y1-{y0s})^3",
            "f": "-(x1+x2)*exp(-(y1+1)^2) - exp(-(y1-1)^2)",
            "G": [],
            "point": {"x": [0.5, 0.5], "y": [y0]},
        }
    )


def _example_xy_1() -> BilevelProblem:
    return problem_from_dict(
        {
            "name": "example-xy-1",
            "n": 1,
            "m": 1,
            "F": "0",
            "f": "(x1*y1-1)^2*(1+y1^2)",
            "point": {"x": [2.0], "y": [0.5]},
        }
    )


def _example_xy3() -> BilevelProblem:
    return problem_from_dict(
        {
            "name": "example-xy3",
            "n": 1,
            "m": 1,
            "F": "0",
            "f": "x1*y1^3 + y1^12",
            "point": {"x": [4.0], "y": [-1.0]},
        }
    )


def _toy_convex() -> BilevelProblem:
    return problem_from_dict(
        {
            "name": "toy-convex",
            "n": 1,
            "m": 1,
            "F": "(x1-1)^2 + (y1-1)^2",
            "f": "(y1-x1)^2",
            "point": {"x": [1.0], "y": [1.0]},
        }
    )


@dataclass(frozen=True)
class PrincipalAgentSpec:
    """Discrete-outcome moral hazard model.

    ``probabilities`` are expressions in ``y1..ym`` (the action); ``agent_utility``,
    ``principal_utility`` are expressions in the single variable ``x1``;
    ``cost`` is an expression in the action.
    """

    outputs: tuple
    probabilities: tuple
    agent_utility: str
    principal_utility: str
    cost: str
    reservation_utility: float
    wage_lower: tuple
    wage_upper: tuple
    action_lower: tuple
    action_upper: tuple
    name: str = "principal-agent"


def _principal_agent_2_spec() -> PrincipalAgentSpec:
    return PrincipalAgentSpec(
        outputs=(0.0, 10.0),
        probabilities=("1 - y1", "y1"),
        agent_utility="sqrt(x1)",
        principal_utility="x1",
        cost="y1^2",
        reservation_utility=0.1,
        wage_lower=(0.01, 0.01),
        wage_upper=(10.0, 10.0),
        action_lower=(0.05,),
        action_upper=(0.95,),
        name="principal-agent-2",
    )


def build_principal_agent(spec: PrincipalAgentSpec, samples: int = 101) -> BilevelProblem:
    """Upper variables are the wages ``x_j``; the lower variable is the action.

    ``F = -sum_j v(pi_j - x_j) P(s_j, y)``, ``f = -sum_j u(x_j) P(s_j, y) + c(y)``
    and the participation constraint is ``G = f + Ubar <= 0``.
    """
    ns = len(spec.outputs)
    if len(spec.probabilities) != ns:
        raise ProblemError("one probability expression per output is required")
    ma = len(spec.action_lower)
    P = [ex.parse(p, 0, ma) for p in spec.probabilities]
    u = ex.parse(spec.agent_utility, 1, 0)
    v = ex.parse(spec.principal_utility, 1, 0)
    c = ex.parse(spec.cost, 0, ma)
    Y = BoxSet(np.array(spec.action_lower, float), np.array(spec.action_upper, float))

    lo, hi = Y.window()
    axes = [np.linspace(lo[i], hi[i], samples) for i in range(ma)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    probs = np.stack([ex.evaluate_batch(p, np.zeros((grid.shape[0], 0)), grid) for p in P], axis=1)
    total = probs.sum(axis=1)
    worst_sum = int(np.argmax(np.abs(total - 1.0)))
    worst_neg = int(np.argmin(probs.min(axis=1)))
    if abs(total[worst_sum] - 1.0) > 1e-8:
        raise ProblemError(
            f"probabilities sum to {total[worst_sum]:.12g} at action {grid[worst_sum].tolist()}"
        )
    if probs.min() < -1e-10:
        raise ProblemError(
            f"negative probability {probs.min():.12g} at action {grid[worst_neg].tolist()}"
        )

    F_terms = []
    f_terms = []
    for j in range(ns):
        xj = ex.Var("x", j)
        util = ex.substitute(u, {("x", 0): xj})
        payoff = ex.substitute(v, {("x", 0): ex.Bin("-", ex.const(spec.outputs[j]), xj)})
        F_terms.append(ex.Bin("*", payoff, P[j]))
        f_terms.append(ex.Bin("*", util, P[j]))
    F = ex.Neg(_sum(F_terms))
    f = ex.Bin("+", ex.Neg(_sum(f_terms)), c)
    G = (ex.Bin("+", f, ex.const(spec.reservation_utility)),)
    x_box = BoxSet(np.array(spec.wage_lower, float), np.array(spec.wage_upper, float))
    return BilevelProblem(spec.name, ns, ma, F, f, G, Y, None, x_box)


def _sum(terms: Sequence[Expr]) -> Expr:
    out = terms[0]
    for t in terms[1:]:
        out = ex.Bin("+", out, t)
    return out


_BUILTINS = {
    "mirrlees": _mirrlees,
    "modified-mirrlees": _modified_mirrlees,
    "example-xy-1": _example_xy_1,
    "example-xy3": _example_xy3,
    "toy-convex": _toy_convex,
    "principal-agent-2": lambda: build_principal_agent(_principal_agent_2_spec()),
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> BilevelProblem:
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise ProblemError(f"unknown built-in problem {name!r}; choose from {', '.join(BUILTIN_NAMES)}") from None


def principal_agent_spec(name: str = "principal-agent-2") -> PrincipalAgentSpec:
    if name != "principal-agent-2":
        raise ProblemError(f"no principal-agent spec named {name!r}")
    return _principal_agent_2_spec()


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bundle:
    F: Derivatives
    f: Derivatives
    G: tuple


def eval_bundle(prob: BilevelProblem, p: EvalPoint) -> Bundle:
    """Derivatives of F, f and every G_i at ``p``."""
    if p.x.size != prob.n or p.y.size != prob.m:
        raise ProblemError("point dimensions do not match the problem")
    return Bundle(
        ex.differentiate(prob.F, p),
        ex.differentiate(prob.f, p),
        tuple(ex.differentiate(g, p) for g in prob.G),
    )
