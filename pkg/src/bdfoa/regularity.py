"""Sufficient conditions for a single-valued localization of the stationary
map, directional inner semicontinuity of the solution map, and the cone of
admissible directions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import geometry as geo
from ._util import nonzero_in_cone, null_space, strictly_feasible_direction, to_jsonable
from .expr import EvalPoint, differentiate, evaluate, evaluate_batch
from .lower import (
    GridSpec,
    SamplingSchedule,
    box_residual,
    localization_track,
    solve_lower,
    solve_lower_many,
)
from .problems import BilevelProblem

__all__ = [
    "HOLDS",
    "FAILS",
    "NOT_APPLICABLE",
    "NotStationaryError",
    "ConditionResult",
    "LocalizationReport",
    "DirectionCone",
    "InfCompactnessEvidence",
    "InnerSemicontResult",
    "InnerSemicontReport",
    "check_interior_nonsingular",
    "check_strong_monotonicity",
    "check_sosc_box",
    "check_condition_ivb",
    "check_localization",
    "admissible_directions",
    "check_inf_compactness",
    "check_inner_semicontinuity_empirical",
    "inner_semicontinuity_report",
]

HOLDS, FAILS, NOT_APPLICABLE = "holds", "fails", "not-applicable"
STATIONARY_TOL = 1e-8


class NotStationaryError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionResult:
    name: str
    verdict: str
    witness: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.verdict == HOLDS

    def to_json(self) -> dict:
        return {"name": self.name, "verdict": self.verdict, "witness": to_jsonable(self.witness)}


def _lower_data(prob: BilevelProblem, x, y):
    p = EvalPoint(x, y)
    d = differentiate(prob.f, p)
    n = prob.n
    return p, d.gradient[n:], d.hessian[n:, n:], d.hessian[n:, :n], d.gradient[:n]


def _require_stationary(prob, x, y, g, tol=STATIONARY_TOL):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not prob.Y.contains(y, 1e-12):
        raise NotStationaryError("y lies outside Y")
    r = float(box_residual(g[None, :], y[None, :], prob.Y.lower, prob.Y.upper)[0])
    if r > tol:
        raise NotStationaryError(f"point is not lower-level stationary (residual {r:.3g})")
    return r


# ---------------------------------------------------------------------------
# localization conditions


def check_interior_nonsingular(prob: BilevelProblem, x, y) -> ConditionResult:
    _, g, H, _, _ = _lower_data(prob, x, y)
    _require_stationary(prob, x, y, g)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    margin = float(np.min(np.minimum(y - prob.Y.lower, prob.Y.upper - y)))
    sv = np.linalg.svd(H, compute_uv=False)
    smin = float(sv[-1])
    scale = max(1.0, float(sv[0]))
    interior = margin > 1e-9
    ok = interior and smin >= 1e-8 * scale
    return ConditionResult(
        "ii",
        HOLDS if ok else FAILS,
        {"interior": interior, "boundary_margin": margin, "min_singular_value": smin},
    )


def check_strong_monotonicity(prob: BilevelProblem, x, y) -> ConditionResult:
    """Smallest eigenvalue of the lower Hessian on span(Y - Y), at the point only."""
    _, g, H, _, _ = _lower_data(prob, x, y)
    _require_stationary(prob, x, y, g)
    span = np.flatnonzero(prob.Y.lower < prob.Y.upper)
    pointwise_only = not prob.Y.is_bounded()
    if span.size == 0:
        return ConditionResult("iii", HOLDS, {"mu": np.inf, "span_dim": 0, "pointwise_only": pointwise_only})
    mu = float(np.linalg.eigvalsh(H[np.ix_(span, span)])[0])
    return ConditionResult(
        "iii",
        HOLDS if mu > 1e-8 else FAILS,
        {"mu": mu, "span_dim": int(span.size), "pointwise_only": pointwise_only},
    )


def _signed_split(tags):
    F = [i for i, t in enumerate(tags) if t == geo.FREE]
    S = [i for i, t in enumerate(tags) if t in (geo.NONNEG, geo.NONPOS)]
    sign = np.array([-1.0 if t == geo.NONPOS else 1.0 for t in tags])
    return F, S, sign


def _positive_in_span(V: np.ndarray, rows: list[int]) -> np.ndarray | None:
    """A combination ``V c`` whose ``rows`` entries are all strictly positive."""
    k = V.shape[1]
    if not rows:
        return V[:, 0]
    if k == 1:
        v = V[:, 0]
        for s in (1.0, -1.0):
            if np.all(s * v[rows] > 1e-12):
                return s * v
        return None
    res = linprog(
        np.zeros(k),
        A_ub=-V[rows],
        b_ub=-np.ones(len(rows)),
        bounds=[(None, None)] * k,
        method="highs",
    )
    return None if res.status != 0 else V @ res.x


def min_quadratic_on_sign_cone(H: np.ndarray, tags) -> tuple[float, np.ndarray | None]:
    """Exact ``min <w, H w>`` over unit ``w`` in a sign-coordinate cone.

    A minimizer restricted to its support is an eigenvector of the
    corresponding principal submatrix, so enumerating supports (faces) and
    eigenspaces is exhaustive.
    """
    m = len(tags)
    F, S, sign = _signed_split(tags)
    Hs = H * np.outer(sign, sign)
    best, arg = np.inf, None
    for size in range(len(S) + 1):
        for T in itertools.combinations(S, size):
            idx = F + list(T)
            if not idx:
                continue
            sub = Hs[np.ix_(idx, idx)]
            lam, vec = np.linalg.eigh(sub)
            pos = [idx.index(i) for i in T]
            start = 0
            while start < lam.size:
                stop = start + 1
                while stop < lam.size and abs(lam[stop] - lam[start]) <= 1e-10 * max(1.0, abs(lam[start])):
                    stop += 1
                if lam[start] < best:
                    v = _positive_in_span(vec[:, start:stop], pos)
                    if v is not None:
                        w = np.zeros(m)
                        w[idx] = v / np.linalg.norm(v)
                        best, arg = float(lam[start]), w * sign
                start = stop
    return best, arg


def check_sosc_box(prob: BilevelProblem, x, y) -> ConditionResult:
    if prob.m > 3:
        raise ValueError("face enumeration is limited to m <= 3")
    _, g, H, _, _ = _lower_data(prob, x, y)
    _require_stationary(prob, x, y, g)
    K = geo.critical_cone(prob.Y, y, g)
    if K.is_trivial():
        return ConditionResult("iv-a", HOLDS, {"critical_cone": list(K.tags), "min_curvature": np.inf, "worst_direction": None})
    val, w = min_quadratic_on_sign_cone(H, K.tags)
    tol = 1e-10 * max(1.0, float(np.abs(H).max()))
    return ConditionResult(
        "iv-a",
        HOLDS if val > tol else FAILS,
        {"critical_cone": list(K.tags), "min_curvature": val, "worst_direction": w},
    )


def ivb_witness(H: np.ndarray, tags) -> np.ndarray | None:
    """Nonzero ``w`` in the sign cone K with ``-H w`` in ``N_K(w)``, if any."""
    m = len(tags)
    F, S, sign = _signed_split(tags)
    Hs = H * np.outer(sign, sign)
    for size in range(len(S) + 1):
        for P in itertools.combinations(S, size):
            T = F + list(P)
            if not T:
                continue
            Z = null_space(Hs[np.ix_(T, T)], len(T))
            if Z.shape[1] == 0:
                continue
            rest = [j for j in S if j not in P]
            rows = [Z[[T.index(i) for i in P]]] if P else []
            if rest:
                rows.append(Hs[np.ix_(rest, T)] @ Z)
            A = np.vstack(rows) if rows else np.zeros((0, Z.shape[1]))
            c = nonzero_in_cone(A, Z.shape[1])
            if c is not None:
                w = np.zeros(m)
                w[T] = Z @ c
                return (w / np.linalg.norm(w)) * sign
    return None


def check_condition_ivb(prob: BilevelProblem, x, y, liminf_evidence: bool = False,
                        grid: GridSpec | None = None) -> ConditionResult:
    """Algebraic part via the critical-cone form; the liminf hypothesis is
    optionally backed by short localization tracks along coordinate directions."""
    if prob.m > 3:
        raise ValueError("face enumeration is limited to m <= 3")
    _, g, H, _, _ = _lower_data(prob, x, y)
    _require_stationary(prob, x, y, g)
    K = geo.critical_cone(prob.Y, y, g)
    w = None if K.is_trivial() else ivb_witness(H, K.tags)
    witness = {"critical_cone": list(K.tags), "violating_direction": w}
    ok = w is None
    if ok and liminf_evidence:
        lost = []
        sched = SamplingSchedule(t=tuple(2.0 ** -k for k in range(4, 21)))
        for i in range(prob.n):
            for s in (1.0, -1.0):
                u = np.zeros(prob.n)
                u[i] = s
                tr = localization_track(prob, x, y, u, sched, 0.2, grid)
                if tr.lost:
                    lost.append(u)
        witness["liminf_evidence"] = "empirical"
        witness["tracks_lost"] = lost
        ok = not lost
    return ConditionResult("iv-b", HOLDS if ok else FAILS, witness)


@dataclass(frozen=True)
class LocalizationReport:
    point: tuple
    conditions: tuple

    @property
    def certified(self) -> bool:
        return any(c.holds for c in self.conditions)

    def by_name(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "point": {"x": to_jsonable(self.point[0]), "y": to_jsonable(self.point[1])},
            "conditions": [c.to_json() for c in self.conditions],
            "localization_certified": self.certified,
        }


def check_localization(prob: BilevelProblem, x, y, liminf_evidence: bool = False,
                       grid: GridSpec | None = None) -> LocalizationReport:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    conds = [check_interior_nonsingular(prob, x, y), check_strong_monotonicity(prob, x, y)]
    if prob.m <= 3:
        conds.append(check_sosc_box(prob, x, y))
        conds.append(check_condition_ivb(prob, x, y, liminf_evidence, grid))
    else:
        conds.append(ConditionResult("iv-a", NOT_APPLICABLE, {"reason": "m > 3"}))
        conds.append(ConditionResult("iv-b", NOT_APPLICABLE, {"reason": "m > 3"}))
    return LocalizationReport((x, y), tuple(conds))


# ---------------------------------------------------------------------------
# admissible directions


@dataclass(frozen=True)
class DirectionCone:
    """``{u : <normal_k, u> > 0 for all k}``; no normals means the whole space."""

    dim: int
    normals: np.ndarray
    competitors: np.ndarray
    empty: bool
    interior_direction: np.ndarray | None

    @property
    def is_full(self) -> bool:
        return self.normals.shape[0] == 0

    def contains(self, u, slack: float = 1e-8) -> bool:
        if self.empty:
            return False
        u = np.asarray(u, dtype=float).reshape(self.dim)
        if self.is_full:
            return True
        nrm = np.linalg.norm(u)
        return bool(nrm > 0 and np.all(self.normals @ u >= slack * nrm))

    def sample(self, count: int, seed: int = 0, slack: float = 1e-8) -> np.ndarray:
        """Unit directions inside the cone with margin at least ``slack``."""
        if self.empty:
            return np.zeros((0, self.dim))
        rng = np.random.default_rng(seed)
        out = []
        if self.interior_direction is not None:
            out.append(self.interior_direction)
        tries = 0
        while len(out) < count and tries < 200 * count:
            tries += 1
            u = rng.standard_normal(self.dim)
            u /= np.linalg.norm(u)
            if self.contains(u, slack):
                out.append(u)
        return np.array(out[:count])

    def to_json(self) -> dict:
        return {
            "normals": to_jsonable(self.normals),
            "competitors": to_jsonable(self.competitors),
            "empty": self.empty,
            "full_space": self.is_full,
            "interior_direction": to_jsonable(self.interior_direction),
        }


def admissible_directions(prob: BilevelProblem, xbar, ybar, grid: GridSpec | None = None,
                          sample: "SolutionSample | None" = None) -> DirectionCone:
    grid = grid or GridSpec()
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    ybar = np.atleast_1d(np.asarray(ybar, dtype=float))
    s = sample if sample is not None else solve_lower(prob, xbar, grid)
    fbar = evaluate(prob.f, EvalPoint(xbar, ybar))
    if not prob.Y.contains(ybar) or fbar > s.value + grid.tie_tol:
        raise ValueError(
            f"ybar is not a lower-level minimizer (f = {fbar:.12g}, V = {s.value:.12g})"
        )
    competitors = [y for y in s.minimizers if np.linalg.norm(y - ybar) > 1e-4]
    n = prob.n
    if not competitors:
        u = np.zeros(n)
        u[0] = 1.0
        return DirectionCone(n, np.zeros((0, n)), np.zeros((0, prob.m)), False, u)
    gbar = differentiate(prob.f, EvalPoint(xbar, ybar)).gradient[:n]
    normals = np.array([differentiate(prob.f, EvalPoint(xbar, y)).gradient[:n] - gbar for y in competitors])
    u = strictly_feasible_direction(normals, n)
    return DirectionCone(n, normals, np.array(competitors), u is None, u)


# ---------------------------------------------------------------------------
# inf-compactness and inner semicontinuity


@dataclass(frozen=True)
class InfCompactnessEvidence:
    holds: bool
    alpha: float
    level_margin: float
    window: float
    sublevel_bounds: tuple  # (lower corner, upper corner) of sampled sublevel points
    escaping_sample: dict | None
    heuristic: bool = True

    def to_json(self) -> dict:
        return to_jsonable(
            {
                "holds": self.holds,
                "alpha": self.alpha,
                "level_margin": self.level_margin,
                "window": self.window,
                "sublevel_bounds": list(self.sublevel_bounds),
                "escaping_sample": self.escaping_sample,
                "heuristic": self.heuristic,
            }
        )


def _probe_points(prob: BilevelProblem, half_width: float, reach: float) -> np.ndarray:
    """Window grid plus far-field points out to ``reach``, clipped to Y."""
    m = prob.m
    res = {1: 2001, 2: 201, 3: 41}.get(m, 21)
    lo, hi = prob.Y.window(half_width)
    axes = [np.linspace(l, h, res) for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    inner = np.stack([g.ravel() for g in mesh], axis=1)
    # dense enough in log-radius to catch narrow valleys heading to infinity
    count = 4000 if m == 1 else 400
    radii = half_width * np.logspace(0, np.log10(reach / half_width), count)[1:]
    if m == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        rng = np.random.default_rng(0)
        dirs = rng.standard_normal((64 * m, m))
        dirs = np.vstack([dirs / np.linalg.norm(dirs, axis=1, keepdims=True), np.eye(m), -np.eye(m)])
    outer = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, m)
    outer = np.clip(outer, prob.Y.lower, prob.Y.upper)
    return np.vstack([inner, outer])


def check_inf_compactness(prob: BilevelProblem, xbar, half_width: float = 10.0, level_margin: float = 0.5,
                          radius: float = 1e-2, reach: float = 1e4, grid: GridSpec | None = None,
                          edge_margin: float = 1.0) -> InfCompactnessEvidence:
    """Heuristic evidence that ``{y : f(x, y) <= alpha}`` stays bounded near ``xbar``.

    ``alpha = V(xbar) + level_margin``.  Sampled x are ``xbar`` shifted by
    ``radius`` times a few fractions along each coordinate.  The evidence fails
    when a sampled sublevel point lies within ``edge_margin`` of, or beyond, the
    window edge.
    """
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    grid = grid or GridSpec(half_width=half_width)
    V = solve_lower(prob, xbar, grid).value
    alpha = V + level_margin
    xs = [xbar]
    for i in range(prob.n):
        for frac in (1.0, 0.3, 0.1):
            for s in (1.0, -1.0):
                x = xbar.copy()
                x[i] += s * frac * radius
                xs.append(x)
    X = np.array(xs)
    P = _probe_points(prob, half_width, reach)
    vals = evaluate_batch(prob.f, X[:, None, :], P[None, :, :])
    inside = np.isfinite(vals) & (vals <= alpha)
    lo_w, hi_w = prob.Y.window(half_width)
    lo_in = np.where(np.isfinite(prob.Y.lower) & (lo_w <= prob.Y.lower), -np.inf, lo_w + edge_margin)
    hi_in = np.where(np.isfinite(prob.Y.upper) & (hi_w >= prob.Y.upper), np.inf, hi_w - edge_margin)
    escaping = None
    pts = []
    for k in range(X.shape[0]):
        sub = P[inside[k]]
        pts.append(sub)
        bad = np.any((sub < lo_in) | (sub > hi_in), axis=1)
        if escaping is None and np.any(bad):
            j = int(np.argmax(np.max(np.abs(sub[bad]), axis=1)))
            escaping = {"x": X[k], "y": sub[bad][j], "f": float(evaluate(prob.f, EvalPoint(X[k], sub[bad][j])))}
    allpts = np.vstack(pts) if pts else np.zeros((0, prob.m))
    bounds = (allpts.min(axis=0), allpts.max(axis=0)) if allpts.size else (np.full(prob.m, np.nan),) * 2
    return InfCompactnessEvidence(escaping is None, float(alpha), level_margin, half_width, bounds, escaping)


@dataclass(frozen=True)
class InnerSemicontResult:
    holds: bool
    max_distance: float
    final_distance: float
    distances: np.ndarray  # (directions, t)
    directions: np.ndarray

    def to_json(self) -> dict:
        return to_jsonable(
            {
                "holds": self.holds,
                "max_distance": self.max_distance,
                "final_distance": self.final_distance,
                "directions": self.directions,
            }
        )


def check_inner_semicontinuity_empirical(prob: BilevelProblem, xbar, ybar, u,
                                         sched: SamplingSchedule | None = None,
                                         grid: GridSpec | None = None, tol: float = 1e-3) -> InnerSemicontResult:
    """dist(ybar, S(xbar + t_k u')) along the schedule and its perturbations.

    For ``u = 0`` every signed coordinate direction is used.
    """
    sched = sched or SamplingSchedule()
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    ybar = np.atleast_1d(np.asarray(ybar, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.any(u):
        dirs = [s * e for e in np.eye(prob.n) for s in (1.0, -1.0)]
    else:
        dirs = sched.directions(u)
    t = np.asarray(sched.t)
    X = np.array([xbar + tk * d for d in dirs for tk in t])
    samples = solve_lower_many(prob, X, grid)
    dist = np.array([np.min(np.linalg.norm(s.minimizers - ybar, axis=1)) for s in samples]).reshape(len(dirs), t.size)
    final = float(np.max(dist[:, -1]))
    return InnerSemicontResult(final <= tol, float(dist.max()), final, dist, np.array(dirs))


@dataclass(frozen=True)
class InnerSemicontReport:
    solutions: np.ndarray
    singleton: bool
    inf_compactness: InfCompactnessEvidence
    directions: DirectionCone
    empirical: InnerSemicontResult | None

    def to_json(self) -> dict:
        return {
            "solutions": to_jsonable(self.solutions),
            "singleton": self.singleton,
            "inf_compactness": self.inf_compactness.to_json(),
            "admissible_directions": self.directions.to_json(),
            "empirical": None if self.empirical is None else self.empirical.to_json(),
        }


def inner_semicontinuity_report(prob: BilevelProblem, xbar, ybar, u=None, grid: GridSpec | None = None,
                                sched: SamplingSchedule | None = None) -> InnerSemicontReport:
    grid = grid or GridSpec()
    s = solve_lower(prob, xbar, grid)
    cone = admissible_directions(prob, xbar, ybar, grid, sample=s)
    ic = check_inf_compactness(prob, xbar, grid.half_width, grid=grid)
    emp = None
    if u is not None:
        emp = check_inner_semicontinuity_empirical(prob, xbar, ybar, u, sched, grid)
    elif not cone.empty and cone.interior_direction is not None:
        emp = check_inner_semicontinuity_empirical(prob, xbar, ybar, cone.interior_direction, sched, grid)
    return InnerSemicontReport(s.minimizers, s.minimizers.shape[0] == 1, ic, cone, emp)
