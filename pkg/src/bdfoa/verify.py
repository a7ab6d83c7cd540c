"""Sampling verifiers for the directional first-order reformulation.

Three questions are answered numerically:

* does the stationary map agree with the solution map near a point, over a
  directional neighbourhood (``verify_equivalence``)?
* does the classical first-order reformulation admit nearby stationary
  points with lower upper-level value (``detect_classical_foa_failure``)?
* is the point a local minimizer among bilevel-feasible samples
  (``verify_bilevel_local_min``)?

None of these are proofs; each report states how many samples back it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import _kernels as K
from .expr import EvalPoint, differentiate, evaluate, evaluate_batch
from .geometry import DirectionalNeighborhood, nbhd_contains
from .lower import GridSpec, box_residual, solve_lower, solve_lower_many, stationary_set_many
from .problems import BilevelProblem
from ._util import to_jsonable

__all__ = [
    "EquivalenceReport",
    "FoaFailureReport",
    "LocalMinReport",
    "neighborhood_samples",
    "verify_equivalence",
    "detect_classical_foa_failure",
    "verify_bilevel_local_min",
]

SET_TOL = 1e-4
WITNESS_RESIDUAL = 1e-9
F_MARGIN = 1e-9
POLISH_STARTS = 5


def _vec(a) -> np.ndarray:
    return np.atleast_1d(np.asarray(a, dtype=float))


def _cap_directions(u: np.ndarray, delta: float, count: int, seed: int = 0) -> np.ndarray:
    """Unit vectors strictly inside the cap ``|e - u/|u|| < delta`` (whole sphere if ``u = 0``)."""
    n = u.size
    nrm = np.linalg.norm(u)
    if nrm == 0:
        if n == 1:
            return np.array([[1.0 if j % 2 == 0 else -1.0] for j in range(count)])
        if n == 2:
            th = 2 * np.pi * np.arange(count) / count
            return np.column_stack([np.cos(th), np.sin(th)])
        E = np.random.default_rng(seed).standard_normal((count, n))
        return E / np.linalg.norm(E, axis=1, keepdims=True)
    uh = u / nrm
    if n == 1:
        return np.repeat(uh[None, :], count, axis=0)
    theta = 2 * np.arcsin(min(1.0, 0.98 * delta / 2))
    frac = np.linspace(-1.0, 1.0, count) if count > 1 else np.zeros(1)
    if n == 2:
        perp = np.array([-uh[1], uh[0]])
        return np.cos(frac * theta)[:, None] * uh + np.sin(frac * theta)[:, None] * perp
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((count, n))
    W -= (W @ uh)[:, None] * uh
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    ang = frac * theta
    return np.cos(ang)[:, None] * uh + np.sin(ang)[:, None] * W


def neighborhood_samples(xbar, u, epsilon: float, delta: float, n_radii: int = 40, n_dirs: int = 16,
                         ratio: float = 0.7) -> np.ndarray:
    """Deterministic points of ``xbar + V_{eps,delta}(u)``.

    Radius ``k`` of direction ``j`` is ``0.98 eps ratio^(k + j/n_dirs)``, so
    in one dimension the directions interleave instead of repeating.
    """
    xbar, u = _vec(xbar), _vec(u)
    E = _cap_directions(u, delta, n_dirs)
    k = np.arange(n_radii)[:, None] + np.arange(n_dirs)[None, :] / n_dirs
    R = 0.98 * epsilon * ratio**k
    X = xbar + R[..., None] * E[None, :, :]
    return X.reshape(-1, xbar.size)


def _in_ball(P: np.ndarray, center: np.ndarray, r: float) -> np.ndarray:
    if P.size == 0:
        return P.reshape(0, center.size)
    return P[np.linalg.norm(P - center, axis=1) <= r]


# ---------------------------------------------------------------------------
# equivalence of S_FO and S


@dataclass(frozen=True)
class EquivalenceReport:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    eps_x: float
    eps_y: float
    delta: float
    samples: int
    verdict: bool
    failures: int
    max_distance: float
    worst: dict | None

    def to_json(self) -> dict:
        return to_jsonable(self.__dict__)


def verify_equivalence(prob: BilevelProblem, xbar, ybar, u, eps_x: float, eps_y: float, delta: float,
                       grid: GridSpec | None = None, n_radii: int = 40, n_dirs: int = 16,
                       set_tol: float = SET_TOL) -> EquivalenceReport:
    xbar, ybar, u = _vec(xbar), _vec(ybar), _vec(u)
    grid = grid or GridSpec()
    if not solve_lower(prob, xbar, grid).contains(ybar, 1e-6):
        raise ValueError("the point is not bilevel feasible")
    nb = DirectionalNeighborhood(xbar, eps_x, delta, u)
    X = neighborhood_samples(xbar, u, eps_x, delta, n_radii, n_dirs)
    X = X[[nbhd_contains(nb, x) for x in X]]
    sols = solve_lower_many(prob, X, grid)
    stats = stationary_set_many(prob, X, grid)
    failures = 0
    worst, worst_d = None, -1.0
    for x, s, fo in zip(X, sols, stats):
        A = _in_ball(s.minimizers, ybar, eps_y)
        B = _in_ball(fo.stationary_points, ybar, eps_y)
        if fo.continuum:
            d, why = np.inf, "stationary continuum"
        elif A.shape[0] == 0 and B.shape[0] == 0:
            d, why = np.inf, "both sets empty in the ball"
        elif A.shape[0] == 0 or B.shape[0] == 0:
            d, why = np.inf, "solution set empty in the ball" if A.shape[0] == 0 else "stationary set empty in the ball"
        else:
            d, why = K.hausdorff(A, B), "sets differ"
        if d > set_tol:
            failures += 1
            if d > worst_d:
                worst_d = d
                worst = {"x": x, "solutions": A, "stationary": B, "distance": d, "reason": why}
        elif worst is None and d > worst_d:
            worst_d = d
    max_d = float(worst_d) if X.shape[0] else 0.0
    return EquivalenceReport(xbar, ybar, u, eps_x, eps_y, delta, int(X.shape[0]), failures == 0,
                             failures, max_d, worst)


# ---------------------------------------------------------------------------
# classical first-order reformulation failure


@dataclass(frozen=True)
class FoaFailureReport:
    x: np.ndarray
    y: np.ndarray
    radius: float
    F_bar: float
    witness: dict | None
    margin: float
    verdict: str  # "classical FOA fails" | "no failure found"
    fold: bool
    samples: int

    @property
    def failed(self) -> bool:
        return self.witness is not None

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["failed"] = self.failed
        return to_jsonable(d)


def _ball_samples(xbar: np.ndarray, radius: float, count: int, seed: int = 0, axes: int = 0) -> np.ndarray:
    """Uniform points of the ball, plus ``axes`` points on each coordinate axis segment."""
    n = xbar.size
    if n == 1:
        return xbar + np.linspace(-radius, radius, count)[:, None]
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((count, n))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    R = radius * rng.random(count) ** (1.0 / n)
    pts = [xbar + R[:, None] * D]
    if axes:
        s = np.linspace(-radius, radius, axes)
        for i in range(n):
            P = np.repeat(xbar[None, :], axes, 0)
            P[:, i] += s
            pts.append(P)
    return np.vstack(pts)


def _scop_residual(prob: BilevelProblem, x, y) -> float:
    p = EvalPoint(x, y)
    g = differentiate(prob.f, p).gradient[prob.n :]
    return float(box_residual(g[None, :], p.y[None, :], prob.Y.lower, prob.Y.upper)[0])


def _G_ok(prob: BilevelProblem, x, y, tol: float = 1e-9) -> bool:
    p = EvalPoint(x, y)
    return all(evaluate(g, p) <= tol for g in prob.G)


def _polish(prob: BilevelProblem, z0: np.ndarray, zbar: np.ndarray, radius: float) -> np.ndarray | None:
    """SLSQP on ``min F s.t. grad_y f = 0, G <= 0, |z - zbar| <= radius`` for interior points."""
    n = prob.n

    def split(z):
        return EvalPoint(z[:n], z[n:])

    def fun(z):
        d = differentiate(prob.F, split(z))
        return d.value, d.gradient

    def eq(z):
        return differentiate(prob.f, split(z)).gradient[n:]

    def eq_jac(z):
        return differentiate(prob.f, split(z)).hessian[n:, :]

    cons = [
        {"type": "eq", "fun": eq, "jac": eq_jac},
        {"type": "ineq", "fun": lambda z: radius**2 - np.sum((z - zbar) ** 2), "jac": lambda z: -2 * (z - zbar)},
    ]
    for g in prob.G:
        cons.append({"type": "ineq", "fun": lambda z, g=g: -evaluate(g, split(z)),
                     "jac": lambda z, g=g: -differentiate(g, split(z)).gradient})
    try:
        res = minimize(fun, z0, jac=True, constraints=cons, method="SLSQP",
                       options={"ftol": 1e-15, "maxiter": 200})
    except (ValueError, ArithmeticError):
        return None
    return res.x if np.all(np.isfinite(res.x)) else None


def detect_classical_foa_failure(prob: BilevelProblem, xbar, ybar, radius: float,
                                 grid: GridSpec | None = None, samples: int = 401) -> FoaFailureReport:
    """Search stationary points ``(x, y)`` with ``|(x, y) - (xbar, ybar)| <= radius`` and lower F.

    Stationary points are computed inside a window of the given radius around
    ``ybar``, so the search stays on the sheets of the stationary surface
    passing near the point.  The best sample is then polished with SLSQP when
    ``ybar`` is interior to Y.
    """
    xbar, ybar = _vec(xbar), _vec(ybar)
    if _scop_residual(prob, xbar, ybar) > 1e-8 or not _G_ok(prob, xbar, ybar, 1e-8):
        raise ValueError("the point is not stationary for the single-level system")
    zbar = np.concatenate([xbar, ybar])
    Fbar = float(evaluate(prob.F, EvalPoint(xbar, ybar)))
    base = grid or GridSpec()
    g = base.around(ybar, radius)
    if base.resolution is None and prob.m == 1:
        g = GridSpec(g.half_width, 2001, g.refine, g.tie_tol, g.lower, g.upper)
    X = _ball_samples(xbar, radius, samples, axes=samples)
    stats = stationary_set_many(prob, X, g)
    best, bestF = None, Fbar
    ranked = []
    fold = False
    dist_x = np.linalg.norm(X - xbar, axis=1)
    for x, s in zip(X, stats):
        P = s.stationary_points
        if P.size == 0:
            continue
        keep = np.linalg.norm(np.hstack([np.repeat(x[None, :], P.shape[0], 0), P]) - zbar, axis=1) <= radius
        for y in P[keep]:
            if not _G_ok(prob, x, y):
                continue
            Fv = float(evaluate(prob.F, EvalPoint(x, y)))
            ranked.append((Fv, np.concatenate([x, y])))
            if Fv < bestF:
                best, bestF = np.concatenate([x, y]), Fv
    # a fold shows up as x-samples close to xbar with no stationary point near ybar
    near = dist_x <= radius / 2
    fold = any(
        s.stationary_points.size == 0
        or np.min(np.linalg.norm(s.stationary_points - ybar, axis=1)) > radius
        for s, k in zip(stats, near) if k
    )
    interior = bool(np.all(ybar > prob.Y.lower) and np.all(ybar < prob.Y.upper))
    if interior:
        ranked.sort(key=lambda r: r[0])
        starts = [z for _, z in ranked[:POLISH_STARTS]] or [zbar + 1e-6]
        for start in starts:
            z = _polish(prob, start, zbar, radius * (1 - 1e-9))
            if z is None or np.linalg.norm(z - zbar) > radius:
                continue
            x, y = z[: prob.n], z[prob.n :]
            if prob.Y.contains(y) and _scop_residual(prob, x, y) <= WITNESS_RESIDUAL and _G_ok(prob, x, y):
                Fv = float(evaluate(prob.F, EvalPoint(x, y)))
                if Fv < bestF:
                    best, bestF = z, Fv
    witness = None
    if best is not None and bestF < Fbar - F_MARGIN:
        x, y = best[: prob.n], best[prob.n :]
        witness = {
            "x": x,
            "y": y,
            "F": bestF,
            "stationarity_residual": _scop_residual(prob, x, y),
            "distance": float(np.linalg.norm(best - zbar)),
        }
    return FoaFailureReport(
        xbar, ybar, float(radius), Fbar, witness, Fbar - bestF,
        "classical FOA fails" if witness else "no failure found", bool(fold), int(X.shape[0]),
    )


# ---------------------------------------------------------------------------
# sampled bilevel local optimality


@dataclass(frozen=True)
class LocalMinReport:
    x: np.ndarray
    y: np.ndarray
    radius: float
    samples: int
    feasible_pairs: int
    verdict: bool
    worst_margin: float
    worst: dict | None

    def to_json(self) -> dict:
        return to_jsonable(self.__dict__)


def verify_bilevel_local_min(prob: BilevelProblem, xbar, ybar, radius: float = 0.05, u=None,
                             delta: float | None = None, samples: int = 10_000,
                             grid: GridSpec | None = None, tol: float = F_MARGIN) -> LocalMinReport:
    """Sample x near ``xbar`` and compare F on bilevel-feasible pairs inside the joint ball.

    With ``u`` and ``delta`` the x-samples are restricted to the directional
    neighbourhood ``xbar + V_{radius,delta}(u)``.
    """
    xbar, ybar = _vec(xbar), _vec(ybar)
    grid = grid or GridSpec()
    if not solve_lower(prob, xbar, grid).contains(ybar, 1e-6):
        raise ValueError("the point is not bilevel feasible")
    zbar = np.concatenate([xbar, ybar])
    Fbar = float(evaluate(prob.F, EvalPoint(xbar, ybar)))
    X = _ball_samples(xbar, radius, samples)
    if u is not None and np.any(_vec(u)):
        nb = DirectionalNeighborhood(xbar, radius, delta if delta is not None else 0.5, _vec(u))
        X = X[[nbhd_contains(nb, x) for x in X]]
    sols = solve_lower_many(prob, X, grid)
    XS, YS = [], []
    for x, s in zip(X, sols):
        for y in s.minimizers:
            if np.linalg.norm(np.concatenate([x, y]) - zbar) <= radius:
                XS.append(x)
                YS.append(y)
    pairs = len(XS)
    worst, worst_m = None, np.inf
    if pairs:
        XS, YS = np.array(XS), np.array(YS)
        Fv = evaluate_batch(prob.F, XS, YS)
        ok = np.ones(pairs, dtype=bool)
        for g in prob.G:
            ok &= evaluate_batch(g, XS, YS) <= 1e-9
        margin = np.where(ok, Fv - Fbar, np.inf)
        k = int(np.argmin(margin))
        worst_m = float(margin[k])
        if np.isfinite(worst_m):
            worst = {"x": XS[k], "y": YS[k], "F": float(Fv[k])}
        pairs = int(ok.sum())
    return LocalMinReport(xbar, ybar, float(radius), int(X.shape[0]), pairs, bool(worst_m >= -tol), worst_m, worst)
