"""Grid oracles for the lower-level problem: solution map, stationary map,
value function and their directional behaviour.

These are desk-scale brute-force estimates.  Every result carries the
sampling window it was computed on and flags minimizers that sit on a window
edge which is not a bound of Y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels as K
from .expr import ExprDomainError, evaluate_batch, jet_batch
from .problems import DEFAULT_WINDOW, BilevelProblem

__all__ = [
    "GridSpec",
    "SolutionSample",
    "StationarySample",
    "SamplingSchedule",
    "LocalizationTrack",
    "solve_lower",
    "solve_lower_many",
    "stationary_set",
    "stationary_set_many",
    "box_residual",
    "value_function",
    "directional_solution_set",
    "localization_track",
]

DEFAULT_RESOLUTION = {1: 4001, 2: 401, 3: 101}
MERGE_RADIUS = 1e-6
STATIONARY_TOL = 1e-9
MAX_CANDIDATES = 32
_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class GridSpec:
    half_width: float = DEFAULT_WINDOW
    resolution: int | None = None
    refine: bool = True
    tie_tol: float = 1e-9
    lower: tuple | None = None  # explicit window, overrides half_width
    upper: tuple | None = None

    def __post_init__(self):
        if self.resolution is not None and self.resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        if not self.tie_tol > 0:
            raise ValueError("tie_tol must be positive")

    def points_per_axis(self, m: int) -> int:
        if self.resolution is not None:
            return int(self.resolution)
        if m not in DEFAULT_RESOLUTION:
            raise ValueError("the grid oracle supports m <= 3")
        return DEFAULT_RESOLUTION[m]

    def window(self, prob: BilevelProblem) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = prob.Y.window(self.half_width)
        if self.lower is not None:
            lo = np.maximum(lo, np.asarray(self.lower, dtype=float))
        if self.upper is not None:
            hi = np.minimum(hi, np.asarray(self.upper, dtype=float))
        if np.any(lo > hi):
            raise ValueError("sampling window does not meet Y")
        return lo, hi

    def around(self, center, radius: float) -> "GridSpec":
        c = np.asarray(center, dtype=float)
        return replace(self, lower=tuple(c - radius), upper=tuple(c + radius))


@dataclass(frozen=True)
class SolutionSample:
    x: np.ndarray
    minimizers: np.ndarray  # (k, m)
    value: float
    boundary_flag: bool
    window: tuple
    method: dict = field(default_factory=dict)

    def contains(self, y, tol: float = 1e-6) -> bool:
        if self.minimizers.size == 0:
            return False
        return bool(np.min(np.linalg.norm(self.minimizers - np.asarray(y, float), axis=1)) <= tol)


@dataclass(frozen=True)
class StationarySample:
    x: np.ndarray
    stationary_points: np.ndarray  # (k, m)
    residuals: np.ndarray
    continuum: bool = False
    ball: tuple | None = None  # (center, radius)
    window: tuple = ()


@dataclass(frozen=True)
class SamplingSchedule:
    t: tuple = tuple(2.0 ** -k for k in range(1, 21))
    perturbations: tuple = ()  # extra unit directions near u; u itself is always used

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) >= 0):
            raise ValueError("t-values must be positive and strictly decreasing")
        if t[-1] > 1e-6:
            raise ValueError("schedule must decrease to at most 1e-6")

    def directions(self, u) -> list[np.ndarray]:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return [u] + [np.atleast_1d(np.asarray(p, dtype=float)) for p in self.perturbations]


# ---------------------------------------------------------------------------
# helpers


def _axes(lo: np.ndarray, hi: np.ndarray, res: int) -> list[np.ndarray]:
    return [np.linspace(l, h, res) if h > l else np.array([l]) for l, h in zip(lo, hi)]


def _grid_points(axes: list[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _ywrt(m: int):
    return [("y", j) for j in range(m)]


def box_residual(g: np.ndarray, y: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Norm of the projected gradient; rows of ``g`` and ``y`` are points."""
    g = np.atleast_2d(g)
    y = np.atleast_2d(y)
    at_a = np.isfinite(a) & (np.abs(y - a) <= tol * np.maximum(1.0, np.abs(a)))
    at_b = np.isfinite(b) & (np.abs(y - b) <= tol * np.maximum(1.0, np.abs(b)))
    r = np.where(at_a & ~at_b, np.minimum(g, 0.0), g)
    r = np.where(at_b & ~at_a, np.maximum(r, 0.0), r)
    r = np.where(at_a & at_b, 0.0, r)
    return np.linalg.norm(r, axis=1)


def _on_window_edge(y: np.ndarray, lo, hi, Ya, Yb, tol: float = 1e-6) -> np.ndarray:
    """Rows touching a window edge that is not also a bound of Y."""
    edge_lo = (np.abs(y - lo) <= tol) & ~(np.isfinite(Ya) & (lo <= Ya))
    edge_hi = (np.abs(y - hi) <= tol) & ~(np.isfinite(Yb) & (hi >= Yb))
    return np.any(edge_lo | edge_hi, axis=1)


def _newton_refine(prob: BilevelProblem, X: np.ndarray, Y0: np.ndarray, lo, hi, step_cap: np.ndarray,
                   minimize: bool, iters: int = 50, gtol: float = 1e-12):
    """Batched projected Newton on grad_y f = 0 from starting rows ``Y0``.

    Steps are clipped to ``step_cap`` per coordinate and the iterate stays in
    the window.  With ``minimize`` only positive-curvature steps are taken.
    """
    m = prob.m
    Yc = Y0.copy()
    wrt = _ywrt(m)
    for _ in range(iters):
        _, g, H = jet_batch(prob.f, X, Yc, wrt)
        free = ~(((Yc <= lo) & (g > 0)) | ((Yc >= hi) & (g < 0)))
        gf = np.where(free, g, 0.0)
        if np.all(np.abs(gf) <= gtol):
            break
        if m == 1:
            h = H[:, 0, 0]
            ok = h > 0 if minimize else h != 0
            step = np.where(ok, -gf[:, 0] / np.where(ok, h, 1.0), 0.0)[:, None]
        else:
            step = np.zeros_like(Yc)
            for i in range(Yc.shape[0]):
                idx = np.flatnonzero(free[i])
                if idx.size == 0:
                    continue
                Hf = H[i][np.ix_(idx, idx)]
                if minimize and np.linalg.eigvalsh(Hf)[0] <= 0:
                    continue
                try:
                    step[i, idx] = -np.linalg.solve(Hf, g[i, idx])
                except np.linalg.LinAlgError:
                    continue
        step = np.clip(step, -step_cap, step_cap)
        step = np.where(np.isfinite(step), step, 0.0)
        if np.all(np.abs(step) <= 1e-16 * np.maximum(1.0, np.abs(Yc))):
            break
        Yc = np.clip(Yc + step, lo, hi)
    return Yc


def _chunks(total: int, per_row: int):
    size = max(1, _CHUNK_CELLS // max(per_row, 1))
    for s in range(0, total, size):
        yield s, min(total, s + size)


def _merge(points: np.ndarray, values: np.ndarray, radius: float = MERGE_RADIUS):
    """Cluster and keep the lowest-value representative, lexicographically sorted."""
    if points.shape[0] == 0:
        return points, values
    order = np.argsort(values, kind="stable")
    pts, vals = points[order], values[order]
    labels = K.cluster_labels(pts, radius)
    keep = [int(np.flatnonzero(labels == lab)[0]) for lab in np.unique(labels)]
    pts, vals = pts[keep], vals[keep]
    lex = np.lexsort(pts.T[::-1])
    return pts[lex], vals[lex]


# ---------------------------------------------------------------------------
# solution map


def solve_lower_many(prob: BilevelProblem, X, grid: GridSpec | None = None) -> list[SolutionSample]:
    """``solve_lower`` over the rows of ``X``, vectorized across x."""
    grid = grid or GridSpec()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != prob.n:
        raise ValueError("x has the wrong dimension")
    m = prob.m
    res = grid.points_per_axis(m)
    lo, hi = grid.window(prob)
    axes = _axes(lo, hi, res)
    shape = tuple(a.size for a in axes)
    P = _grid_points(axes)
    spacing = np.array([(a[1] - a[0]) if a.size > 1 else 0.0 for a in axes])
    Ya, Yb = prob.Y.lower, prob.Y.upper

    cand_rows, cand_y, cand_v = [], [], []
    plateau = np.zeros(X.shape[0], dtype=bool)
    for s, e in _chunks(X.shape[0], P.shape[0]):
        V = evaluate_batch(prob.f, X[s:e, None, :], P[None, :, :])
        if np.all(np.isnan(V)):
            raise ExprDomainError("lower-level objective undefined on the whole window", "f")
        mask = K.local_minima_mask(V, shape)
        for k in range(e - s):
            idx = np.flatnonzero(mask[k])
            if idx.size > MAX_CANDIDATES:
                plateau[s + k] = True
                idx = idx[np.argsort(V[k, idx], kind="stable")[:MAX_CANDIDATES]]
            cand_rows.append(np.full(idx.size, s + k))
            cand_y.append(P[idx])
            cand_v.append(V[k, idx])
    rows = np.concatenate(cand_rows)
    Yg = np.concatenate(cand_y).reshape(-1, m)
    Vg = np.concatenate(cand_v)

    Yr, Vr = Yg, Vg
    if grid.refine and rows.size:
        Xc = X[rows]
        Yn = _newton_refine(prob, Xc, Yg, lo, hi, np.maximum(spacing, 1e-12), minimize=True)
        Vn = evaluate_batch(prob.f, Xc, Yn)
        moved = np.max(np.abs(Yn - Yg) / np.maximum(spacing, 1e-300), axis=1)
        better = np.isfinite(Vn) & (Vn <= Vg + 1e-14) & (moved <= 2.0)
        Yr = np.where(better[:, None], Yn, Yg)
        Vr = np.where(better, Vn, Vg)

    # a candidate stuck on a window edge means f keeps falling outside the window
    cand_edge = _on_window_edge(Yr, lo, hi, Ya, Yb)
    out = []
    bounds = np.searchsorted(rows, np.arange(X.shape[0] + 1))
    for k in range(X.shape[0]):
        sl = slice(bounds[k], bounds[k + 1])
        ys, vs = Yr[sl], Vr[sl]
        if vs.size == 0:
            raise ExprDomainError(f"lower-level objective undefined on the window at x={X[k].tolist()}", "f")
        best = float(np.min(vs))
        keep = vs <= best + grid.tie_tol
        pts, vals = _merge(ys[keep], vs[keep])
        on_edge = bool(np.any(_on_window_edge(pts, lo, hi, Ya, Yb)))
        escaping = bool(np.any(cand_edge[sl]))
        edge = on_edge or escaping
        out.append(
            SolutionSample(
                x=X[k].copy(),
                minimizers=pts,
                value=best,
                boundary_flag=edge,
                window=(lo.copy(), hi.copy()),
                method={
                    "resolution": res,
                    "refine": grid.refine,
                    "tie_tol": grid.tie_tol,
                    "plateau": bool(plateau[k]),
                    "argmin_on_edge": on_edge,
                    "descent_leaves_window": escaping,
                },
            )
        )
    return out


def solve_lower(prob: BilevelProblem, x, grid: GridSpec | None = None) -> SolutionSample:
    if prob.m > 3:
        raise ValueError("the grid oracle supports m <= 3")
    return solve_lower_many(prob, np.atleast_1d(np.asarray(x, dtype=float))[None, :], grid)[0]


def value_function(prob: BilevelProblem, xs, grid: GridSpec | None = None) -> np.ndarray:
    """Table with rows ``(x..., V(x))``."""
    X = np.asarray(xs, dtype=float).reshape(-1, prob.n)
    samples = solve_lower_many(prob, X, grid)
    return np.column_stack([X, [s.value for s in samples]])


# ---------------------------------------------------------------------------
# stationary map


def _stationary_1d(prob, X, lo, hi, res, tol) -> list[tuple[np.ndarray, np.ndarray, bool]]:
    ys = np.linspace(lo[0], hi[0], res)
    h = ys[1] - ys[0] if res > 1 else 0.0
    a, b = prob.Y.lower[0], prob.Y.upper[0]
    wrt = _ywrt(1)
    results = []
    for s, e in _chunks(X.shape[0], res):
        Kc = e - s
        Xb = np.repeat(X[s:e], res, axis=0)
        Yb = np.tile(ys, Kc)[:, None]
        _, g, _ = jet_batch(prob.f, Xb, Yb, wrt)
        g = g[:, 0].reshape(Kc, res)
        sc = K.sign_change_mask(g)
        absg = np.abs(g)
        amin = K.local_minima_mask(absg, (res,))
        for k in range(Kc):
            gk = g[k]
            # exact zeros on a run of grid points: the gradient vanishes on an interval
            continuum = _longest_run(gk == 0) >= 3
            brackets = np.flatnonzero(sc[k] & (gk != 0))
            exact = np.flatnonzero(gk == 0)
            adjacent = sc[k] | np.concatenate([[False], sc[k][:-1]])
            near = np.flatnonzero(amin[k] & ~adjacent)
            near = near[(near > 0) & (near < res - 1)]
            if near.size > MAX_CANDIDATES:
                near = near[np.argsort(absg[k, near], kind="stable")[:MAX_CANDIDATES]]
            results.append((s + k, brackets, exact, near, continuum))
        # vectorized bracket refinement across the chunk
    return _refine_1d(prob, X, ys, h, lo, hi, a, b, results, tol)


def _longest_run(mask: np.ndarray) -> int:
    best = cur = 0
    for v in mask:
        cur = cur + 1 if v else 0
        best = max(best, cur)
    return best


def _refine_1d(prob, X, ys, h, lo, hi, a, b, found, tol):
    wrt = _ywrt(1)
    # sign-change brackets: bisection followed by a Newton polish
    rows, L, R = [], [], []
    for row, brackets, _, _, _ in found:
        rows.append(np.full(brackets.size, row))
        L.append(ys[brackets])
        R.append(ys[np.minimum(brackets + 1, ys.size - 1)])
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    L = np.concatenate(L) if L else np.zeros(0)
    R = np.concatenate(R) if R else np.zeros(0)
    roots = np.zeros(0)
    if rows.size:
        Xr = X[rows]
        gL = jet_batch(prob.f, Xr, L[:, None], wrt)[1][:, 0]
        for _ in range(60):
            mid = 0.5 * (L + R)
            gm = jet_batch(prob.f, Xr, mid[:, None], wrt)[1][:, 0]
            left = np.sign(gm) == np.sign(gL)
            L = np.where(left, mid, L)
            gL = np.where(left, gm, gL)
            R = np.where(left, R, mid)
        roots = 0.5 * (L + R)
        lo_b, hi_b = L - 1e-15, R + 1e-15
        for _ in range(3):
            _, g, H = jet_batch(prob.f, Xr, roots[:, None], wrt)
            hh = H[:, 0, 0]
            stepped = roots - np.where(hh != 0, g[:, 0] / np.where(hh != 0, hh, 1.0), 0.0)
            roots = np.where((stepped >= lo_b) & (stepped <= hi_b), stepped, roots)

    # near-touching zeros of |g|: Newton from the grid point, must stay within one cell
    nrows, nstart = [], []
    for row, _, _, near, _ in found:
        nrows.append(np.full(near.size, row))
        nstart.append(ys[near])
    nrows = np.concatenate(nrows) if nrows else np.zeros(0, int)
    nstart = np.concatenate(nstart) if nstart else np.zeros(0)
    nroots = np.zeros(0)
    if nrows.size:
        Yn = _newton_refine(prob, X[nrows], nstart[:, None], lo, hi, np.array([h]), minimize=False, iters=80)
        nroots = Yn[:, 0]
        far = np.abs(nroots - nstart) > 1.5 * h
        nroots = np.where(far, np.nan, nroots)

    out = []
    ri = np.searchsorted(rows, np.arange(X.shape[0] + 1))
    ni = np.searchsorted(nrows, np.arange(X.shape[0] + 1))
    for row, _, exact, _, continuum in found:
        pts = np.concatenate([roots[ri[row]:ri[row + 1]], ys[exact], nroots[ni[row]:ni[row + 1]]])
        pts = pts[np.isfinite(pts)]
        # box endpoints that are stationary through the normal cone
        extra = []
        if np.isfinite(a) and lo[0] <= a:
            extra.append(a)
        if np.isfinite(b) and hi[0] >= b:
            extra.append(b)
        pts = np.concatenate([pts, np.array(extra)])[:, None]
        if pts.shape[0] == 0:
            out.append((np.zeros((0, 1)), np.zeros(0), continuum))
            continue
        Xr = np.repeat(X[row][None, :], pts.shape[0], axis=0)
        _, g, _ = jet_batch(prob.f, Xr, pts, wrt)
        r = box_residual(g, pts, np.array([a]), np.array([b]))
        ok = r <= tol
        pts, r = pts[ok], r[ok]
        pts, r = _merge(pts, r)
        out.append((pts, r, continuum))
    return out


def _stationary_nd(prob, x, lo, hi, res, tol):
    m = prob.m
    axes = _axes(lo, hi, res)
    shape = tuple(a.size for a in axes)
    P = _grid_points(axes)
    spacing = np.array([(a[1] - a[0]) if a.size > 1 else 1e-12 for a in axes])
    a, b = prob.Y.lower, prob.Y.upper
    Xb = np.broadcast_to(x, (P.shape[0], prob.n))
    _, g, _ = jet_batch(prob.f, Xb, P, _ywrt(m))
    r = box_residual(g, P, a, b)
    mask = K.local_minima_mask(r[None, :], shape)[0]
    idx = np.flatnonzero(mask)
    continuum = bool(np.all(r == 0))
    if idx.size > 4 * MAX_CANDIDATES:
        idx = idx[np.argsort(r[idx], kind="stable")[: 4 * MAX_CANDIDATES]]
    Y0 = P[idx]
    Xc = np.broadcast_to(x, (idx.size, prob.n)).copy()
    Yn = _newton_refine(prob, Xc, Y0, lo, hi, spacing, minimize=False, iters=80)
    far = np.any(np.abs(Yn - Y0) > 1.5 * spacing, axis=1)
    _, g2, _ = jet_batch(prob.f, Xc, Yn, _ywrt(m)) if idx.size else (None, np.zeros((0, m)), None)
    r2 = box_residual(g2, Yn, a, b) if idx.size else np.zeros(0)
    ok = (r2 <= tol) & ~far
    pts, rr = _merge(Yn[ok], r2[ok])
    return pts, rr, continuum


def stationary_set_many(prob: BilevelProblem, X, grid: GridSpec | None = None,
                        tol: float = STATIONARY_TOL) -> list[StationarySample]:
    grid = grid or GridSpec()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo, hi = grid.window(prob)
    res = grid.points_per_axis(prob.m)
    if prob.m == 1:
        found = _stationary_1d(prob, X, lo, hi, res, tol)
    else:
        found = [_stationary_nd(prob, X[k], lo, hi, res, tol) for k in range(X.shape[0])]
    return [
        StationarySample(X[k].copy(), pts, r, continuum, None, (lo.copy(), hi.copy()))
        for k, (pts, r, continuum) in enumerate(found)
    ]


def stationary_set(prob: BilevelProblem, x, grid: GridSpec | None = None,
                   tol: float = STATIONARY_TOL) -> StationarySample:
    if prob.m > 3:
        raise ValueError("the grid oracle supports m <= 3")
    return stationary_set_many(prob, np.atleast_1d(np.asarray(x, dtype=float))[None, :], grid, tol)[0]


# ---------------------------------------------------------------------------
# directional behaviour


def _schedule_points(xbar, u, sched: SamplingSchedule) -> tuple[np.ndarray, np.ndarray]:
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    X, T = [], []
    for d in sched.directions(u):
        for t in sched.t:
            X.append(xbar + t * d)
            T.append(t)
    return np.array(X), np.array(T)


def directional_solution_set(prob: BilevelProblem, xbar, u, sched: SamplingSchedule | None = None,
                             grid: GridSpec | None = None, radius: float = 1e-3) -> np.ndarray:
    """Cluster points of minimizers along ``xbar + t_k u`` as ``t_k -> 0``.

    Only the tail of the schedule (``t <= 1e-3``, at least three values) is
    used, so early transients do not create spurious cluster points.
    """
    sched = sched or SamplingSchedule()
    X, T = _schedule_points(xbar, u, sched)
    ts_all = np.asarray(sched.t)
    cutoff = max(min(1e-3, ts_all[0]), ts_all[-3] if ts_all.size >= 3 else ts_all[0])
    sel = T <= cutoff
    samples = solve_lower_many(prob, X[sel], grid)
    pts, ts = [], []
    for s, t in zip(samples, T[sel]):
        for y in s.minimizers:
            pts.append(y)
            ts.append(t)
    if not pts:
        return np.zeros((0, prob.m))
    pts = np.array(pts)
    ts = np.array(ts)
    order = np.argsort(ts, kind="stable")  # smallest t leads each cluster
    pts = pts[order]
    labels = K.cluster_labels(pts, radius)
    reps = np.array([pts[np.flatnonzero(labels == lab)[0]] for lab in np.unique(labels)])
    return reps[np.lexsort(reps.T[::-1])]


@dataclass(frozen=True)
class LocalizationTrack:
    t: np.ndarray
    points: tuple  # per t, (k, m) array of stationary points in the ball
    single_valued: bool
    lost: bool
    continuum: bool
    lipschitz: float
    ball: tuple

    def branch(self) -> np.ndarray:
        """The tracked branch as rows ``(t, y...)`` where single-valued."""
        rows = [np.concatenate([[t], p[0]]) for t, p in zip(self.t, self.points) if p.shape[0] == 1]
        return np.array(rows)


def localization_track(prob: BilevelProblem, xbar, ybar, u, sched: SamplingSchedule | None = None,
                       ball_radius: float = 0.4, grid: GridSpec | None = None,
                       tol: float = STATIONARY_TOL) -> LocalizationTrack:
    """Follow ``S_FO(xbar + t u) ∩ B(ybar, r)`` along the schedule."""
    sched = sched or SamplingSchedule()
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    ybar = np.atleast_1d(np.asarray(ybar, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    grid = (grid or GridSpec()).around(ybar, ball_radius)
    t = np.asarray(sched.t, dtype=float)
    X = xbar[None, :] + t[:, None] * u[None, :]
    base = stationary_set(prob, xbar, grid, tol)
    samples = stationary_set_many(prob, X, grid, tol)
    pts = []
    continuum = base.continuum
    for s in samples:
        p = s.stationary_points
        p = p[np.linalg.norm(p - ybar, axis=1) <= ball_radius] if p.size else p.reshape(0, prob.m)
        pts.append(p)
        continuum = continuum or s.continuum
    lost = any(p.shape[0] == 0 for p in pts)
    single = not continuum and not lost and all(p.shape[0] == 1 for p in pts)
    lip = 0.0
    seq_x = [xbar] + list(X)
    seq_y = [ybar] + [p[0] if p.shape[0] == 1 else None for p in pts]
    for i in range(len(seq_x) - 1):
        if seq_y[i] is None or seq_y[i + 1] is None:
            continue
        dx = np.linalg.norm(seq_x[i + 1] - seq_x[i])
        if dx > 0:
            lip = max(lip, float(np.linalg.norm(seq_y[i + 1] - seq_y[i]) / dx))
    if not single:
        lip = math.inf if continuum else lip
    return LocalizationTrack(t, tuple(pts), single, lost, continuum, lip, (ybar.copy(), float(ball_radius)))
