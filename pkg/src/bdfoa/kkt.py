"""Constraint qualifications and directional KKT certificates for the
single-level reformulation

    min F(x, y)  s.t.  G(x, y) <= 0,  (y, -grad_y f(x, y)) in gph N_Y.

Multipliers are ordered ``(mu, nu, beta)``: ``mu`` pairs with the ``y`` block
of the graph constraint, ``nu`` with the ``-grad_y f`` block and ``beta`` with
the inequalities.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, lsq_linear

from . import geometry as geo
from ._util import nonzero_in_cone, null_space, to_jsonable
from .expr import EvalPoint, differentiate, evaluate, poly_degree
from .lower import box_residual
from .problems import BilevelProblem

__all__ = [
    "KktError",
    "CqEvidence",
    "KktCertificate",
    "LinearizedCheck",
    "PointData",
    "point_data",
    "constraint_jacobian",
    "jacobian_fd_error",
    "linearized_cone_contains",
    "find_critical_direction",
    "check_nnamcq",
    "check_foscms",
    "detect_affine_polyhedral",
    "assumed_cq",
    "certify_directional_kkt",
    "certify_interior",
]

ACTIVE_TOL = 1e-9
LIN_TOL = 1e-10
CRIT_TOL = 1e-8
RESIDUAL_TOL = 1e-6
WITNESS_TOL = 1e-8


class KktError(ValueError):
    """Raised when a precondition fails or no multipliers exist."""

    def __init__(self, message: str, best_residual: float | None = None):
        super().__init__(message)
        self.best_residual = best_residual


@dataclass(frozen=True)
class PointData:
    x: np.ndarray
    y: np.ndarray
    gradF: np.ndarray
    grad_y_f: np.ndarray
    A: np.ndarray  # d(grad_y f)/dx, (m, n)
    B: np.ndarray  # d(grad_y f)/dy, (m, m)
    G: np.ndarray
    gradG: np.ndarray  # (q, n+m)

    @property
    def xi(self) -> np.ndarray:
        return -self.grad_y_f

    def active(self, tol: float = ACTIVE_TOL) -> np.ndarray:
        return np.flatnonzero(self.G >= -tol)


def point_data(prob: BilevelProblem, x, y) -> PointData:
    p = EvalPoint(x, y)
    n = prob.n
    dF = differentiate(prob.F, p)
    df = differentiate(prob.f, p)
    Gs = [differentiate(g, p) for g in prob.G]
    return PointData(
        p.x,
        p.y,
        dF.gradient,
        df.gradient[n:],
        df.hessian[n:, :n],
        df.hessian[n:, n:],
        np.array([g.value for g in Gs]),
        np.array([g.gradient for g in Gs]).reshape(len(Gs), n + prob.m),
    )


def constraint_jacobian(prob: BilevelProblem, x, y, data: PointData | None = None) -> np.ndarray:
    """Jacobian of ``(x, y) -> (y, -grad_y f, G)``, shape ``(2m + q, n + m)``."""
    d = data or point_data(prob, x, y)
    n, m = prob.n, prob.m
    top = np.hstack([np.zeros((m, n)), np.eye(m)])
    mid = -np.hstack([d.A, d.B])
    return np.vstack([top, mid, d.gradG])


def jacobian_fd_error(prob: BilevelProblem, x, y, h: float = 1e-6) -> float:
    """Max relative difference between the Jacobian and central differences of the map."""
    n = prob.n
    z0 = np.concatenate([np.atleast_1d(x), np.atleast_1d(y)]).astype(float)

    def phi(z):
        p = EvalPoint(z[:n], z[n:])
        gy = differentiate(prob.f, p).gradient[n:]
        return np.concatenate([z[n:], -gy, [evaluate(g, p) for g in prob.G]])

    J = constraint_jacobian(prob, z0[:n], z0[n:])
    fd = np.empty_like(J)
    for k in range(z0.size):
        e = np.zeros_like(z0)
        e[k] = h
        fd[:, k] = (phi(z0 + e) - phi(z0 - e)) / (2 * h)
    return float(np.max(np.abs(J - fd) / np.maximum(1.0, np.abs(J))))


def _require_feasible(prob: BilevelProblem, d: PointData, tol: float = 1e-8) -> None:
    if not prob.Y.contains(d.y, 1e-12):
        raise KktError("y lies outside Y")
    r = float(box_residual(d.grad_y_f[None, :], d.y[None, :], prob.Y.lower, prob.Y.upper)[0])
    if r > tol:
        raise KktError(f"point is not lower-level stationary (residual {r:.3g})")
    if d.G.size and np.max(d.G) > tol:
        raise KktError(f"upper-level constraint violated (max G = {np.max(d.G):.3g})")


# ---------------------------------------------------------------------------
# linearized cone and critical directions


@dataclass(frozen=True)
class LinearizedCheck:
    contains: bool
    active: np.ndarray
    gradG_dir: np.ndarray
    graph_direction: np.ndarray
    graph_tangent: bool


def graph_direction(d: PointData, u, v) -> np.ndarray:
    """``(v, -d(grad_y f)(u, v))`` in the ``(y, xi)`` block ordering."""
    return np.concatenate([v, -(d.A @ u + d.B @ v)])


def linearized_cone_contains(prob: BilevelProblem, x, y, u, v, data: PointData | None = None,
                             tol: float = LIN_TOL) -> LinearizedCheck:
    d = data or point_data(prob, x, y)
    _require_feasible(prob, d)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    act = d.active()
    gdir = d.gradG @ np.concatenate([u, v]) if d.gradG.size else np.zeros(0)
    ok_G = bool(np.all(gdir[act] <= tol)) if act.size else True
    w = graph_direction(d, u, v)
    tangent = geo.graph_tangent_box(prob.Y, d.y, d.xi, w)
    return LinearizedCheck(ok_G and tangent, act, gdir, w, tangent)


def _interior(prob: BilevelProblem, y: np.ndarray, margin: float = 1e-9) -> bool:
    return bool(np.all(y - prob.Y.lower > margin) and np.all(prob.Y.upper - y > margin))


def find_critical_direction(prob: BilevelProblem, x, y, u, data: PointData | None = None) -> np.ndarray | None:
    """A ``v`` with ``(u, v)`` in the linearized cone and ``grad F (u, v) = 0``, or None."""
    d = data or point_data(prob, x, y)
    _require_feasible(prob, d)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = prob.n, prob.m
    if _interior(prob, d.y):
        if np.linalg.svd(d.B, compute_uv=False)[-1] <= 1e-12 * max(1.0, np.abs(d.B).max()):
            raise KktError("lower-level Hessian is singular at an interior point")
        v = -np.linalg.solve(d.B, d.A @ u)
        dF = float(d.gradF @ np.concatenate([u, v]))
        if abs(dF) > CRIT_TOL:
            return None
        return v if linearized_cone_contains(prob, x, y, u, v, d).contains else None
    return _critical_on_pieces(prob, d, u)


def _tangent_pieces(prob: BilevelProblem, d: PointData) -> list[list[tuple[str, str]]]:
    """Per coordinate, the tangent pieces of the interval graph as (v-tag, eta-tag)."""
    out = []
    for i in range(prob.m):
        where = geo._locate(prob.Y.lower[i], prob.Y.upper[i], d.y[i], d.xi[i], geo.TOL)
        out.append(
            {
                "flat": [(geo.FREE, geo.ZERO)],
                "left": [(geo.ZERO, geo.FREE)],
                "right": [(geo.ZERO, geo.FREE)],
                "vertical": [(geo.ZERO, geo.FREE)],
                "left-corner": [(geo.NONNEG, geo.ZERO), (geo.ZERO, geo.NONPOS)],
                "right-corner": [(geo.NONPOS, geo.ZERO), (geo.ZERO, geo.NONNEG)],
            }[where]
        )
    return out


def _sign_rows(tag: str, row: np.ndarray):
    """Inequality rows ``a v <= 0`` and equality rows ``a v = 0`` from one tag on ``row . v``."""
    if tag == geo.ZERO:
        return [], [row]
    if tag == geo.NONNEG:
        return [-row], []
    if tag == geo.NONPOS:
        return [row], []
    return [], []


def _critical_on_pieces(prob: BilevelProblem, d: PointData, u: np.ndarray) -> np.ndarray | None:
    m = prob.m
    act = d.active()
    Gu = d.gradG[:, : prob.n] @ u if d.gradG.size else np.zeros(0)
    Gv = d.gradG[:, prob.n :] if d.gradG.size else np.zeros((0, m))
    eye = np.eye(m)
    for combo in itertools.product(*_tangent_pieces(prob, d)):
        A_ub, b_ub, A_eq, b_eq = [], [], [], []
        for i, (vt, et) in enumerate(combo):
            ub, eq = _sign_rows(vt, eye[i])
            A_ub += ub
            b_ub += [0.0] * len(ub)
            A_eq += eq
            b_eq += [0.0] * len(eq)
            # eta_i = -(A u)_i - B_i v
            Au = float((d.A @ u)[i])
            if et == geo.ZERO:
                A_eq.append(d.B[i])
                b_eq.append(-Au)
            elif et == geo.NONNEG:
                A_ub.append(d.B[i])
                b_ub.append(-Au)
            elif et == geo.NONPOS:
                A_ub.append(-d.B[i])
                b_ub.append(Au)
        for k in act:
            A_ub.append(Gv[k])
            b_ub.append(-Gu[k])
        A_eq.append(d.gradF[prob.n :])
        b_eq.append(-float(d.gradF[: prob.n] @ u))
        res = linprog(
            np.zeros(m),
            A_ub=np.array(A_ub).reshape(-1, m) if A_ub else None,
            b_ub=np.array(b_ub) if A_ub else None,
            A_eq=np.array(A_eq).reshape(-1, m),
            b_eq=np.array(b_eq),
            bounds=[(None, None)] * m,
            method="highs",
        )
        if res.status == 0:
            v = res.x
            if linearized_cone_contains(prob, d.x, d.y, u, v, d, tol=1e-8).contains:
                return v
    return None


# ---------------------------------------------------------------------------
# constraint qualifications


@dataclass(frozen=True)
class CqEvidence:
    kind: str  # NNAMCQ | FOSCMS | affine+polyhedral | assumed
    holds: bool
    direction: np.ndarray | None = None
    violating: dict | None = None
    pieces_examined: int = 0
    modulus: str = "not-computed"

    def to_json(self) -> dict:
        return to_jsonable(
            {
                "kind": self.kind,
                "holds": self.holds,
                "direction": self.direction,
                "violating": self.violating,
                "pieces_examined": self.pieces_examined,
                "modulus": self.modulus,
            }
        )


def _adjoint(prob: BilevelProblem, d: PointData) -> np.ndarray:
    """Columns map (mu, nu, beta) to ``J^T (mu, nu) + grad G^T beta``."""
    J = constraint_jacobian(prob, d.x, d.y, d)
    return J.T


def _abnormal_search(prob: BilevelProblem, d: PointData, tag_list, beta_tags) -> tuple[dict | None, int]:
    M = _adjoint(prob, d)
    m, q = prob.m, prob.q
    for piece_no, tags in enumerate(tag_list):
        full = list(tags) + list(beta_tags)
        cols = [k for k, t in enumerate(full) if t != geo.ZERO]
        if not cols:
            continue
        Z = null_space(M[:, cols], len(cols))
        if Z.shape[1] == 0:
            continue
        rows = []
        for j, k in enumerate(cols):
            if full[k] == geo.NONNEG:
                rows.append(Z[j])
            elif full[k] == geo.NONPOS:
                rows.append(-Z[j])
        A = np.array(rows).reshape(-1, Z.shape[1])
        c = nonzero_in_cone(A, Z.shape[1])
        if c is None:
            continue
        zeta = np.zeros(len(full))
        zeta[cols] = Z @ c
        zeta /= np.linalg.norm(zeta)
        resid = float(np.linalg.norm(M @ zeta))
        if resid > WITNESS_TOL:
            continue
        return {
            "mu": zeta[:m],
            "nu": zeta[m : 2 * m],
            "beta": zeta[2 * m :],
            "adjoint_residual": resid,
            "piece": piece_no,
            "piece_tags": list(tags),
        }, piece_no + 1
    return None, len(tag_list)


def check_nnamcq(prob: BilevelProblem, x, y, data: PointData | None = None) -> CqEvidence:
    d = data or point_data(prob, x, y)
    _require_feasible(prob, d)
    cone = geo.graph_normal_box(prob.Y, d.y, d.xi)
    act = set(d.active().tolist())
    beta_tags = [geo.NONNEG if i in act else geo.ZERO for i in range(prob.q)]
    witness, examined = _abnormal_search(prob, d, cone.sign_tags(), beta_tags)
    return CqEvidence("NNAMCQ", witness is None, None, witness, examined)


def check_foscms(prob: BilevelProblem, x, y, u, v, data: PointData | None = None) -> CqEvidence:
    d = data or point_data(prob, x, y)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    lin = linearized_cone_contains(prob, x, y, u, v, d)
    if not lin.contains:
        raise KktError("direction is not in the linearized cone")
    cone = geo.graph_normal_box(prob.Y, d.y, d.xi, lin.graph_direction)
    act = set(lin.active.tolist())
    beta_tags = [
        geo.NONNEG if (i in act and abs(lin.gradG_dir[i]) <= CRIT_TOL) else geo.ZERO for i in range(prob.q)
    ]
    witness, examined = _abnormal_search(prob, d, cone.sign_tags(), beta_tags)
    return CqEvidence("FOSCMS", witness is None, np.concatenate([u, v]), witness, examined)


def detect_affine_polyhedral(prob: BilevelProblem) -> bool:
    """Affine G, quadratic f (so the graph map is affine) and a box Y."""
    return all(poly_degree(g) <= 1 for g in prob.G) and poly_degree(prob.f) <= 2


def assumed_cq(note: str = "declared by the user") -> CqEvidence:
    return CqEvidence("assumed", True, violating={"note": note})


def affine_polyhedral_cq(prob: BilevelProblem) -> CqEvidence:
    return CqEvidence("affine+polyhedral", detect_affine_polyhedral(prob))


# ---------------------------------------------------------------------------
# certificates


def _bounds_for(tag: str) -> tuple[float, float]:
    return {
        geo.FREE: (-np.inf, np.inf),
        geo.NONNEG: (0.0, np.inf),
        geo.NONPOS: (-np.inf, 0.0),
    }[tag]


@dataclass(frozen=True)
class KktCertificate:
    problem: str
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    beta: np.ndarray
    active: np.ndarray
    residual: float
    residual_rows: np.ndarray
    piece: int
    piece_tags: tuple
    passing_pieces: tuple
    comp_G: float
    comp_dir: float
    cq: CqEvidence
    tolerance: float = RESIDUAL_TOL
    cone: str = "directional"

    def verify(self, prob: BilevelProblem, tol: float | None = None) -> bool:
        """Recompute every residual from fresh derivatives."""
        tol = self.tolerance if tol is None else tol
        d = point_data(prob, self.x, self.y)
        M = _adjoint(prob, d)
        zeta = np.concatenate([self.mu, self.nu, self.beta])
        r = d.gradF + M @ zeta
        if np.max(np.abs(r)) > tol:
            return False
        if self.beta.size and np.any(self.beta < 0):
            return False
        piece = geo.PolyConeRep.from_signs(self.piece_tags)
        if not piece.contains(np.concatenate([self.mu, self.nu]), 1e-10):
            return False
        if self.beta.size:
            if np.max(np.abs(self.beta * d.G)) > tol:
                return False
            gdir = d.gradG @ np.concatenate([self.u, self.v])
            if np.max(np.abs(self.beta * gdir)) > tol:
                return False
        if self.cone == "directional":
            w = graph_direction(d, self.u, self.v)
            cone = geo.graph_normal_box(prob.Y, d.y, d.xi, w)
            if not cone.contains(np.concatenate([self.mu, self.nu]), 1e-10):
                return False
        return True

    def to_json(self) -> dict:
        return to_jsonable(
            {
                "problem": self.problem,
                "point": {"x": self.x, "y": self.y},
                "direction": {"u": self.u, "v": self.v},
                "mu": self.mu,
                "nu": self.nu,
                "beta": self.beta,
                "active_set": self.active,
                "residuals": {
                    "stationarity": self.residual,
                    "stationarity_rows": self.residual_rows,
                    "beta_perp_G": self.comp_G,
                    "beta_perp_gradG_dir": self.comp_dir,
                },
                "piece": {"index": self.piece, "tags": list(self.piece_tags), "cone": self.cone},
                "passing_pieces": list(self.passing_pieces),
                "cq": self.cq.to_json(),
                "tolerances": {"stationarity": self.tolerance, "critical": CRIT_TOL, "linearized": LIN_TOL},
            }
        )


def _solve_pieces(prob: BilevelProblem, d: PointData, tag_list, beta_tags, u, v, cq, cone_kind):
    M = _adjoint(prob, d)
    m = prob.m
    best = np.inf
    passing = []
    first = None
    for k, tags in enumerate(tag_list):
        full = list(tags) + list(beta_tags)
        cols = [j for j, t in enumerate(full) if t != geo.ZERO]
        zeta = np.zeros(len(full))
        if cols:
            lb, ub = zip(*(_bounds_for(full[j]) for j in cols))
            sol = lsq_linear(M[:, cols], -d.gradF, bounds=(np.array(lb), np.array(ub)), method="bvls",
                             tol=1e-14, lsmr_tol=None)
            zeta[cols] = np.clip(sol.x, lb, ub)
        rows = d.gradF + M @ zeta
        res = float(np.max(np.abs(rows)))
        best = min(best, res)
        if res <= RESIDUAL_TOL:
            passing.append(k)
            if first is None:
                first = (k, tags, zeta, rows, res)
    if first is None:
        raise KktError(f"no normal-cone piece admits multipliers (best residual {best:.3g})", best)
    k, tags, zeta, rows, res = first
    beta = zeta[2 * m :]
    gdir = d.gradG @ np.concatenate([u, v]) if d.gradG.size else np.zeros(0)
    return KktCertificate(
        problem="",
        x=d.x,
        y=d.y,
        u=u,
        v=v,
        mu=zeta[:m],
        nu=zeta[m : 2 * m],
        beta=beta,
        active=d.active(),
        residual=res,
        residual_rows=rows,
        piece=k,
        piece_tags=tuple(tags),
        passing_pieces=tuple(passing),
        comp_G=float(np.max(np.abs(beta * d.G))) if beta.size else 0.0,
        comp_dir=float(np.max(np.abs(beta * gdir))) if beta.size else 0.0,
        cq=cq,
        cone=cone_kind,
    )


def _with_name(cert: KktCertificate, name: str) -> KktCertificate:
    from dataclasses import replace

    return replace(cert, problem=name)


def certify_directional_kkt(prob: BilevelProblem, x, y, u, v, cq: CqEvidence,
                            data: PointData | None = None) -> KktCertificate:
    d = data or point_data(prob, x, y)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    lin = linearized_cone_contains(prob, x, y, u, v, d)
    if not lin.contains:
        raise KktError("direction is not in the linearized cone")
    dF = float(d.gradF @ np.concatenate([u, v]))
    if abs(dF) > CRIT_TOL:
        raise KktError(f"direction is not critical (grad F (u, v) = {dF:.3g})")
    if not cq.holds:
        raise KktError(f"constraint qualification {cq.kind} does not hold")
    cone = geo.graph_normal_box(prob.Y, d.y, d.xi, lin.graph_direction)
    act = set(lin.active.tolist())
    beta_tags = [
        geo.NONNEG if (i in act and abs(lin.gradG_dir[i]) <= CRIT_TOL) else geo.ZERO for i in range(prob.q)
    ]
    cert = _solve_pieces(prob, d, cone.sign_tags(), beta_tags, u, v, cq, "directional")
    return _with_name(cert, prob.name)


def certify_interior(prob: BilevelProblem, x, y, u, v, cq: CqEvidence,
                     data: PointData | None = None) -> KktCertificate:
    d = data or point_data(prob, x, y)
    if not _interior(prob, d.y):
        raise KktError("y is on the boundary of Y; use the directional certificate")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    lin = linearized_cone_contains(prob, x, y, u, v, d)
    if not lin.contains:
        raise KktError("direction is not in the linearized cone")
    dF = float(d.gradF @ np.concatenate([u, v]))
    if abs(dF) > CRIT_TOL:
        raise KktError(f"direction is not critical (grad F (u, v) = {dF:.3g})")
    if not cq.holds:
        raise KktError(f"constraint qualification {cq.kind} does not hold")
    m = prob.m
    tags = (geo.ZERO,) * m + (geo.FREE,) * m
    act = set(lin.active.tolist())
    beta_tags = [
        geo.NONNEG if (i in act and abs(lin.gradG_dir[i]) <= CRIT_TOL) else geo.ZERO for i in range(prob.q)
    ]
    cert = _solve_pieces(prob, d, [tags], beta_tags, u, v, cq, "interior")
    return _with_name(cert, prob.name)
