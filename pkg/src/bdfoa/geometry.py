"""Directional neighbourhoods and polyhedral cone calculus for boxes.

Every normal cone that arises for a box, or for the graph of its normal-cone
map, is a finite union of sign-coordinate cones.  Those are kept as
``PolyConeRep`` pieces carrying their sign tags so downstream code can use
the cheap coordinate form; general cones (dimension at most 4) go through a
brute-force double description.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from .problems import BoxSet

__all__ = [
    "GeometryError",
    "Direction",
    "DirectionalNeighborhood",
    "nbhd_contains",
    "SignedCoordinateCone",
    "PolyConeRep",
    "ConeUnion",
    "polar",
    "tangent_cone_box",
    "normal_cone_box",
    "critical_cone",
    "GraphPiece",
    "graph_pieces_interval",
    "on_graph_interval",
    "graph_tangent_interval",
    "limiting_graph_normal_interval",
    "directional_graph_normal_interval",
    "graph_normal_box",
    "graph_tangent_box",
    "directional_normal_convex_box",
]

TOL = 1e-10
MAX_DD_DIM = 4

ZERO, FREE, NONNEG, NONPOS = "zero", "free", "nonneg", "nonpos"
TAGS = (ZERO, FREE, NONNEG, NONPOS)


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# directions and neighbourhoods


@dataclass(frozen=True)
class Direction:
    d: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if not np.all(np.isfinite(d)):
            raise GeometryError("direction must be finite")
        object.__setattr__(self, "d", d)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.d)

    def unit(self) -> np.ndarray:
        nrm = np.linalg.norm(self.d)
        return self.d / nrm if nrm > 0 else self.d.copy()


@dataclass(frozen=True)
class DirectionalNeighborhood:
    """``center + V_{eps,delta}(d)``."""

    center: np.ndarray
    epsilon: float
    delta: float
    direction: Direction

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not isinstance(self.direction, Direction):
            object.__setattr__(self, "direction", Direction(self.direction))
        if not (self.epsilon > 0 and self.delta > 0):
            raise GeometryError("epsilon and delta must be positive")
        if self.direction.d.shape != self.center.shape:
            raise GeometryError("direction and center have different dimensions")


def nbhd_contains(nbhd: DirectionalNeighborhood, z) -> bool:
    dz = np.atleast_1d(np.asarray(z, dtype=float)) - nbhd.center
    r = float(np.linalg.norm(dz))
    if r == 0.0:
        return True
    if r >= nbhd.epsilon:
        return False
    if nbhd.direction.is_zero:
        return True
    return bool(np.linalg.norm(dz / r - nbhd.direction.unit()) <= nbhd.delta)


# ---------------------------------------------------------------------------
# sign-coordinate cones


@dataclass(frozen=True)
class SignedCoordinateCone:
    """Product of coordinate sets {0}, R, R_+, R_-."""

    tags: tuple

    def __post_init__(self):
        tags = tuple(self.tags)
        bad = [t for t in tags if t not in TAGS]
        if bad:
            raise GeometryError(f"unknown coordinate tag(s) {bad}")
        object.__setattr__(self, "tags", tags)

    @property
    def dim(self) -> int:
        return len(self.tags)

    def contains(self, z, tol: float = TOL) -> bool:
        z = np.asarray(z, dtype=float)
        for t, v in zip(self.tags, z):
            if t == ZERO and abs(v) > tol:
                return False
            if t == NONNEG and v < -tol:
                return False
            if t == NONPOS and v > tol:
                return False
        return True

    def is_trivial(self) -> bool:
        return all(t == ZERO for t in self.tags)

    def polar(self) -> "SignedCoordinateCone":
        swap = {ZERO: FREE, FREE: ZERO, NONNEG: NONPOS, NONPOS: NONNEG}
        return SignedCoordinateCone(tuple(swap[t] for t in self.tags))

    def to_poly(self) -> "PolyConeRep":
        return PolyConeRep.from_signs(self.tags)

    def to_json(self) -> list:
        return list(self.tags)


# ---------------------------------------------------------------------------
# polyhedral cones


def _unit_rows(M: np.ndarray) -> np.ndarray:
    if M.size == 0:
        return M
    nrm = np.linalg.norm(M, axis=1)
    return M[nrm > 1e-14] / nrm[nrm > 1e-14, None]


def _dedupe(rows: Iterable[np.ndarray], dim: int) -> np.ndarray:
    out: list[np.ndarray] = []
    for r in rows:
        if not any(np.allclose(r, o, atol=1e-9) for o in out):
            out.append(r)
    return np.array(out, dtype=float).reshape(-1, dim)


def _null_space(M: np.ndarray, dim: int, rtol: float = 1e-10) -> np.ndarray:
    if M.shape[0] == 0:
        return np.eye(dim)
    _, s, vt = np.linalg.svd(M)
    rank = int(np.sum(s > rtol * max(1.0, s[0] if s.size else 0.0)))
    return vt[rank:].T


def _cone_generators(A: np.ndarray, E: np.ndarray, dim: int) -> np.ndarray:
    """Generators of ``{z : A z <= 0, E z = 0}`` by brute-force enumeration.

    The lineality space contributes ``+/-`` basis vectors; extreme rays of the
    pointed remainder are found as one-dimensional solutions of active
    subsystems.  Dimension is capped so the enumeration stays tiny.
    """
    if dim > MAX_DD_DIM:
        raise GeometryError(f"double description limited to dimension <= {MAX_DD_DIM}")
    A = A.reshape(-1, dim)
    E = E.reshape(-1, dim)
    L = _null_space(np.vstack([A, E]), dim)
    gens = [s * L[:, k] for k in range(L.shape[1]) for s in (1.0, -1.0)]
    base = np.vstack([E, L.T]) if L.size else E
    need = dim - 1
    rows = range(A.shape[0])
    for size in range(0, min(need, A.shape[0]) + 1):
        for S in itertools.combinations(rows, size):
            M = np.vstack([base, A[list(S)]]) if S else base
            N = _null_space(M, dim)
            if N.shape[1] != 1:
                continue
            r = N[:, 0]
            for cand in (r, -r):
                if A.shape[0] == 0 or np.all(A @ cand <= 1e-9):
                    gens.append(cand / np.linalg.norm(cand))
    return _dedupe(gens, dim)


@dataclass(frozen=True)
class PolyConeRep:
    """Convex polyhedral cone with both descriptions.

    ``halfspaces`` rows ``a`` mean ``<a, z> <= 0``; ``equalities`` rows mean
    ``<e, z> = 0``.  ``signs`` is set for sign-coordinate cones.  ``empty``
    marks the empty set (used for directional normal cones in non-tangent
    directions), which is not a cone in the usual sense.
    """

    dim: int
    generators: np.ndarray
    halfspaces: np.ndarray
    equalities: np.ndarray
    signs: tuple | None = None
    empty: bool = False

    def __post_init__(self):
        for name in ("generators", "halfspaces", "equalities"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, self.dim)
            object.__setattr__(self, name, arr)

    # constructors -------------------------------------------------------

    @classmethod
    def from_signs(cls, tags: Sequence[str]) -> "PolyConeRep":
        tags = SignedCoordinateCone(tuple(tags)).tags
        dim = len(tags)
        eye = np.eye(dim)
        gens, hs, eqs = [], [], []
        for i, t in enumerate(tags):
            if t == FREE:
                gens += [eye[i], -eye[i]]
            elif t == NONNEG:
                gens.append(eye[i])
                hs.append(-eye[i])
            elif t == NONPOS:
                gens.append(-eye[i])
                hs.append(eye[i])
            else:
                eqs.append(eye[i])
        return cls(dim, np.array(gens), np.array(hs), np.array(eqs), signs=tags)

    @classmethod
    def from_generators(cls, gens) -> "PolyConeRep":
        G = np.atleast_2d(np.asarray(gens, dtype=float))
        dim = G.shape[1]
        G = _unit_rows(G)
        H = _cone_generators(G, np.zeros((0, dim)), dim)
        return cls(dim, G, H, np.zeros((0, dim)))

    @classmethod
    def from_halfspaces(cls, halfspaces, equalities=None, dim: int | None = None) -> "PolyConeRep":
        A = np.asarray(halfspaces, dtype=float)
        if dim is None:
            dim = A.shape[-1] if A.size else np.asarray(equalities).shape[-1]
        A = A.reshape(-1, dim)
        E = np.zeros((0, dim)) if equalities is None else np.asarray(equalities, dtype=float).reshape(-1, dim)
        G = _cone_generators(A, E, dim)
        return cls(dim, G, A, E)

    @classmethod
    def empty_marker(cls, dim: int) -> "PolyConeRep":
        z = np.zeros((0, dim))
        return cls(dim, z, z, z, empty=True)

    # queries --------------------------------------------------------------

    def contains(self, z, tol: float = TOL) -> bool:
        if self.empty:
            return False
        z = np.asarray(z, dtype=float).reshape(self.dim)
        if self.halfspaces.shape[0] and np.any(self.halfspaces @ z > tol):
            return False
        if self.equalities.shape[0] and np.any(np.abs(self.equalities @ z) > tol):
            return False
        return True

    def contains_by_generators(self, z, tol: float = 1e-9) -> bool:
        """Membership in cone(generators) via nonnegative least squares."""
        if self.empty:
            return False
        z = np.asarray(z, dtype=float).reshape(self.dim)
        if self.generators.shape[0] == 0:
            return bool(np.linalg.norm(z) <= tol)
        _, res = nnls(self.generators.T, z)
        return bool(res <= tol * max(1.0, np.linalg.norm(z)))

    def is_subset_of(self, other: "PolyConeRep", tol: float = 1e-9) -> bool:
        if self.empty:
            return True
        if other.empty:
            return False
        return all(other.contains(g, tol) for g in self.generators)

    def same_cone(self, other: "PolyConeRep", tol: float = 1e-9) -> bool:
        return self.is_subset_of(other, tol) and other.is_subset_of(self, tol)

    def dual_consistent(self, tol: float = TOL) -> bool:
        return all(self.contains(g, tol) for g in self.generators)

    def to_json(self) -> dict:
        if self.empty:
            return {"empty": True, "generators": [], "halfspaces": [], "equalities": []}
        return {
            "generators": self.generators.tolist(),
            "halfspaces": self.halfspaces.tolist(),
            "equalities": self.equalities.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict, dim: int) -> "PolyConeRep":
        if doc.get("empty"):
            return cls.empty_marker(dim)
        return cls(dim, np.array(doc["generators"]), np.array(doc["halfspaces"]), np.array(doc["equalities"]))


def polar(c: PolyConeRep) -> PolyConeRep:
    """Polar cone: generators and halfspace normals trade places."""
    if c.empty:
        raise GeometryError("polar of the empty marker is undefined")
    if c.signs is not None:
        return SignedCoordinateCone(c.signs).polar().to_poly()
    if c.dim > MAX_DD_DIM:
        raise GeometryError(f"polar limited to dimension <= {MAX_DD_DIM}")
    gens = [c.halfspaces] + [c.equalities, -c.equalities]
    G = np.vstack(gens)
    if G.shape[0] == 0:
        # polar of the full space
        return PolyConeRep(c.dim, np.zeros((0, c.dim)), np.zeros((0, c.dim)), np.eye(c.dim))
    H = c.generators
    if H.shape[0] == 0:
        H = np.zeros((0, c.dim))
    return PolyConeRep(c.dim, _unit_rows(G), H, np.zeros((0, c.dim)))


@dataclass(frozen=True)
class ConeUnion:
    """Finite union of convex polyhedral cones; no piece inside another."""

    dim: int
    pieces: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(p for p in self.pieces if not p.empty))

    @classmethod
    def of(cls, dim: int, pieces: Iterable[PolyConeRep]) -> "ConeUnion":
        kept: list[PolyConeRep] = []
        for p in pieces:
            if p.empty or any(p.is_subset_of(q) for q in kept):
                continue
            kept = [q for q in kept if not q.is_subset_of(p)]
            kept.append(p)
        return cls(dim, tuple(kept))

    @property
    def is_empty(self) -> bool:
        return not self.pieces

    def contains(self, z, tol: float = TOL) -> bool:
        return any(p.contains(z, tol) for p in self.pieces)

    def sign_tags(self) -> list[tuple]:
        if any(p.signs is None for p in self.pieces):
            raise GeometryError("union contains a non-coordinate piece")
        return [p.signs for p in self.pieces]

    def to_json(self) -> dict:
        return {"pieces": [p.to_json() for p in self.pieces]}

    @classmethod
    def from_json(cls, doc: dict, dim: int) -> "ConeUnion":
        return cls(dim, tuple(PolyConeRep.from_json(p, dim) for p in doc["pieces"]))


def _union_of_signs(tag_list: Iterable[Sequence[str]]) -> ConeUnion:
    pieces = [PolyConeRep.from_signs(t) for t in tag_list]
    dim = pieces[0].dim if pieces else 2
    return ConeUnion.of(dim, pieces)


# ---------------------------------------------------------------------------
# boxes


def _at(v: float, bound: float, tol: float) -> bool:
    return bool(np.isfinite(bound) and abs(v - bound) <= tol * max(1.0, abs(bound)))


def _check_in_box(Y: BoxSet, y, tol: float = 1e-12) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (Y.dim,):
        raise GeometryError("point dimension does not match the box")
    if not Y.contains(y, tol):
        raise GeometryError(f"point {y.tolist()} lies outside the box")
    return y


def tangent_cone_box(Y: BoxSet, y, tol: float = 1e-12) -> SignedCoordinateCone:
    y = _check_in_box(Y, y, tol)
    tags = []
    for lo, hi, v in zip(Y.lower, Y.upper, y):
        at_lo, at_hi = _at(v, lo, tol), _at(v, hi, tol)
        if lo == hi or (at_lo and at_hi):
            tags.append(ZERO)
        elif at_lo:
            tags.append(NONNEG)
        elif at_hi:
            tags.append(NONPOS)
        else:
            tags.append(FREE)
    return SignedCoordinateCone(tuple(tags))


def normal_cone_box(Y: BoxSet, y, tol: float = 1e-12) -> SignedCoordinateCone:
    return tangent_cone_box(Y, y, tol).polar()


def critical_cone(Y: BoxSet, y, g, tol: float = 1e-9, bound_tol: float = 1e-12) -> SignedCoordinateCone:
    """Critical cone of the box at ``y`` for the lower-level gradient ``g``."""
    T = tangent_cone_box(Y, y, bound_tol)
    g = np.atleast_1d(np.asarray(g, dtype=float))
    tags = tuple(ZERO if abs(gi) > tol else t for t, gi in zip(T.tags, g))
    return SignedCoordinateCone(tags)


def directional_normal_convex_box(Y: BoxSet, y, d, tol: float = 1e-12) -> PolyConeRep:
    """``N_Y(y) ∩ {d}^⊥``, or the empty marker if ``d`` is not tangent."""
    T = tangent_cone_box(Y, y, tol)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if not T.contains(d, 0.0):
        return PolyConeRep.empty_marker(Y.dim)
    N = T.polar()
    tags = tuple(ZERO if di != 0 else t for t, di in zip(N.tags, d))
    return PolyConeRep.from_signs(tags)


# ---------------------------------------------------------------------------
# graph of the normal-cone map of an interval, in (y, xi) coordinates


@dataclass(frozen=True)
class GraphPiece:
    """Closed segment or half-line ``[y_lo, y_hi] x [xi_lo, xi_hi]`` (one side degenerate)."""

    name: str
    y_lo: float
    y_hi: float
    xi_lo: float
    xi_hi: float

    def contains(self, y: float, xi: float, tol: float = TOL) -> bool:
        return (
            self.y_lo - tol <= y <= self.y_hi + tol and self.xi_lo - tol <= xi <= self.xi_hi + tol
        )


def graph_pieces_interval(a: float, b: float) -> list[GraphPiece]:
    if not a <= b:
        raise GeometryError("interval requires a <= b")
    pieces = []
    if np.isfinite(a):
        pieces.append(GraphPiece("left", a, a, -np.inf, 0.0))
    pieces.append(GraphPiece("flat", a, b, 0.0, 0.0))
    if np.isfinite(b):
        pieces.append(GraphPiece("right", b, b, 0.0, np.inf))
    if a == b:
        # the degenerate interval has the whole vertical line as graph
        return [GraphPiece("vertical", a, a, -np.inf, np.inf)]
    return pieces


def _locate(a: float, b: float, y: float, xi: float, tol: float) -> str:
    """Classify a graph point: left-corner, right-corner, flat, left, right, vertical."""
    if not a <= b:
        raise GeometryError("interval requires a <= b")
    at_a, at_b = _at(y, a, tol), _at(y, b, tol)
    zero = abs(xi) <= tol
    if a == b:
        if at_a:
            return "vertical"
    elif at_a:
        if zero:
            return "left-corner"
        if xi < 0:
            return "left"
    elif at_b:
        if zero:
            return "right-corner"
        if xi > 0:
            return "right"
    elif a < y < b and zero:
        return "flat"
    raise GeometryError(f"({y:.12g}, {xi:.12g}) is not on the graph of the normal cone of [{a}, {b}]")


def on_graph_interval(a: float, b: float, y: float, xi: float, tol: float = TOL) -> bool:
    try:
        _locate(a, b, y, xi, tol)
    except GeometryError:
        return False
    return True


# (mu, nu) sign tags of the interval cases
_H = (FREE, ZERO)  # R x {0}
_V = (ZERO, FREE)  # {0} x R
_LEFT_FRECHET = (NONPOS, NONNEG)
_RIGHT_FRECHET = (NONNEG, NONPOS)

_LIMITING = {
    "left": [_H],
    "right": [_H],
    "vertical": [_H],
    "flat": [_V],
    "left-corner": [_LEFT_FRECHET, _H, _V],
    "right-corner": [_RIGHT_FRECHET, _H, _V],
}


def _limiting_tags(a, b, y, xi, tol) -> list[tuple]:
    return _LIMITING[_locate(a, b, y, xi, tol)]


def _directional_tags(a, b, y, xi, w, tol) -> list[tuple]:
    """Directional normal cone case table; [] encodes the empty set."""
    where = _locate(a, b, y, xi, tol)
    w1, w2 = float(w[0]), float(w[1])
    scale = tol * max(1.0, abs(w1), abs(w2))
    z1, z2 = abs(w1) <= scale, abs(w2) <= scale
    if z1 and z2:
        return _LIMITING[where]
    if where in ("left", "right", "vertical"):
        return [_H] if z1 else []
    if where == "flat":
        return [_V] if z2 else []
    if where == "left-corner":
        if z2 and w1 > 0:
            return [_V]
        if z1 and w2 < 0:
            return [_H]
        return []
    # right corner
    if z2 and w1 < 0:
        return [_V]
    if z1 and w2 > 0:
        return [_H]
    return []


def graph_tangent_interval(a, b, y, xi, w, tol: float = TOL) -> bool:
    """Whether ``w`` lies in the tangent cone of the graph at ``(y, xi)``."""
    return bool(_directional_tags(a, b, y, xi, w, tol))


def limiting_graph_normal_interval(a, b, y, xi, tol: float = TOL) -> ConeUnion:
    return _union_of_signs(_limiting_tags(a, b, y, xi, tol))


def directional_graph_normal_interval(a, b, y, xi, w, tol: float = TOL) -> ConeUnion:
    tags = _directional_tags(a, b, y, xi, np.asarray(w, dtype=float).reshape(2), tol)
    if not tags:
        return ConeUnion(2, ())
    return _union_of_signs(tags)


def _coords(Y: BoxSet, y, xi):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if y.shape != (Y.dim,) or xi.shape != (Y.dim,):
        raise GeometryError("point dimensions do not match the box")
    return y, xi


def graph_normal_box(Y: BoxSet, y, xi, w=None, tol: float = TOL) -> ConeUnion:
    """Product over coordinates, reordered to ``(mu_1..mu_m, nu_1..nu_m)``.

    ``w`` (if given) is the graph direction ``(v_1..v_m, eta_1..eta_m)`` in the
    same block ordering.
    """
    y, xi = _coords(Y, y, xi)
    m = Y.dim
    if w is not None:
        w = np.asarray(w, dtype=float).reshape(2 * m)
    per = []
    for i in range(m):
        a, b = Y.lower[i], Y.upper[i]
        if w is None:
            per.append(_limiting_tags(a, b, y[i], xi[i], tol))
        else:
            per.append(_directional_tags(a, b, y[i], xi[i], (w[i], w[m + i]), tol))
    if any(not p for p in per):
        return ConeUnion(2 * m, ())
    tags = []
    for combo in itertools.product(*per):
        tags.append(tuple(c[0] for c in combo) + tuple(c[1] for c in combo))
    return ConeUnion(2 * m, tuple(PolyConeRep.from_signs(t) for t in tags))


def graph_tangent_box(Y: BoxSet, y, xi, w, tol: float = TOL) -> bool:
    y, xi = _coords(Y, y, xi)
    m = Y.dim
    w = np.asarray(w, dtype=float).reshape(2 * m)
    return all(
        graph_tangent_interval(Y.lower[i], Y.upper[i], y[i], xi[i], (w[i], w[m + i]), tol)
        for i in range(m)
    )
