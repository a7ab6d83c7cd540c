"""Small shared helpers: JSON conversion and homogeneous cone feasibility."""

from __future__ import annotations

import dataclasses
import math
from enum import Enum

import numpy as np
from scipy.optimize import linprog


def to_jsonable(obj):
    """Plain-Python view of reports: arrays become lists, inf/nan become strings."""
    if hasattr(obj, "to_json") and not isinstance(obj, type):
        return to_jsonable(obj.to_json())
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def null_space(M: np.ndarray, cols: int | None = None, rtol: float = 1e-10) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    cols = M.shape[1] if cols is None else cols
    if M.size == 0:
        return np.eye(cols)
    _, s, vt = np.linalg.svd(M)
    scale = max(1.0, s[0]) if s.size else 1.0
    rank = int(np.sum(s > rtol * scale))
    return vt[rank:].T


def nonzero_in_cone(A: np.ndarray, cols: int) -> np.ndarray | None:
    """A nonzero ``c`` with ``A c >= 0``, or None.

    If ``A`` has a nontrivial kernel any kernel vector works.  Otherwise the
    map is injective, so a nonzero solution exists iff the normalized linear
    program ``A c >= 0, 1'A c = 1`` is feasible.
    """
    if cols == 0:
        return None
    A = np.asarray(A, dtype=float).reshape(-1, cols)
    if A.shape[0] == 0:
        c = np.zeros(cols)
        c[0] = 1.0
        return c
    N = null_space(A, cols)
    if N.shape[1]:
        c = N[:, 0]
        return c / np.linalg.norm(c)
    res = linprog(
        np.zeros(cols),
        A_ub=-A,
        b_ub=np.zeros(A.shape[0]),
        A_eq=A.sum(axis=0)[None, :],
        b_eq=[1.0],
        bounds=[(None, None)] * cols,
        method="highs",
    )
    if res.status != 0:
        return None
    c = res.x
    return c / np.linalg.norm(c)


def strictly_feasible_direction(N: np.ndarray, dim: int) -> np.ndarray | None:
    """A unit ``u`` with ``N u > 0`` componentwise, or None if none exists."""
    N = np.asarray(N, dtype=float).reshape(-1, dim)
    if N.shape[0] == 0:
        u = np.zeros(dim)
        u[0] = 1.0
        return u
    # maximize the smallest margin inside the unit box
    c = np.zeros(dim + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-N, np.ones((N.shape[0], 1))])
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=np.zeros(N.shape[0]),
        bounds=[(-1.0, 1.0)] * dim + [(None, 1.0)],
        method="highs",
    )
    if res.status != 0 or res.x[-1] <= 1e-12:
        return None
    u = res.x[:dim]
    return u / np.linalg.norm(u)
