"""Inner loops of the grid oracles.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature and output.  The numba path is used when numba imports and the
environment variable ``BDFOA_NUMBA`` is not ``0``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("BDFOA_NUMBA", "1") != "0"

__all__ = [
    "USE_NUMBA",
    "local_minima_mask",
    "sign_change_mask",
    "cluster_labels",
    "hausdorff",
    "numpy_impl",
    "numba_impl",
]


# ---------------------------------------------------------------------------
# numpy implementations


def _neighbor_offsets(ndim: int) -> np.ndarray:
    grids = np.meshgrid(*[np.array([-1, 0, 1])] * ndim, indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    return offs[np.any(offs != 0, axis=1)]


def _local_minima_np(values: np.ndarray, shape: tuple) -> np.ndarray:
    """values: (K, prod(shape)).  Discrete local minima (ties count) per row."""
    K = values.shape[0]
    v = values.reshape((K,) + tuple(shape))
    v = np.where(np.isnan(v), np.inf, v)
    padded = np.pad(v, [(0, 0)] + [(1, 1)] * len(shape), constant_values=np.inf)
    mask = np.isfinite(v)
    for off in _neighbor_offsets(len(shape)):
        sl = tuple(slice(1 + o, 1 + o + s) for o, s in zip(off, shape))
        mask &= v <= padded[(slice(None),) + sl]
    return mask.reshape(K, -1)


def _sign_change_np(g: np.ndarray) -> np.ndarray:
    """g: (K, G).  True at i when g changes sign on [i, i+1] or g[i] == 0."""
    out = np.zeros(g.shape, dtype=np.bool_)
    out[:, :-1] = (g[:, :-1] * g[:, 1:]) < 0
    out |= g == 0
    return out


def _cluster_np(points: np.ndarray, radius: float) -> np.ndarray:
    """Greedy leader clustering in input order; returns a label per point."""
    N = points.shape[0]
    labels = -np.ones(N, dtype=np.int64)
    leaders: list[int] = []
    for i in range(N):
        if leaders:
            d = np.sqrt(((points[leaders] - points[i]) ** 2).sum(axis=1))
            j = int(np.argmin(d))
            if d[j] <= radius:
                labels[i] = labels[leaders[j]]
                continue
        labels[i] = len(leaders)
        leaders.append(i)
    return labels


def _hausdorff_np(A: np.ndarray, B: np.ndarray) -> float:
    if A.shape[0] == 0 and B.shape[0] == 0:
        return 0.0
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.inf
    D = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2))
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _local_minima_1d_nb(values):
        K, G = values.shape
        out = np.zeros((K, G), dtype=np.bool_)
        for k in range(K):
            for i in range(G):
                v = values[k, i]
                if not np.isfinite(v):
                    continue
                ok = True
                if i > 0 and values[k, i - 1] < v:
                    ok = False
                if ok and i < G - 1 and values[k, i + 1] < v:
                    ok = False
                out[k, i] = ok
        return out

    @njit(cache=True)
    def _local_minima_2d_nb(values, n0, n1):
        K = values.shape[0]
        out = np.zeros(values.shape, dtype=np.bool_)
        for k in range(K):
            for i in range(n0):
                for j in range(n1):
                    v = values[k, i * n1 + j]
                    if not np.isfinite(v):
                        continue
                    ok = True
                    for di in range(-1, 2):
                        ii = i + di
                        if ii < 0 or ii >= n0:
                            continue
                        for dj in range(-1, 2):
                            jj = j + dj
                            if jj < 0 or jj >= n1 or (di == 0 and dj == 0):
                                continue
                            if values[k, ii * n1 + jj] < v:
                                ok = False
                                break
                        if not ok:
                            break
                    out[k, i * n1 + j] = ok
        return out

    @njit(cache=True)
    def _local_minima_nd_nb(values, shape, offsets):
        K, N = values.shape
        ndim = shape.shape[0]
        strides = np.ones(ndim, dtype=np.int64)
        for a in range(ndim - 2, -1, -1):
            strides[a] = strides[a + 1] * shape[a + 1]
        out = np.zeros((K, N), dtype=np.bool_)
        idx = np.zeros(ndim, dtype=np.int64)
        for k in range(K):
            for flat in range(N):
                v = values[k, flat]
                if not np.isfinite(v):
                    continue
                rem = flat
                for a in range(ndim):
                    idx[a] = rem // strides[a]
                    rem -= idx[a] * strides[a]
                ok = True
                for o in range(offsets.shape[0]):
                    nb = 0
                    inside = True
                    for a in range(ndim):
                        j = idx[a] + offsets[o, a]
                        if j < 0 or j >= shape[a]:
                            inside = False
                            break
                        nb += j * strides[a]
                    if inside and values[k, nb] < v:
                        ok = False
                        break
                out[k, flat] = ok
        return out

    @njit(cache=True)
    def _sign_change_nb(g):
        K, G = g.shape
        out = np.zeros((K, G), dtype=np.bool_)
        for k in range(K):
            for i in range(G):
                if g[k, i] == 0.0:
                    out[k, i] = True
                elif i < G - 1 and g[k, i] * g[k, i + 1] < 0.0:
                    out[k, i] = True
        return out

    @njit(cache=True)
    def _cluster_nb(points, radius):
        N, d = points.shape
        labels = -np.ones(N, dtype=np.int64)
        leaders = np.empty(N, dtype=np.int64)
        nlead = 0
        for i in range(N):
            best = np.inf
            bj = -1
            for q in range(nlead):
                j = leaders[q]
                s = 0.0
                for a in range(d):
                    t = points[j, a] - points[i, a]
                    s += t * t
                s = np.sqrt(s)
                if s < best:
                    best = s
                    bj = j
            if bj >= 0 and best <= radius:
                labels[i] = labels[bj]
            else:
                labels[i] = nlead
                leaders[nlead] = i
                nlead += 1
        return labels

    @njit(cache=True)
    def _hausdorff_nb(A, B):
        na = A.shape[0]
        nb = B.shape[0]
        if na == 0 and nb == 0:
            return 0.0
        if na == 0 or nb == 0:
            return np.inf
        d = A.shape[1]
        h = 0.0
        for i in range(na):
            m = np.inf
            for j in range(nb):
                s = 0.0
                for a in range(d):
                    t = A[i, a] - B[j, a]
                    s += t * t
                if s < m:
                    m = s
            if m > h:
                h = m
        for j in range(nb):
            m = np.inf
            for i in range(na):
                s = 0.0
                for a in range(d):
                    t = A[i, a] - B[j, a]
                    s += t * t
                if s < m:
                    m = s
            if m > h:
                h = m
        return np.sqrt(h)


# ---------------------------------------------------------------------------
# dispatch


def _as2d(values):
    return np.ascontiguousarray(np.atleast_2d(np.asarray(values, dtype=np.float64)))


def _local_minima_numba(values, shape):
    values = _as2d(values)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return _local_minima_1d_nb(values)
    if len(shape) == 2:
        return _local_minima_2d_nb(values, shape[0], shape[1])
    offs = _neighbor_offsets(len(shape)).astype(np.int64)
    return _local_minima_nd_nb(values, np.array(shape, dtype=np.int64), offs)


def _local_minima_numpy(values, shape):
    return _local_minima_np(_as2d(values), tuple(int(s) for s in shape))


def _pts(points):
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    return np.ascontiguousarray(p)


numpy_impl = {
    "local_minima_mask": _local_minima_numpy,
    "sign_change_mask": lambda g: _sign_change_np(_as2d(g)),
    "cluster_labels": lambda p, r: _cluster_np(_pts(p), float(r)),
    "hausdorff": lambda A, B: _hausdorff_np(_pts(A), _pts(B)),
}

if HAVE_NUMBA:
    numba_impl = {
        "local_minima_mask": _local_minima_numba,
        "sign_change_mask": lambda g: _sign_change_nb(_as2d(g)),
        "cluster_labels": lambda p, r: _cluster_nb(_pts(p), float(r)),
        "hausdorff": lambda A, B: float(_hausdorff_nb(_pts(A), _pts(B))),
    }
else:  # pragma: no cover
    numba_impl = dict(numpy_impl)

_active = numba_impl if USE_NUMBA else numpy_impl


def local_minima_mask(values, shape) -> np.ndarray:
    """Discrete local minima (non-strict) of each row of ``values`` on a grid of ``shape``."""
    return _active["local_minima_mask"](values, shape)


def sign_change_mask(g) -> np.ndarray:
    """Cells [i, i+1] where a row of ``g`` changes sign, plus exact zeros."""
    return _active["sign_change_mask"](g)


def cluster_labels(points, radius: float) -> np.ndarray:
    """Greedy leader clustering labels, deterministic in input order."""
    return _active["cluster_labels"](points, radius)


def hausdorff(A, B) -> float:
    """Two-sided Hausdorff distance between finite point sets (inf if one is empty)."""
    return _active["hausdorff"](A, B)
