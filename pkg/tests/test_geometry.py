import itertools

import numpy as np
import pytest

from bdfoa import geometry as geo
from bdfoa.geometry import (
    FREE, NONNEG, NONPOS, ZERO, ConeUnion, Direction, DirectionalNeighborhood, PolyConeRep, nbhd_contains,
)
from bdfoa.problems import BoxSet

# ---------------------------------------------------------------------------
# independent sampling oracle for normal cones of the interval graph
#
# The graph of N_[a,b] is a union of segments.  A vector z is a Frechet normal
# at p iff <z, q - p> <= o(|q - p|); on straight pieces it is enough to test
# unit directions towards nearby graph points.


def _segments(a, b):
    segs = []
    if np.isfinite(a):
        segs.append(((a, -np.inf), (a, 0.0)))
    if a == b:
        return [((a, -np.inf), (a, np.inf))]
    segs.append(((a, 0.0), (b, 0.0)))
    if np.isfinite(b):
        segs.append(((b, 0.0), (b, np.inf)))
    return segs


def _nearby(segs, p, rho, count=60):
    out = []
    for (y0, x0), (y1, x1) in segs:
        lo = np.array([max(y0, p[0] - rho), max(x0, p[1] - rho)])
        hi = np.array([min(y1, p[0] + rho), min(x1, p[1] + rho)])
        if np.any(lo > hi + 1e-15):
            continue
        for s in np.linspace(0, 1, count):
            q = lo + s * (hi - lo)
            d = np.linalg.norm(q - p)
            if 1e-14 < d <= rho * (1 + 1e-12):
                out.append((q - p) / d)
    return np.array(out).reshape(-1, 2)


def frechet_oracle(segs, p, z, rho):
    D = _nearby(segs, np.asarray(p, float), rho)
    return bool(D.size == 0 or np.max(D @ z) <= 1e-9 * max(1.0, np.linalg.norm(z)))


def on_graph(segs, p):
    return bool(_nearby(segs, p, 1e-12, 3).size) or any(
        min(y0, y1) - 1e-15 <= p[0] <= max(y0, y1) + 1e-15 and min(x0, x1) - 1e-15 <= p[1] <= max(x0, x1) + 1e-15
        for (y0, x0), (y1, x1) in segs
    )


def limiting_oracle(segs, p, z, eta=1e-3):
    p = np.asarray(p, float)
    bases = [p] + [p + eta * np.array(d) for d in ((1, 0), (-1, 0), (0, 1), (0, -1))]
    bases = [q for q in bases if on_graph(segs, q)]
    return any(frechet_oracle(segs, q, z, eta / 10) for q in bases)


def directional_oracle(segs, p, w, z, t=1e-4):
    w = np.asarray(w, float)
    if not np.any(w):
        return limiting_oracle(segs, p, z)
    q = np.asarray(p, float) + t * w / np.linalg.norm(w)
    if not on_graph(segs, q):
        return False
    return frechet_oracle(segs, q, z, t / 10)


TEST_Z = [np.array(v, float) for v in itertools.product([-1.0, 0.0, 1.0], repeat=2) if any(v)] + [
    np.array([2.0, -0.5]), np.array([-0.3, 1.7]), np.array([0.4, 0.4]),
]


def _cases(rng):
    """(a, b, y, xi, name) covering the five cases of the interval table."""
    a = float(rng.uniform(-2, 1))
    b = a + float(rng.uniform(0.5, 2))
    return [
        (a, b, a, -float(rng.uniform(0.5, 3)), "left"),
        (a, b, a, 0.0, "left-corner"),
        (a, b, float(rng.uniform(a + 0.1, b - 0.1)), 0.0, "flat"),
        (a, b, b, 0.0, "right-corner"),
        (a, b, b, float(rng.uniform(0.5, 3)), "right"),
    ]


# ---------------------------------------------------------------------------
# neighbourhoods


def test_nbhd_examples():
    assert nbhd_contains(DirectionalNeighborhood([0.0, 0.0], 1.0, 0.5, [0.0, 0.0]), [0.5, 0.0])
    nb = DirectionalNeighborhood([1.0], 0.3, 0.5, [-1.0])
    assert nbhd_contains(nb, [0.9]) and not nbhd_contains(nb, [1.1])
    assert nbhd_contains(nb, [1.0])
    assert not nbhd_contains(nb, [0.6])  # outside the open radius
    with pytest.raises(geo.GeometryError):
        DirectionalNeighborhood([0.0], 0.0, 0.5, [1.0])
    assert Direction([0.0, 0.0]).is_zero


# ---------------------------------------------------------------------------
# box cones


def test_tangent_cone_box():
    assert geo.tangent_cone_box(BoxSet([0.0], [1.0]), [0.0]).tags == (NONNEG,)
    assert geo.tangent_cone_box(BoxSet([0, 0], [1, 1]), [0.0, 0.5]).tags == (NONNEG, FREE)
    assert geo.tangent_cone_box(BoxSet([0.0], [0.0]), [0.0]).tags == (ZERO,)
    with pytest.raises(geo.GeometryError):
        geo.tangent_cone_box(BoxSet([0.0], [1.0]), [2.0])


def test_critical_cone_table():
    Y1 = BoxSet([0.0], [1.0])
    assert geo.critical_cone(Y1, [0.0], [2.0]).tags == (ZERO,)
    assert geo.critical_cone(Y1, [0.0], [0.0]).tags == (NONNEG,)
    Y2 = BoxSet([0, 0], [1, 1])
    assert geo.critical_cone(Y2, [0.0, 1.0], [0.0, 0.0]).tags == (NONNEG, NONPOS)


def test_directional_normal_convex_examples():
    Y1 = BoxSet([0.0], [1.0])
    assert geo.directional_normal_convex_box(Y1, [0.0], [1.0]).signs == (ZERO,)
    assert geo.directional_normal_convex_box(Y1, [0.0], [0.0]).signs == (NONPOS,)
    assert geo.directional_normal_convex_box(Y1, [0.0], [-1.0]).empty
    Y2 = BoxSet([0, 0], [1, 1])
    assert geo.directional_normal_convex_box(Y2, [0.0, 0.0], [1.0, 0.0]).signs == (ZERO, NONPOS)


def _box_normal_oracle(a, b, p, z):
    """Support-function test: max over the box of <z, q - p> <= 0."""
    return float(np.sum(np.maximum(z * (a - p), z * (b - p)))) <= 1e-9


def test_convex_directional_formula_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m = int(rng.integers(1, 4))
        a = rng.uniform(-1, 0, m)
        b = a + rng.uniform(0.5, 2, m) * (rng.random(m) > 0.15)
        y = np.where(rng.random(m) < 0.5, np.where(rng.random(m) < 0.5, a, b), rng.uniform(a, b))
        d = rng.choice([-1.0, 0.0, 1.0], m) * rng.uniform(0.5, 2, m)
        cone = geo.directional_normal_convex_box(BoxSet(a, b), y, d)
        t = 1e-6
        q = y + t * d
        if np.any(q < a - 1e-15) or np.any(q > b + 1e-15):
            assert cone.empty
            continue
        assert not cone.empty
        for _ in range(20):
            z = rng.choice([-1.0, 0.0, 1.0], m) * rng.uniform(0.1, 2, m)
            assert cone.contains(z) == _box_normal_oracle(a, b, q, z), (a, b, y, d, z)


# ---------------------------------------------------------------------------
# polyhedral cones


def test_polar_examples():
    nonneg = PolyConeRep.from_signs((NONNEG, NONNEG))
    assert geo.polar(nonneg).same_cone(PolyConeRep.from_signs((NONPOS, NONPOS)))
    assert geo.polar(PolyConeRep.from_signs((FREE, FREE))).same_cone(PolyConeRep.from_signs((ZERO, ZERO)))
    c = PolyConeRep.from_generators([[1.0, 0.0], [1.0, 1.0]])
    assert geo.polar(geo.polar(c)).same_cone(c)
    with pytest.raises(geo.GeometryError):
        geo.polar(PolyConeRep.from_generators(np.eye(5)))


def test_polar_involution_random():
    rng = np.random.default_rng(11)
    for _ in range(100):
        dim = int(rng.integers(2, 5))
        gens = rng.standard_normal((int(rng.integers(1, dim + 2)), dim))
        c = PolyConeRep.from_generators(gens)
        assert c.dual_consistent()
        p = geo.polar(c)
        assert geo.polar(p).same_cone(c)
        # oracle: polar members make nonpositive products with every generator
        for g in p.generators:
            assert np.max(gens @ g) <= 1e-8 * max(1.0, np.linalg.norm(g))


def test_cone_json_round_trip():
    u = geo.limiting_graph_normal_interval(0.0, 1.0, 0.0, 0.0)
    back = ConeUnion.from_json(u.to_json(), 2)
    assert len(back.pieces) == 3
    for z in TEST_Z:
        assert back.contains(z) == u.contains(z)


def test_union_membership_ignores_piece_order():
    u = geo.graph_normal_box(BoxSet([0, 0], [1, 1]), [0.0, 1.0], [0.0, 0.0])
    rng = np.random.default_rng(0)
    perm = ConeUnion(u.dim, tuple(u.pieces[i] for i in rng.permutation(len(u.pieces))))
    for _ in range(100):
        z = rng.choice([-1.0, 0.0, 1.0], 4)
        assert perm.contains(z) == u.contains(z)


# ---------------------------------------------------------------------------
# interval graph


def test_graph_pieces():
    assert [p.name for p in geo.graph_pieces_interval(0.0, 1.0)] == ["left", "flat", "right"]
    assert [p.name for p in geo.graph_pieces_interval(-np.inf, np.inf)] == ["flat"]
    assert [p.name for p in geo.graph_pieces_interval(0.0, np.inf)] == ["left", "flat"]
    assert not geo.on_graph_interval(0.0, 1.0, 0.5, 1.0)


def test_limiting_examples():
    assert geo.limiting_graph_normal_interval(0, 1, 0.0, -2.0).sign_tags() == [(FREE, ZERO)]
    assert geo.limiting_graph_normal_interval(0, 1, 0.4, 0.0).sign_tags() == [(ZERO, FREE)]
    assert len(geo.limiting_graph_normal_interval(0, 1, 0.0, 0.0).pieces) == 3
    with pytest.raises(geo.GeometryError):
        geo.limiting_graph_normal_interval(0, 1, 0.4, 1.0)


def test_directional_examples():
    assert geo.directional_graph_normal_interval(0, 1, 0.0, 0.0, (1, 0)).sign_tags() == [(ZERO, FREE)]
    assert geo.directional_graph_normal_interval(0, 1, 0.0, 0.0, (0, -1)).sign_tags() == [(FREE, ZERO)]
    assert geo.directional_graph_normal_interval(0, 1, 0.0, 0.0, (1, 1)).is_empty


def test_limiting_cases_match_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        for a, b, y, xi, name in _cases(rng):
            cone = geo.limiting_graph_normal_interval(a, b, y, xi)
            segs = _segments(a, b)
            for z in TEST_Z:
                assert cone.contains(z) == limiting_oracle(segs, (y, xi), z), (name, z)


W_SET = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1), (0, 0)]


def test_directional_cases_match_oracle():
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(2):
        for a, b, y, xi, name in _cases(rng):
            segs = _segments(a, b)
            for w in W_SET:
                cone = geo.directional_graph_normal_interval(a, b, y, xi, w)
                for z in TEST_Z:
                    assert cone.contains(z) == directional_oracle(segs, (y, xi), w, z), (name, w, z)
                checked += 1
    assert checked >= 40


def _random_graph_point(rng, m):
    a = rng.uniform(-1, 0, m)
    b = a + rng.uniform(0.5, 1.5, m)
    y, xi = np.empty(m), np.empty(m)
    for i in range(m):
        kind = rng.integers(5)
        y[i] = [a[i], a[i], rng.uniform(a[i], b[i]), b[i], b[i]][kind]
        xi[i] = [-rng.uniform(0.1, 2), 0.0, 0.0, 0.0, rng.uniform(0.1, 2)][kind]
    return BoxSet(a, b), y, xi


def _points_in(piece: PolyConeRep, rng, count=10):
    tags = piece.signs
    out = []
    for _ in range(count):
        z = rng.standard_normal(len(tags))
        z = np.where(np.array(tags) == ZERO, 0.0, z)
        z = np.where(np.array(tags) == NONNEG, np.abs(z), z)
        z = np.where(np.array(tags) == NONPOS, -np.abs(z), z)
        out.append(z)
    return out


def test_directional_inside_limiting_and_zero_direction():
    rng = np.random.default_rng(21)
    for _ in range(200):
        m = int(rng.integers(1, 4))
        Y, y, xi = _random_graph_point(rng, m)
        lim = geo.graph_normal_box(Y, y, xi)
        w0 = geo.graph_normal_box(Y, y, xi, np.zeros(2 * m))
        assert sorted(w0.sign_tags()) == sorted(lim.sign_tags())
        w = rng.choice([-1.0, 0.0, 1.0], 2 * m) * (rng.random(2 * m) < 0.6)
        dirc = geo.graph_normal_box(Y, y, xi, w)
        if not geo.graph_tangent_box(Y, y, xi, w):
            assert dirc.is_empty
        for piece in dirc.pieces:
            for z in _points_in(piece, rng):
                assert lim.contains(z)


def test_box_graph_examples():
    Y = BoxSet([0, 0], [1, 1])
    interior = geo.graph_normal_box(Y, [0.5, 0.5], [0.0, 0.0])
    assert interior.sign_tags() == [(ZERO, ZERO, FREE, FREE)]
    mixed = geo.graph_normal_box(Y, [0.0, 0.5], [-1.0, 0.0])
    assert mixed.sign_tags() == [(FREE, ZERO, ZERO, FREE)]
    assert len(geo.graph_normal_box(Y, [0.0, 0.0], [0.0, 0.0]).pieces) == 9
