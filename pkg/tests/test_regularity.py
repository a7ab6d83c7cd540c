import itertools

import numpy as np
import pytest

from bdfoa import builtin
from bdfoa import regularity as reg
from bdfoa.expr import EvalPoint, differentiate
from bdfoa.geometry import FREE, NONNEG, NONPOS, ZERO
from bdfoa.lower import SamplingSchedule, localization_track
from bdfoa.problems import BUILTIN_NAMES, problem_from_dict


def _p(f, lo=None, hi=None, n=1, m=1, name="t"):
    doc = {"name": name, "n": n, "m": m, "F": "0", "f": f}
    if lo is not None:
        doc.update(Y_lower=lo, Y_upper=hi)
    return problem_from_dict(doc)


# -- (ii) and (iii) ---------------------------------------------------------------

def test_interior_nonsingular(y0):
    r = reg.check_interior_nonsingular(builtin("mirrlees"), [1.0], [y0])
    assert r.holds and r.witness["min_singular_value"] == pytest.approx(1.70, abs=0.01)
    assert reg.check_interior_nonsingular(builtin("toy-convex"), [1.0], [1.0]).witness["min_singular_value"] == 2
    assert not reg.check_interior_nonsingular(_p("y1^3"), [0.0], [0.0]).holds
    with pytest.raises(reg.NotStationaryError):
        reg.check_interior_nonsingular(builtin("toy-convex"), [1.0], [0.5])


def test_strong_monotonicity(y0):
    assert reg.check_strong_monotonicity(builtin("toy-convex"), [1.0], [1.0]).witness["mu"] == 2
    r = reg.check_strong_monotonicity(builtin("mirrlees"), [1.0], [y0])
    assert r.holds and r.witness["pointwise_only"] and r.witness["mu"] == pytest.approx(1.70, abs=0.01)
    r = reg.check_strong_monotonicity(_p("y1^2 - x1*y1", [0.0], [0.0]), [0.0], [0.0])
    assert r.holds and r.witness["mu"] == np.inf


def test_mu_reverifies_on_samples():
    p = _p("y1^2 + y1*y2 + 2*y2^2 - x1*y1", [-1, -1], [1, 1], m=2)
    r = reg.check_strong_monotonicity(p, [0.0], [0.0, 0.0])
    H = differentiate(p.f, EvalPoint([0.0], [0.0, 0.0])).hessian[1:, 1:]
    rng = np.random.default_rng(0)
    W = rng.uniform(-2, 2, (500, 2))
    assert np.all(np.einsum("ij,jk,ik->i", W, H, W) >= r.witness["mu"] * np.sum(W**2, 1) - 1e-12)


# -- (iv-a) ----------------------------------------------------------------------

def test_sosc_examples(y0):
    assert reg.check_sosc_box(builtin("toy-convex"), [1.0], [1.0]).holds
    assert reg.check_sosc_box(builtin("mirrlees"), [1.0], [y0]).holds
    r = reg.check_sosc_box(_p("-y1^2", [-1.0], [1.0]), [0.0], [0.0])
    assert not r.holds and abs(abs(r.witness["worst_direction"][0]) - 1) < 1e-12


def _sample_cone(tags, rng, count):
    W = rng.standard_normal((count, len(tags)))
    for i, t in enumerate(tags):
        if t == ZERO:
            W[:, i] = 0
        elif t == NONNEG:
            W[:, i] = np.abs(W[:, i])
        elif t == NONPOS:
            W[:, i] = -np.abs(W[:, i])
    nrm = np.linalg.norm(W, axis=1)
    return W[nrm > 0] / nrm[nrm > 0, None]


def test_min_quadratic_against_sampling():
    rng = np.random.default_rng(4)
    for _ in range(100):
        m = int(rng.integers(1, 4))
        A = rng.standard_normal((m, m))
        H = (A + A.T) / 2
        tags = tuple(rng.choice([FREE, NONNEG, NONPOS, ZERO], m))
        if all(t == ZERO for t in tags):
            continue
        val, w = reg.min_quadratic_on_sign_cone(H, tags)
        W = _sample_cone(tags, rng, 4000)
        sampled = np.einsum("ij,jk,ik->i", W, H, W).min()
        assert val <= sampled + 1e-9
        assert sampled - val <= 0.05 * max(1.0, np.abs(H).max())
        assert w @ H @ w == pytest.approx(val, abs=1e-9)


# -- (iv-b) ----------------------------------------------------------------------

def test_ivb_examples(y0):
    # all gradient components nonzero at a vertex: K = {0}
    p = _p("y1 + y2 + x1*y1", [0, 0], [1, 1], m=2)
    r = reg.check_condition_ivb(p, [0.0], [0.0, 0.0])
    assert r.holds and r.witness["critical_cone"] == [ZERO, ZERO]
    assert reg.check_condition_ivb(builtin("toy-convex"), [1.0], [1.0]).holds
    # negative curvature on R: -H w = 2w must vanish in N_K(w) = {0}, so only w = 0
    assert reg.check_condition_ivb(_p("-y1^2"), [0.0], [0.0]).holds
    r = reg.check_condition_ivb(_p("y1^3"), [0.0], [0.0])
    assert not r.holds and abs(abs(r.witness["violating_direction"][0]) - 1) < 1e-12


def _in_sign_cone(w, tags, tol=1e-9):
    for wi, t in zip(w, tags):
        if (t == ZERO and abs(wi) > tol) or (t == NONNEG and wi < -tol) or (t == NONPOS and wi > tol):
            return False
    return True


def _in_normal_of_sign_cone(z, w, tags, tol=1e-8):
    """N_K(w) for the sign cone K: polar of K intersected with w-perp."""
    for zi, wi, t in zip(z, w, tags):
        if t == FREE and abs(zi) > tol:
            return False
        if t == NONNEG and (zi > tol or abs(zi * wi) > tol):
            return False
        if t == NONPOS and (zi < -tol or abs(zi * wi) > tol):
            return False
    return True


def test_ivb_witness_consistency():
    rng = np.random.default_rng(8)
    found = 0
    for _ in range(300):
        m = int(rng.integers(1, 4))
        A = rng.integers(-2, 3, (m, m)).astype(float)
        H = A + A.T
        if rng.random() < 0.5:  # plant a singular direction
            v = rng.integers(-1, 2, m).astype(float)
            if v.any():
                P = np.eye(m) - np.outer(v, v) / (v @ v)
                H = P @ H @ P
        tags = tuple(rng.choice([FREE, NONNEG, NONPOS, ZERO], m))
        w = reg.ivb_witness(H, tags)
        val, _ = reg.min_quadratic_on_sign_cone(H, tags) if any(t != ZERO for t in tags) else (np.inf, None)
        if w is None:
            continue
        found += 1
        assert np.linalg.norm(w) == pytest.approx(1.0)
        assert _in_sign_cone(w, tags)
        assert _in_normal_of_sign_cone(-H @ w, w, tags)
        assert val <= 1e-9  # positive curvature on K excludes witnesses
    assert found > 10


# -- localization report and soundness ------------------------------------------

def test_localization_report(y0):
    rep = reg.check_localization(builtin("modified-mirrlees"), [0.5, 0.5], [y0])
    assert rep.certified and rep.by_name("ii").holds


COMPASS = [np.array([np.cos(a), np.sin(a)]) for a in 2 * np.pi * np.arange(16) / 16]


@pytest.mark.parametrize("name", [n for n in BUILTIN_NAMES if n != "principal-agent-2"])
def test_sosc_implies_single_valued_tracks(name):
    p = builtin(name)
    x, y = p.reference_point()
    if not reg.check_sosc_box(p, x, y).holds:
        pytest.skip("second-order condition does not hold here")
    dirs = [np.array([1.0]), np.array([-1.0])] if p.n == 1 else COMPASS
    sched = SamplingSchedule(t=tuple(2.0 ** -k for k in range(4, 21)))
    for u in dirs:
        assert localization_track(p, x, y, u, sched, ball_radius=0.2).single_valued


# -- admissible directions ----------------------------------------------------------

def test_admissible_directions(y0):
    m = builtin("mirrlees")
    cone = reg.admissible_directions(m, [1.0], [y0])
    grad = lambda p, x, y: differentiate(p.f, EvalPoint(x, y)).gradient[: p.n]
    expected = grad(m, [1.0], [-y0]) - grad(m, [1.0], [y0])
    np.testing.assert_allclose(cone.normals[0], expected, atol=1e-8)
    assert cone.contains([-1.0]) and not cone.contains([1.0])
    mm = builtin("modified-mirrlees")
    cone = reg.admissible_directions(mm, [0.5, 0.5], [y0])
    n = cone.normals[0]
    assert n[0] == pytest.approx(n[1], abs=1e-12) and n[0] < 0
    assert cone.contains([-1.0, 0.999]) and not cone.contains([1.0, -0.999])
    assert reg.admissible_directions(builtin("toy-convex"), [1.0], [1.0]).is_full
    with pytest.raises(ValueError):
        reg.admissible_directions(m, [1.0], [0.0])


def test_admissible_empty_cone():
    # tied minimizers at -1, 0, 1 whose x-gradients pull in opposite directions
    p = _p("(y1^2 - 1)^2 * y1^2 + x1*y1")
    s = reg.solve_lower(p, [0.0])
    np.testing.assert_allclose(s.minimizers[:, 0], [-1, 0, 1], atol=1e-6)
    cone = reg.admissible_directions(p, [0.0], [0.0], sample=s)
    assert cone.empty and cone.interior_direction is None


def test_admissible_sound_along_sampled_directions(y0):
    p = builtin("modified-mirrlees")
    cone = reg.admissible_directions(p, [0.5, 0.5], [y0])
    for u in cone.sample(4):
        assert reg.check_inner_semicontinuity_empirical(p, [0.5, 0.5], [y0], u).holds


# -- inf-compactness and inner semicontinuity ----------------------------------------

def test_inf_compactness():
    ev = reg.check_inf_compactness(builtin("mirrlees"), [1.0])
    assert ev.holds and -3 <= ev.sublevel_bounds[0][0] and ev.sublevel_bounds[1][0] <= 3
    ev = reg.check_inf_compactness(builtin("example-xy-1"), [0.0])
    assert not ev.holds and ev.escaping_sample is not None
    assert reg.check_inf_compactness(_p("y1^2"), [0.0]).holds


def test_inner_semicontinuity(y0):
    m = builtin("mirrlees")
    assert reg.check_inner_semicontinuity_empirical(m, [1.0], [y0], [-1.0]).holds
    r = reg.check_inner_semicontinuity_empirical(m, [1.0], [y0], [1.0])
    assert not r.holds and r.final_distance == pytest.approx(2 * y0, abs=1e-3)
    for u in ([1.0], [-1.0], [0.0]):
        assert reg.check_inner_semicontinuity_empirical(builtin("toy-convex"), [1.0], [1.0], u).holds


def test_singleton_report_has_full_cone():
    rep = reg.inner_semicontinuity_report(builtin("toy-convex"), [1.0], [1.0])
    assert rep.singleton and rep.directions.is_full
