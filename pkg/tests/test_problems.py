import json
import math

import numpy as np
import pytest

from bdfoa import problems as pb
from bdfoa.expr import EvalPoint, evaluate, fd_check
from bdfoa.problems import BoxSet, ProblemError, builtin, load_problem


def test_y0_bracket_and_residual(y0):
    h = lambda y: (1 - y) * math.exp(4 * y) - (1 + y)
    assert h(0.9) > 0 > h(1.0)
    assert abs((1 - y0) * math.exp(4 * y0) / (1 + y0) - 1) <= 1e-10
    # the root rounds to 0.9575; the three-digit value 0.957 is a truncation
    assert abs(y0 - 0.957) <= 5.1e-4
    assert abs(y0 - 0.9575) <= 1e-5


MIRRLEES_DOC = {
    "name": "mirrlees",
    "n": 1,
    "m": 1,
    "F": "(x1-2)^2 + (y1-1)^2",
    "f": "-x1*exp(-(y1+1)^2) - exp(-(y1-1)^2)",
    "G": [],
    "Y_lower": ["-inf"],
    "Y_upper": ["inf"],
}


def test_load_from_mapping_string_and_file(tmp_path):
    p = load_problem(MIRRLEES_DOC)
    assert p.name == "mirrlees" and p.q == 0 and not p.Y.is_bounded()
    assert load_problem(json.dumps(MIRRLEES_DOC)).name == "mirrlees"
    path = tmp_path / "m.json"
    path.write_text(json.dumps(MIRRLEES_DOC))
    assert load_problem(path).n == 1


def test_config_with_constraint():
    p = load_problem(dict(MIRRLEES_DOC, G=["x1 - 1"]))
    assert p.q == 1


def test_dimension_error():
    with pytest.raises(ProblemError):
        load_problem(dict(MIRRLEES_DOC, F="y2"))


def test_schema_errors():
    doc = dict(MIRRLEES_DOC)
    del doc["f"]
    with pytest.raises(ProblemError):
        load_problem(doc)
    with pytest.raises(ProblemError):
        load_problem(dict(MIRRLEES_DOC, Y_lower=[1.0], Y_upper=[0.0]))


def test_config_round_trip():
    p = builtin("principal-agent-2")
    q = load_problem(p.to_config())
    pt = EvalPoint([1.0, 5.0], [0.4])
    assert evaluate(q.f, pt) == pytest.approx(evaluate(p.f, pt), abs=1e-14)
    assert q.Y.lower[0] == 0.05


def test_builtin_shapes():
    mm = builtin("modified-mirrlees")
    assert (mm.n, mm.m) == (2, 1)
    assert builtin("example-xy-1").F == pb.ex.parse("0", 1, 1)
    tc = builtin("toy-convex")
    assert evaluate(tc.F, EvalPoint([1.0], [1.0])) == 0.0
    with pytest.raises(ProblemError):
        builtin("nope")


def test_modified_mirrlees_value_and_gradient(y0):
    mm = builtin("modified-mirrlees")
    p = EvalPoint([0.5, 0.5], [y0])
    b = pb.eval_bundle(mm, p)
    assert abs(b.F.value) <= 1e-10
    assert b.F.gradient[0] == pytest.approx(1 + y0, abs=1e-12)


def test_bundle_examples(y0):
    assert not pb.eval_bundle(builtin("toy-convex"), EvalPoint([1.0], [1.0])).F.gradient.any()
    assert abs(pb.eval_bundle(builtin("mirrlees"), EvalPoint([1.0], [y0])).f.gradient[1]) <= 1e-9


@pytest.mark.parametrize("name", pb.BUILTIN_NAMES)
def test_builtin_derivatives_match_fd(name):
    prob = builtin(name)
    rng = np.random.default_rng(hash(name) % 2**32)
    lo, hi = prob.Y.window(2.0)
    for _ in range(100):
        x = rng.uniform(0.2, 2.0, prob.n)
        y = rng.uniform(lo, hi)
        p = EvalPoint(x, y)
        for fn in (prob.F, prob.f, *prob.G):
            assert fd_check(fn, p, 1e-5) <= 1e-6


def test_principal_agent_structure():
    prob = builtin("principal-agent-2")
    spec = pb.principal_agent_spec()
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(0.01, 10, 2)
        y = rng.uniform(0.05, 0.95, 1)
        p = EvalPoint(x, y)
        f_direct = -(math.sqrt(x[0]) * (1 - y[0]) + math.sqrt(x[1]) * y[0]) + y[0] ** 2
        assert evaluate(prob.f, p) == pytest.approx(f_direct, abs=1e-12)
        assert evaluate(prob.G[0], p) - evaluate(prob.f, p) == pytest.approx(spec.reservation_utility, abs=1e-12)
        F_direct = -((0 - x[0]) * (1 - y[0]) + (10 - x[1]) * y[0])
        assert evaluate(prob.F, p) == pytest.approx(F_direct, abs=1e-12)


def test_principal_agent_simplex_violation():
    from dataclasses import replace

    spec = replace(pb.principal_agent_spec(), probabilities=("1 - y1", "2*y1"),
                   action_lower=(0.0,), action_upper=(1.0,))
    with pytest.raises(ProblemError, match="probabilities sum to 2"):
        pb.build_principal_agent(spec)


def test_box_window_and_json():
    Y = BoxSet([0.0, -np.inf], [1.0, np.inf])
    lo, hi = Y.window(10)
    assert lo.tolist() == [0.0, -10.0] and hi.tolist() == [1.0, 10.0]
    assert Y.to_json() == {"Y_lower": [0.0, "-inf"], "Y_upper": [1.0, "inf"]}
    far = BoxSet([50.0], [np.inf])
    assert far.window(10)[0][0] == 50.0
    with pytest.raises(ProblemError):
        BoxSet([1.0], [0.0])


def test_problem_point_check():
    prob = builtin("principal-agent-2")
    pb.ProblemPoint(EvalPoint([1.0, 1.0], [0.5])).check(prob)
    with pytest.raises(ProblemError):
        pb.ProblemPoint(EvalPoint([1.0, 1.0], [0.99])).check(prob)
