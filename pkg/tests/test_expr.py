import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bdfoa import expr as ex
from bdfoa.expr import EvalPoint

MIRRLEES_F = "-x1*exp(-(y1+1)^2) - exp(-(y1-1)^2)"


# -- parsing ---------------------------------------------------------------

def test_parse_polynomial():
    node = ex.parse("x1*y1^3 + y1^12", 1, 1)
    assert ex.variables(node) == {("x", 0), ("y", 0)}
    assert ex.poly_degree(node) == 12


def test_constant_literal():
    node = ex.parse("0", 1, 1)
    assert ex.is_constant(node)
    assert ex.evaluate(node, EvalPoint([3.0], [4.0])) == 0.0


def test_syntax_error_column():
    with pytest.raises(ex.ExprSyntaxError) as err:
        ex.parse("x1*(", 1, 1)
    assert err.value.column == 4


@pytest.mark.parametrize("text", ["z1 + 1", "foo(x1)", "y2", "x0"])
def test_bad_identifiers(text):
    with pytest.raises(ex.ExprError):
        ex.parse(text, 1, 1)


def test_unary_minus_looser_than_power():
    # -y^2 is -(y^2)
    assert ex.evaluate(ex.parse("-y1^2", 0, 1), EvalPoint([], [3.0])) == -9.0


def test_nonconstant_exponent_rewrites_through_log():
    node = ex.parse("y1^x1", 1, 1)
    assert math.isclose(ex.evaluate(node, EvalPoint([3.0], [2.0])), 8.0)
    with pytest.raises(ex.ExprDomainError):
        ex.evaluate(node, EvalPoint([3.0], [-2.0]))


# -- evaluation --------------------------------------------------------------

def test_mirrlees_value():
    v = ex.evaluate(ex.parse(MIRRLEES_F, 1, 1), EvalPoint([1.0], [0.0]))
    assert math.isclose(v, -2 * math.exp(-1), rel_tol=1e-14)


def test_double_root():
    node = ex.parse("(x1*y1-1)^2*(1+y1^2)", 1, 1)
    p = EvalPoint([2.0], [0.5])
    assert ex.evaluate(node, p) == 0.0
    assert abs(ex.differentiate(node, p).gradient[1]) < 1e-15


def test_division_by_zero_names_subexpression():
    with pytest.raises(ex.ExprDomainError) as err:
        ex.evaluate(ex.parse("1/x1", 1, 0), EvalPoint([0.0], []))
    assert err.value.subexpr == "(1.0 / x1)"


@pytest.mark.parametrize("text,x", [("log(x1)", -1.0), ("sqrt(x1)", -4.0)])
def test_domain_errors(text, x):
    with pytest.raises(ex.ExprDomainError):
        ex.evaluate(ex.parse(text, 1, 0), EvalPoint([x], []))


def test_eval_point_rejects_nonfinite():
    with pytest.raises(ValueError):
        EvalPoint([np.nan], [0.0])


def test_batch_matches_scalar():
    node = ex.parse(MIRRLEES_F, 1, 1)
    X = np.linspace(-1, 2, 7)[:, None]
    Y = np.linspace(-2, 2, 7)[:, None]
    batch = ex.evaluate_batch(node, X, Y)
    scalar = [ex.evaluate(node, EvalPoint(x, y)) for x, y in zip(X, Y)]
    np.testing.assert_allclose(batch, scalar, rtol=0, atol=1e-15)


# -- differentiation ------------------------------------------------------------

def test_mirrlees_stationary_at_y0(y0):
    d = ex.differentiate(ex.parse(MIRRLEES_F, 1, 1), EvalPoint([1.0], [y0]))
    assert abs(d.gradient[1]) <= 1e-9


def test_constant_derivatives_vanish():
    d = ex.differentiate(ex.parse("3.5", 2, 1), EvalPoint([1.0, 2.0], [3.0]))
    assert d.value == 3.5
    assert not d.gradient.any() and not d.hessian.any()


def test_fd_check_examples():
    node = ex.parse(MIRRLEES_F, 1, 1)
    assert ex.fd_check(node, EvalPoint([1.3], [-0.7]), 1e-5) <= 1e-6
    lin = ex.parse("3*x1 - 2*y1 + 0.5", 1, 1)
    for h in (1e-3, 1e-5):
        assert ex.fd_check(lin, EvalPoint([0.3], [2.0]), h) <= 1e-10
    from bdfoa import builtin
    F = builtin("modified-mirrlees").F
    assert ex.fd_check(F, EvalPoint([0.5, 0.5], [0.9]), 1e-5) <= 1e-6


SYM_CASES = [
    MIRRLEES_F,
    "(x1*y1-1)^2*(1+y1^2)",
    "sin(x1*y1) + cos(y2)^3 - log(1 + x1^2) / sqrt(2 + y1^2)",
    "x1^0.5 * y1^(-2) + exp(y2 - x1)",
]


@pytest.mark.parametrize("text", SYM_CASES)
def test_against_symbolic_oracle(text):
    rng = np.random.default_rng(7)
    syms = sp.symbols("x1 y1 y2")
    sym = sp.sympify(text.replace("^", "**"), locals=dict(zip(map(str, syms), syms)))
    grad = [sp.diff(sym, s) for s in syms]
    hess = [[sp.diff(g, s) for s in syms] for g in grad]
    node = ex.parse(text, 1, 2)
    for _ in range(10):
        vals = {syms[0]: rng.uniform(0.5, 2), syms[1]: rng.uniform(0.5, 2), syms[2]: rng.uniform(-1, 1)}
        d = ex.differentiate(node, EvalPoint([vals[syms[0]]], [vals[syms[1]], vals[syms[2]]]))
        assert math.isclose(d.value, float(sym.subs(vals)), rel_tol=1e-12, abs_tol=1e-12)
        np.testing.assert_allclose(d.gradient, [float(g.subs(vals)) for g in grad], rtol=1e-11, atol=1e-12)
        np.testing.assert_allclose(d.hessian, [[float(h.subs(vals)) for h in row] for row in hess],
                                   rtol=1e-10, atol=1e-11)


def test_hessian_symmetry_before_symmetrization():
    node = ex.parse("sin(x1*y1) * exp(x2 - y1^2) / (1 + x1^2)", 2, 1)
    d = ex.differentiate(node, EvalPoint([0.3, -0.2], [0.7]), symmetrize=False)
    assert np.max(np.abs(d.hessian - d.hessian.T)) <= 1e-12
    d = ex.differentiate(node, EvalPoint([0.3, -0.2], [0.7]))
    assert np.array_equal(d.hessian, d.hessian.T)


def test_jet_batch_shapes():
    node = ex.parse("x1*y1^2", 1, 1)
    v, g, h = ex.jet_batch(node, np.ones((4, 1)), np.full((4, 1), 2.0))
    assert v.shape == (4,) and g.shape == (4, 2) and h.shape == (4, 2, 2)
    np.testing.assert_allclose(g[0], [4.0, 4.0])


# -- round trip on random trees -----------------------------------------------

N_X, N_Y = 2, 2

leaves = st.one_of(
    st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False).map(ex.Num),
    st.builds(ex.Var, st.just("x"), st.integers(0, N_X - 1)),
    st.builds(ex.Var, st.just("y"), st.integers(0, N_Y - 1)),
)


def _extend(children):
    return st.one_of(
        st.builds(ex.Neg, children),
        st.builds(ex.Bin, st.sampled_from("+-*/"), children, children),
        st.builds(ex.Pow, children, st.floats(-5, 5, allow_nan=False).filter(lambda p: p != 0 or True)),
        st.builds(ex.Func, st.sampled_from(["exp", "log", "sqrt", "sin", "cos"]), children),
    )


trees = st.recursive(leaves, _extend, max_leaves=12)


@settings(max_examples=1000, deadline=None)
@given(trees)
def test_print_parse_identity(tree):
    assert ex.parse(ex.to_string(tree), N_X, N_Y) == tree


def test_substitute_replaces_variable():
    node = ex.parse("x1 + y1^2", 1, 1)
    out = ex.substitute(node, {("y", 0): ex.parse("x1", 1, 1)})
    assert ex.evaluate(out, EvalPoint([3.0], [100.0])) == 12.0
