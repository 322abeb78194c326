import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnl.dsl import (
    Const, Div, EvaluationDomainError, Mul, ParseError, Pow, Sub, Var,
    differentiate, evaluate, evaluate_batch, gradient, parse_observable,
)
from oracles import central_gradient, random_expression

MZ = "q1*p2 - q2*p1"


def test_parse_single_variable():
    assert parse_observable("p1", 1).root == Var("p", 1)


def test_parse_alias_x_is_q():
    e = parse_observable("x1*p2 - x2*p1", 2)
    assert e.root == Sub(Mul(Var("q", 1), Var("p", 2)), Mul(Var("q", 2), Var("p", 1)))


def test_parse_quotient_of_powers():
    e = parse_observable("(q1^2 + p1^2)/2", 1)
    assert isinstance(e.root, Div) and e.root.right == Const(2.0)
    assert e.root.left.left == Pow(Var("q", 1), 2)


@pytest.mark.parametrize("text, column", [
    ("q1^1.5", 4), ("q1 +", 5), ("foo(q1)", 1), ("q2", 1), ("q1^2^3", 6), ("", 1), ("(q1", 4),
])
def test_parse_errors_carry_position(text, column):
    with pytest.raises(ParseError) as info:
        parse_observable(text, 1)
    assert info.value.line == 1
    assert 1 <= info.value.column <= max(column, len(text) + 1)


def test_parse_error_on_second_line():
    with pytest.raises(ParseError) as info:
        parse_observable("q1 +\n  $", 1)
    assert info.value.line == 2


@pytest.mark.parametrize("var, expected", [("q1", "p2"), ("q2", "-p1"), ("p1", "-q2"), ("p2", "q1")])
def test_derivatives_of_angular_momentum(var, expected):
    assert str(differentiate(parse_observable(MZ, 2), var)) == expected


def test_derivative_of_energy():
    assert str(differentiate(parse_observable("(q1^2+p1^2)/2", 1), "p1")) == "p1"


def test_derivative_matches_finite_difference_at_random_points():
    e = parse_observable(MZ, 2)
    d = differentiate(e, "q2")
    g = np.random.default_rng(0)
    for _ in range(5):
        x = g.normal(size=4)
        fd = central_gradient(lambda y: evaluate(e, y), x)[2]
        assert abs(evaluate(d, x) - fd) <= 1e-7 * max(1.0, abs(fd))


def test_simplification_rules():
    q1 = parse_observable("q1", 1)
    assert str(differentiate(parse_observable("3*q1 + 0*p1", 1), "q1")) == "3"
    assert str(differentiate(parse_observable("q1*1 + 2*3", 1), "q1")) == "1"
    assert str(differentiate(q1, "p1")) == "0"


@pytest.mark.parametrize("text, point, value", [
    (MZ, (1, 0, 0, 1), 1.0),
    ("(q1^2+p1^2)/2", (3, 4), 12.5),
    ("sin(q1)", (0, 0), 0.0),
    ("atan2(p1, q1)", (0, 1), math.pi / 2),
    ("sqrt(q1)*cos(p1)", (4, 0), 2.0),
])
def test_evaluate_examples(text, point, value):
    n = len(point) // 2
    assert evaluate(parse_observable(text, n), point) == pytest.approx(value, abs=1e-15)


def test_evaluate_domain_errors():
    with pytest.raises(EvaluationDomainError):
        evaluate(parse_observable("sqrt(q1)", 1), (-1, 0))
    with pytest.raises(EvaluationDomainError):
        evaluate(parse_observable("1/q1", 1), (0, 0))
    with pytest.raises(ValueError):
        evaluate(parse_observable("q1", 1), (1, 2, 3))


def test_evaluate_is_deterministic_and_batch_consistent():
    e = parse_observable("sin(q1*p1) + q1^3/(1 + p1^2)", 1)
    X = np.random.default_rng(1).normal(size=(50, 2))
    batch = evaluate_batch(e, X)
    scalar = np.array([evaluate(e, x) for x in X])
    assert np.array_equal(batch, evaluate_batch(e, X))
    np.testing.assert_allclose(batch, scalar, rtol=1e-14, atol=1e-15)


def test_gradient_order_is_canonical():
    g = gradient(parse_observable(MZ, 2))
    assert [str(c) for c in g] == ["p2", "-q2", "-p1", "q1"]


# --- properties ------------------------------------------------------------

def _expressions():
    return st.integers(0, 2**32 - 1).map(lambda s: random_expression(np.random.default_rng(s), 2))


@settings(max_examples=100, deadline=None)
@given(_expressions())
def test_print_parse_round_trip(text):
    e = parse_observable(text, 2)
    again = parse_observable(str(e), 2)
    assert again.root == e.root


@settings(max_examples=100, deadline=None)
@given(_expressions(), st.integers(0, 1000))
def test_symbolic_gradient_matches_central_difference(text, seed):
    e = parse_observable(text, 2)
    x = np.random.default_rng(seed).uniform(-1.5, 1.5, 4)
    sym = np.array([evaluate(c, x) for c in gradient(e)])
    fd = central_gradient(lambda y: evaluate(e, y), x, h=1e-6)
    assert np.all(np.abs(sym - fd) <= 1e-5 * np.maximum(1.0, np.abs(sym)))


@settings(max_examples=60, deadline=None)
@given(_expressions(), _expressions(), st.floats(-3, 3), st.floats(-3, 3))
def test_differentiation_is_linear(a, b, alpha, beta):
    ea, eb = parse_observable(a, 2), parse_observable(b, 2)
    combo = parse_observable(f"{alpha!r}*({a}) + {beta!r}*({b})", 2)
    x = np.array([0.3, -0.7, 1.1, 0.4])
    lhs = evaluate(differentiate(combo, "p2"), x)
    rhs = alpha * evaluate(differentiate(ea, "p2"), x) + beta * evaluate(differentiate(eb, "p2"), x)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)
