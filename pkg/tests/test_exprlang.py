import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invarlab.exprlang import (Bin, Cmp, DomainError, Func, MinMax, Neg,
                               NonSmoothError, Num, ParseError, Piecewise,
                               UnboundVariableError, Var, differentiate,
                               evaluate, evaluate_array, fd_derivative,
                               fold_constants, parse, to_text)

from helpers import random_smooth_expr

KAPPA = "piecewise(x>1: 1, x<-1: -1, else: x^3)"


class TestParse:
    def test_product_of_vars(self):
        assert parse("p*V") == Bin("*", Var("p"), Var("V"))

    def test_precedence_power_over_mul(self):
        e = parse("2*V^(3/2)")
        assert e == Bin("*", Num(2.0),
                        Bin("^", Var("V"), Bin("/", Num(3.0), Num(2.0))))

    def test_power_right_assoc(self):
        assert evaluate(parse("2^3^2"), {}) == 512.0

    def test_unary_minus_binds_looser_than_power(self):
        assert evaluate(parse("-2^2"), {}) == -4.0
        assert evaluate(parse("2^-2"), {}) == 0.25

    def test_piecewise_kappa(self):
        e = parse(KAPPA)
        assert isinstance(e, Piecewise)
        assert len(e.branches) == 2
        assert e.branches[0][0] == Cmp(">", Var("x"), Num(1.0))
        assert e.branches[1][0] == Cmp("<", Var("x"), Neg(Num(1.0)))
        assert e.otherwise == Bin("^", Var("x"), Num(3.0))

    def test_min_max_nary(self):
        e = parse("min(a, b, c)")
        assert isinstance(e, MinMax) and len(e.args) == 3

    def test_scientific_literals(self):
        assert evaluate(parse("1.5e-3 + 2E2"), {}) == pytest.approx(200.0015)

    def test_error_reports_byte_offset(self):
        with pytest.raises(ParseError) as err:
            parse("2*")
        assert err.value.byte_offset == 2
        assert err.value.expected

    def test_error_unknown_function(self):
        with pytest.raises(ParseError, match="unknown function"):
            parse("foo(x)")

    def test_error_missing_else(self):
        with pytest.raises(ParseError):
            parse("piecewise(x>0: 1)")

    def test_error_trailing_garbage(self):
        with pytest.raises(ParseError):
            parse("1 + 2)")

    def test_error_arity(self):
        with pytest.raises(ParseError):
            parse("sqrt(1, 2)")
        with pytest.raises(ParseError):
            parse("min(1)")


class TestEval:
    def test_product(self):
        assert evaluate(parse("p*V"), {"p": 1.0, "V": 0.5}) == 0.5

    def test_kappa_values(self):
        e = parse(KAPPA)
        assert evaluate(e, {"x": 2.0}) == 1.0
        assert evaluate(e, {"x": -2.0}) == -1.0
        assert evaluate(e, {"x": 0.5}) == 0.125

    def test_sqrt_domain_error(self):
        with pytest.raises(DomainError):
            evaluate(parse("sqrt(V)"), {"V": -1.0})

    def test_ln_and_division_domain_errors(self):
        with pytest.raises(DomainError):
            evaluate(parse("ln(x)"), {"x": 0.0})
        with pytest.raises(DomainError):
            evaluate(parse("1/x"), {"x": 0.0})

    def test_unbound_variable(self):
        with pytest.raises(UnboundVariableError, match="'q'"):
            evaluate(parse("q+1"), {})

    def test_piecewise_branch_order(self):
        # overlapping conditions resolve to the first true branch
        e = parse("piecewise(x>=0: 1, x>=0: 2, else: 3)")
        assert evaluate(e, {"x": 0.0}) == 1.0

    def test_purity_same_bits(self):
        e = parse("sin(V)*exp(V/3) - tanh(V^2)")
        env = {"V": 1.2345}
        assert evaluate(e, env) == evaluate(e, env)

    def test_array_matches_scalar(self):
        e = parse(KAPPA)
        xs = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        arr = evaluate_array(e, {"x": xs})
        for x, v in zip(xs, arr):
            assert v == evaluate(e, {"x": float(x)})


class TestDifferentiate:
    def test_linear(self):
        assert differentiate(parse("p*V"), "V") == Var("p")

    def test_power_rule(self):
        d = differentiate(parse("V^(3/2)"), "V")
        for v in (0.25, 1.0, 2.5):
            assert evaluate(d, {"V": v}) == pytest.approx(1.5 * math.sqrt(v),
                                                          rel=1e-12)

    def test_abs_raises(self):
        with pytest.raises(NonSmoothError, match="abs"):
            differentiate(parse("abs(V)"), "V")

    def test_min_max_piecewise_raise(self):
        with pytest.raises(NonSmoothError):
            differentiate(parse("min(V, 1)"), "V")
        with pytest.raises(NonSmoothError):
            differentiate(parse(KAPPA), "x")

    def test_nonsmooth_without_var_is_constant(self):
        d = differentiate(parse("abs(p) + V"), "V")
        assert d == Num(1.0)

    def test_chain_and_quotient(self):
        d = differentiate(parse("sin(V^2)/(V+2)"), "V")
        v = 0.7
        expected = (2 * v * math.cos(v ** 2) * (v + 2) - math.sin(v ** 2)) \
            / (v + 2) ** 2
        assert evaluate(d, {"V": v}) == pytest.approx(expected, rel=1e-12)

    def test_general_power(self):
        d = differentiate(parse("V^V"), "V")
        v = 1.3
        assert evaluate(d, {"V": v}) == pytest.approx(
            v ** v * (math.log(v) + 1.0), rel=1e-12)

    def test_fold_constants(self):
        assert fold_constants(parse("2*3 + V*1")) == Bin("+", Num(6.0), Var("V"))


class TestFiniteDifferences:
    def test_square(self):
        assert fd_derivative(lambda v: v * v, 1.0) == pytest.approx(2.0, abs=1e-7)

    def test_scaled_linear(self):
        assert fd_derivative(lambda v: 3.0 * v, 10.0) == pytest.approx(3.0,
                                                                       abs=1e-7)

    def test_three_halves_power_matches_symbolic(self):
        d = differentiate(parse("V^(3/2)"), "V")
        sym = evaluate(d, {"V": 0.25})
        fd = fd_derivative(lambda v: v ** 1.5, 0.25)
        assert fd == pytest.approx(0.75, abs=1e-6)
        assert abs(sym - fd) <= 1e-6


def test_symbolic_vs_fd_on_random_smooth_expressions():
    rng = np.random.default_rng(20240817)
    checked = 0
    while checked < 100:
        expr = random_smooth_expr(rng)
        if "V" not in to_text(expr):
            continue
        d = differentiate(expr, "V")
        v = float(rng.uniform(0.1, 3.0))
        sym = evaluate(d, {"V": v})
        fd = fd_derivative(lambda u, _e=expr: evaluate(_e, {"V": u}), v)
        assert abs(sym - fd) <= 1e-6 * (1.0 + abs(sym)), to_text(expr)
        checked += 1


# --- round-trip property ----------------------------------------------------

_names = st.sampled_from(["V", "x", "p", "lam", "s2"])
_numbers = st.floats(min_value=0.0, max_value=1e6, allow_nan=False,
                     allow_infinity=False).map(lambda v: Num(float(v)))
_cmp_ops = st.sampled_from(["<", "<=", ">", ">="])


def _exprs(depth):
    leaf = st.one_of(_numbers, _names.map(Var))
    if depth == 0:
        return leaf
    sub = _exprs(depth - 1)
    return st.one_of(
        leaf,
        st.tuples(st.sampled_from("+-*/^"), sub, sub).map(lambda t: Bin(*t)),
        sub.map(Neg),
        st.tuples(st.sampled_from(["abs", "sqrt", "sin", "cos", "tanh", "exp",
                                   "ln"]), sub).map(lambda t: Func(*t)),
        st.tuples(st.sampled_from(["min", "max"]),
                  st.lists(sub, min_size=2, max_size=4).map(tuple)
                  ).map(lambda t: MinMax(*t)),
        st.tuples(st.lists(st.tuples(st.tuples(_cmp_ops, sub, sub)
                                     .map(lambda c: Cmp(*c)), sub),
                           min_size=1, max_size=3).map(tuple),
                  sub).map(lambda t: Piecewise(*t)),
    )


@settings(max_examples=300, deadline=None)
@given(_exprs(3))
def test_print_parse_round_trip(expr):
    text = to_text(expr)
    once = parse(text)
    assert parse(to_text(once)) == once
    assert once == expr
