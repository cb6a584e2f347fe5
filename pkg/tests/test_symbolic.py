"""Expression engine tests: parser, differentiation, simplification, evaluation.

The randomized corpus checks differentiation against central finite
differences, simplify value-preservation and idempotence, and printer
round-trips (acceptance criterion for the engine is in test_acceptance).
"""

import math
import random

import pytest

from fblc.symbolic import (
    Const,
    EvalError,
    ParseError,
    Pow,
    Var,
    compile_exprs,
    diff,
    evaluate,
    free_variables,
    is_identically_zero,
    parse_expr,
    simplify,
    substitute,
    to_str,
)

SYMS = ["x1", "x2", "z1", "xi"]


def ev(text, **binding):
    return evaluate(parse_expr(text, SYMS), binding)


# ---------------------------------------------------------------------------
# parsing


def test_parse_constraint_expression():
    e = parse_expr("x1 - 8*(t-0.5)^2 + 0.5", ["x1", "x2"])
    assert free_variables(e) == {"x1", "t"}
    assert evaluate(e, {"x1": 0.0, "t": 0.0}) == pytest.approx(-1.5)
    assert evaluate(e, {"x1": 1.0, "t": 0.5}) == pytest.approx(1.5)


def test_parse_zero_and_reference():
    assert simplify(parse_expr("0", [])) == Const(0.0)
    e = parse_expr("sin(1.5*t) - cos(1.3*t)", [])
    assert evaluate(e, {"t": 2.0}) == pytest.approx(math.sin(3.0) - math.cos(2.6))


def test_parse_power_right_associative():
    # 2^3^2 = 2^(3^2) = 512
    assert ev("2^3^2") == pytest.approx(512.0)
    assert ev("-2^2") == pytest.approx(-4.0)
    assert ev("x1^-2", x1=2.0) == pytest.approx(0.25)


def test_parse_rational_exponent():
    e = parse_expr("x1^(1/2)", SYMS)
    assert simplify(e) == simplify(parse_expr("sqrt(x1)", SYMS))
    assert ev("x1^(2/3)", x1=8.0) == pytest.approx(4.0)
    assert ev("x1^0.5", x1=9.0) == pytest.approx(3.0)


def test_parse_general_power_goes_through_exp_log():
    e = parse_expr("x1^x2", SYMS)
    assert evaluate(e, {"x1": 2.0, "x2": 3.0}) == pytest.approx(8.0, rel=1e-12)


def test_parse_errors_carry_position():
    with pytest.raises(ParseError) as err:
        parse_expr("x1 + ", SYMS)
    assert err.value.position == 5
    with pytest.raises(ParseError, match="undeclared symbol 'q'"):
        parse_expr("x1 + q", SYMS)
    with pytest.raises(ParseError, match="unknown function"):
        parse_expr("sinh(x1)", SYMS)
    with pytest.raises(ParseError, match="trailing"):
        parse_expr("x1 x2", SYMS)


# ---------------------------------------------------------------------------
# differentiation


def test_diff_constraint_in_time():
    e = parse_expr("x1 - 8*(t-0.5)^2 + 0.5", SYMS)
    d = diff(e, "t")
    # -16*(t-0.5)
    for t in (0.0, 0.3, 1.7):
        assert evaluate(d, {"t": t}) == pytest.approx(-16.0 * (t - 0.5))


def test_diff_constant_is_zero():
    assert diff(Const(4.25), "x1") == Const(0.0)
    assert diff(parse_expr("sin(3)", []), "x1") == Const(0.0)


def test_diff_square_matches_finite_difference():
    e = parse_expr("x2^2", SYMS)
    d = diff(e, "x2")
    assert evaluate(d, {"x2": 3.0}) == pytest.approx(6.0)
    h = 1e-5
    fd = (ev("x2^2", x2=3.0 + h) - ev("x2^2", x2=3.0 - h)) / (2 * h)
    assert abs(evaluate(d, {"x2": 3.0}) - fd) < 1e-8


def test_diff_linearity_at_random_points():
    rng = random.Random(7)
    e1 = parse_expr("sin(x1)*x2 + x1^3", SYMS)
    e2 = parse_expr("exp(x1/4) - x2^2", SYMS)
    a, b = 2.5, -1.25
    combo = simplify(a * e1 + b * e2)
    d_combo = diff(combo, "x1")
    d_parts = simplify(a * diff(e1, "x1") + b * diff(e2, "x1"))
    for _ in range(25):
        binding = {"x1": rng.uniform(-2, 2), "x2": rng.uniform(-2, 2)}
        assert evaluate(d_combo, binding) == pytest.approx(evaluate(d_parts, binding), abs=1e-10)


@pytest.mark.parametrize(
    "text, var",
    [
        ("sin(2*x1)", "x1"),
        ("cos(x1*x2)", "x1"),
        ("exp(-x1^2)", "x1"),
        ("log(2 + x1^2)", "x1"),
        ("sqrt(4 + x1^2)", "x1"),
        ("tanh(x1/2)", "x1"),
        ("x1/(1 + x2^2)", "x2"),
        ("(x1 + x2)^3", "x2"),
    ],
)
def test_diff_rules_against_central_difference(text, var):
    e = parse_expr(text, SYMS)
    d = diff(e, var)
    rng = random.Random(hash(text) & 0xFFFF)
    h = 1e-5
    for _ in range(10):
        binding = {"x1": rng.uniform(-1.5, 1.5), "x2": rng.uniform(-1.5, 1.5)}
        hi = dict(binding)
        lo = dict(binding)
        hi[var] += h
        lo[var] -= h
        fd = (evaluate(e, hi) - evaluate(e, lo)) / (2 * h)
        exact = evaluate(d, binding)
        assert abs(exact - fd) <= 1e-6 * (1 + abs(exact))


# ---------------------------------------------------------------------------
# simplification


def test_simplify_drops_zero_and_unit_factors():
    assert to_str(simplify(parse_expr("x1*0 + x2*1", SYMS))) == "x2"
    assert simplify(parse_expr("x1^1 + 0", SYMS)) == Var("x1")
    assert simplify(parse_expr("x1^0", SYMS)) == Const(1.0)


def test_simplify_cancellation_to_zero():
    assert simplify(parse_expr("(t-0.5)*16 - 16*t + 8", [])) == Const(0.0)
    assert simplify(parse_expr("x2 - x2", SYMS)) == Const(0.0)
    assert simplify(parse_expr("x1*x2 - x2*x1", SYMS)) == Const(0.0)


def test_simplify_collects_like_terms_and_factors():
    e = simplify(parse_expr("x1 + 2*x1 + x2*x2", SYMS))
    assert e == simplify(parse_expr("3*x1 + x2^2", SYMS))
    assert simplify(parse_expr("x1*x1^2", SYMS)) == Pow(Var("x1"), 3)


def test_simplify_sqrt_square_collapses():
    e = substitute(parse_expr("z1^2", SYMS), {"z1": parse_expr("sqrt(3)", [])})
    assert e == Const(3.0)
    e2 = substitute(parse_expr("z1^2", SYMS), {"z1": parse_expr("sqrt(1 + x1)", SYMS)})
    assert e2 == simplify(parse_expr("1 + x1", SYMS))


def test_simplify_keeps_sqrt_of_square():
    # (x^2)^(1/2) is |x|, not x: must stay unmerged
    e = simplify(parse_expr("sqrt(x1^2)", SYMS))
    assert evaluate(e, {"x1": -3.0}) == pytest.approx(3.0)


def test_simplify_idempotent_on_samples():
    for text in [
        "x1 - 8*(t-0.5)^2 + 0.5",
        "(x1 + x2)*(x1 - x2)/x1",
        "sqrt(16*(t-0.5)^2 - 2*x1 - 1)",
        "2*(1/(exp(-xi)+1) - 0.5)",
        "x1*x2^2/(x2 + 1) - sin(x1)*cos(x2)",
    ]:
        once = simplify(parse_expr(text, SYMS))
        assert simplify(once) == once


def test_quotient_of_equal_trees_cancels():
    e = simplify(parse_expr("(x1 + x2)/(x1 + x2)", SYMS))
    assert e == Const(1.0)


# ---------------------------------------------------------------------------
# zero testing


def test_zero_test_examples():
    assert is_identically_zero(parse_expr("x2 - x2", SYMS))
    assert not is_identically_zero(parse_expr("1", []))
    assert not is_identically_zero(parse_expr("x1*xi", SYMS))
    assert is_identically_zero(parse_expr("x1*x2 - x2*x1", SYMS))


# ---------------------------------------------------------------------------
# evaluation and substitution


def test_eval_domain_errors_report_subtree():
    with pytest.raises(EvalError, match="sqrt"):
        ev("sqrt(x1)", x1=-1.0)
    with pytest.raises(EvalError, match="log"):
        ev("log(x1)", x1=0.0)
    with pytest.raises(EvalError, match="division by zero"):
        ev("1/x1", x1=0.0)
    with pytest.raises(EvalError, match="missing binding"):
        ev("x1 + x2", x1=1.0)


def test_negative_base_rational_roots():
    assert ev("x1^(1/3)", x1=-8.0) == pytest.approx(-2.0)
    with pytest.raises(EvalError):
        ev("x1^(1/2)", x1=-4.0)


def test_substitute_is_structural_then_simplified():
    e = parse_expr("x1^2 + x1", SYMS)
    out = substitute(e, {"x1": parse_expr("x2 + 1", SYMS)})
    for v in (0.0, 0.7, -2.2):
        assert evaluate(out, {"x2": v}) == pytest.approx((v + 1) ** 2 + (v + 1))


def test_compiled_matches_tree_evaluation():
    texts = [
        "x1 - 8*(t-0.5)^2 + 0.5",
        "sqrt(16*(t-0.5)^2 - 2*x1 - 1)",
        "2*100*(1/(exp(-xi)+1) - 0.5)",
        "x2/(1 + x1^2) + tanh(x1)",
    ]
    exprs = [parse_expr(s, SYMS) for s in texts]
    fn = compile_exprs(exprs, ["t", "x1", "x2", "xi"])
    rng = random.Random(3)
    for _ in range(50):
        b = {
            "t": rng.uniform(-1, 2),
            "x1": rng.uniform(-3, 0.5),
            "x2": rng.uniform(-3, 3),
            "xi": rng.uniform(-4, 4),
        }
        try:
            expected = [evaluate(e, b) for e in exprs]
        except EvalError:
            with pytest.raises(EvalError):
                fn(b["t"], b["x1"], b["x2"], b["xi"])
            continue
        got = fn(b["t"], b["x1"], b["x2"], b["xi"])
        for e_val, g_val in zip(expected, got):
            assert g_val == pytest.approx(e_val, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# printing


def test_print_round_trip_structural():
    for text in [
        "x1 - 8*(t-0.5)^2 + 0.5",
        "sqrt(16*(t-0.5)^2 - 2*x1 - 1)",
        "(16*t - x2 - 8)/sqrt(16*(t-0.5)^2 - 2*x1 - 1)",
        "-x1/(x2*xi)",
        "x1^(-2) + x2^(3/2)",
        "exp(-xi)/(exp(-xi) + 1)^2",
    ]:
        canon = simplify(parse_expr(text, SYMS))
        again = simplify(parse_expr(to_str(canon), SYMS))
        assert again == canon, f"round-trip changed {text!r}: {to_str(canon)} -> {to_str(again)}"
