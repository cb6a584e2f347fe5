"""Lie chains, relative degree and numerical relative degree.

Hand-checked values come from the double-integrator benchmark (states x1, x2,
drift [x2, -x2], input through the second state, output x1, parabolic
time-varying constraint).
"""

import math
import random

import pytest

from fblc.symbolic import Const, evaluate, parse_expr, simplify, to_str
from fblc.system import (
    EpsSchedule,
    InputAffineSystem,
    NoNumericalRelativeDegreeError,
    SystemError,
    eps_nrd,
    lie_f,
    lie_g_lie_f,
    relative_degree,
)

S2 = ["x1", "x2"]


def double_integrator():
    return InputAffineSystem(
        states=("x1", "x2"),
        f=(parse_expr("x2", S2), parse_expr("-x2", S2)),
        g=((Const(0.0),), (Const(1.0),)),
        h=(parse_expr("x1", S2),),
        x0=(0.0, -2.0),
    )


def parabola_constraint():
    return parse_expr("x1 - 8*(t-0.5)^2 + 0.5", S2)


def test_system_validation():
    with pytest.raises(SystemError, match="undeclared"):
        InputAffineSystem(
            states=("x1",),
            f=(parse_expr("x1 + u", ["x1", "u"]),),  # input must not appear in f
            g=((Const(1.0),),),
            h=(parse_expr("x1", ["x1"]),),
            x0=(0.0,),
        )
    with pytest.raises(SystemError, match="x0"):
        InputAffineSystem(
            states=("x1",),
            f=(Const(0.0),),
            g=((Const(1.0),),),
            h=(parse_expr("x1", ["x1"]),),
            x0=(0.0, 1.0),
        )


def test_lie_f_chain_for_parabola():
    sys = double_integrator()
    phi = parabola_constraint()
    l1 = lie_f(sys, phi, 1)
    l2 = lie_f(sys, phi, 2)
    assert l1 == simplify(parse_expr("x2 - 16*(t - 0.5)", S2))
    assert l2 == simplify(parse_expr("-x2 - 16", S2))


def test_lie_f_of_constant_vanishes():
    sys = double_integrator()
    assert lie_f(sys, Const(3.5), 1) == Const(0.0)
    assert lie_f(sys, Const(3.5), 4) == Const(0.0)


def test_lie_f_zeroth_order_is_identity():
    sys = double_integrator()
    phi = parabola_constraint()
    assert lie_f(sys, phi, 0) == simplify(phi)


def test_lie_g_rows():
    sys = double_integrator()
    phi = parabola_constraint()
    assert lie_g_lie_f(sys, phi, 0) == (Const(0.0),)
    assert lie_g_lie_f(sys, phi, 1) == (Const(1.0),)


def test_lie_g_on_lorenz_like_system():
    s3 = ["x1", "x2", "x3"]
    sys = InputAffineSystem(
        states=("x1", "x2", "x3"),
        f=(
            parse_expr("10*(x2 - x1)", s3),
            parse_expr("28*x1 - x2 - x1*x3", s3),
            parse_expr("x1*x2 - (8/3)*x3", s3),
        ),
        g=((Const(0.0),), (Const(1.0),), (Const(0.0),)),
        h=(parse_expr("x2", s3),),
        x0=(0.1, 1.0, 15.0),
    )
    assert lie_g_lie_f(sys, parse_expr("x2", s3), 0) == (Const(1.0),)


def test_chain_rule_consistency_along_trajectory():
    # d/dt psi(t, x(t)) == L_f(psi) + L_g(psi) u along integrated motion
    sys = double_integrator()
    psi = parse_expr("x1*x2 + sin(t)", S2)
    lf = lie_f(sys, psi, 1)
    lg = lie_g_lie_f(sys, psi, 0)[0]
    u_value = 0.7

    def rhs(t, x1, x2):
        return (x2, -x2 + u_value)

    # RK4 with small fixed step as an independent integrator
    t, x1, x2 = 0.0, 0.4, -1.1
    h = 1e-3
    for _ in range(200):
        k1 = rhs(t, x1, x2)
        k2 = rhs(t + h / 2, x1 + h / 2 * k1[0], x2 + h / 2 * k1[1])
        k3 = rhs(t + h / 2, x1 + h / 2 * k2[0], x2 + h / 2 * k2[1])
        k4 = rhs(t + h, x1 + h * k3[0], x2 + h * k3[1])
        x1 += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        x2 += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        t += h
        binding = {"t": t, "x1": x1, "x2": x2}
        analytic = evaluate(lf, binding) + evaluate(lg, binding) * u_value
        dt = 1e-6
        x1p = x1 + dt * x2
        x2p = x2 + dt * (-x2 + u_value)
        x1m = x1 - dt * x2
        x2m = x2 - dt * (-x2 + u_value)
        sampled = (
            evaluate(psi, {"t": t + dt, "x1": x1p, "x2": x2p})
            - evaluate(psi, {"t": t - dt, "x1": x1m, "x2": x2m})
        ) / (2 * dt)
        assert abs(analytic - sampled) < 1e-5


def test_relative_degree_of_parabola_is_two():
    sys = double_integrator()
    assert relative_degree(sys, parabola_constraint()).order == 2


def test_relative_degree_direct_feedthrough():
    sys = double_integrator()
    assert relative_degree(sys, parse_expr("x2", S2)).order == 1


def test_relative_degree_undefined_for_state_coefficient():
    # x' = x*u: coefficient x vanishes at x=0 only
    sys = InputAffineSystem(
        states=("x1",),
        f=(Const(0.0),),
        g=((parse_expr("x1", ["x1"]),),),
        h=(parse_expr("x1", ["x1"]),),
        x0=(1.0,),
    )
    result = relative_degree(sys, parse_expr("x1", ["x1"]))
    assert result.order is None
    assert "vanishes" in result.reason


def test_relative_degree_exceeds_max_order():
    sys = double_integrator()
    result = relative_degree(sys, Const(1.0), max_order=4)
    assert result.order is None
    assert "up to order 4" in result.reason


def test_eps_nrd_on_parabola():
    sys = double_integrator()
    result = eps_nrd(sys, parabola_constraint(), 0.01, sys.initial_binding())
    assert result.order == 2
    assert result.magnitudes == (0.0, 1.0)
    assert len(result.lie_f_chain) == 3
    assert len(result.lie_g_chain) == 2


def test_eps_nrd_trivial_first_order():
    sys = InputAffineSystem(
        states=("x1",),
        f=(Const(0.0),),
        g=((Const(1.0),),),
        h=(parse_expr("x1", ["x1"]),),
        x0=(0.0,),
    )
    for eps in (1e-6, 0.1, 0.99):
        assert eps_nrd(sys, parse_expr("x1", ["x1"]), eps, sys.initial_binding()).order == 1


def test_eps_nrd_failure_is_reported():
    sys = double_integrator()
    with pytest.raises(NoNumericalRelativeDegreeError):
        eps_nrd(sys, parabola_constraint(), 5.0, sys.initial_binding(), max_order=4)


def test_eps_nrd_monotone_in_threshold():
    # order is non-decreasing as every threshold grows
    sys = double_integrator()
    anchor = sys.initial_binding()
    phi = parabola_constraint()
    orders = []
    for eps in (0.01, 0.5, 0.99):
        orders.append(eps_nrd(sys, phi, eps, anchor).order)
    assert orders == sorted(orders)


def test_eps_nrd_matches_relative_degree_for_small_eps():
    sys = double_integrator()
    anchor = {"t": 0.2, "x1": -1.0, "x2": 0.5}
    phi = parabola_constraint()
    assert eps_nrd(sys, phi, 1e-9, anchor).order == relative_degree(sys, phi).order


def test_eps_schedule_broadcast_and_extension():
    s = EpsSchedule(0.01)
    assert s[0] == s[7] == 0.01
    s2 = EpsSchedule([0.1, 0.2])
    assert (s2[0], s2[1], s2[5]) == (0.1, 0.2, 0.2)
    with pytest.raises(ValueError):
        EpsSchedule(-1.0)


def test_eps_nrd_requires_full_anchor():
    sys = double_integrator()
    with pytest.raises(SystemError, match="missing"):
        eps_nrd(sys, parabola_constraint(), 0.01, {"t": 0.0, "x1": 0.0})
