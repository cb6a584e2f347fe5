"""Input-affine systems and their Lie derivative chains.

A system is the tuple (f, g, h, x0) with named states, drift f, input map g,
output h, and a distinguished time variable ``t``.  This module computes the
chains L_f^j(psi) and L_g L_f^j(psi), the global relative degree, and the
pointwise numerical relative degree used for constraint capture and switching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .symbolic import (
    Expr,
    Const,
    Var,
    EvalError,
    diff,
    evaluate,
    free_variables,
    is_identically_zero,
    probe_values,
    simplify,
    to_str,
)

TIME = "t"


class SystemError(ValueError):
    pass


class NoNumericalRelativeDegreeError(RuntimeError):
    """All input coefficients stayed at or below their thresholds up to max_order."""

    def __init__(self, max_order: int, magnitudes: Sequence[float]):
        super().__init__(
            f"no numerical relative degree up to order {max_order} "
            f"(coefficient magnitudes {[f'{m:.3g}' for m in magnitudes]})"
        )
        self.magnitudes = tuple(magnitudes)


@dataclass(frozen=True)
class InputAffineSystem:
    """System x' = f(t,x) + g(t,x) u, y = h(t,x) with initial state x0 at t0."""

    states: tuple[str, ...]
    f: tuple[Expr, ...]
    g: tuple[tuple[Expr, ...], ...]  # n rows of m columns
    h: tuple[Expr, ...]
    x0: tuple[float, ...]
    t0: float = 0.0
    inputs: tuple[str, ...] = ("u",)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "f", tuple(simplify(e) for e in self.f))
        object.__setattr__(self, "g", tuple(tuple(simplify(e) for e in row) for row in self.g))
        object.__setattr__(self, "h", tuple(simplify(e) for e in self.h))
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        self._validate()

    def _validate(self):
        n, m = len(self.states), len(self.inputs)
        if len(set(self.states) | {TIME}) != n + 1:
            raise SystemError("state names must be distinct and must not include 't'")
        if len(self.f) != n:
            raise SystemError(f"drift has {len(self.f)} rows, expected {n}")
        if len(self.g) != n or any(len(row) != m for row in self.g):
            raise SystemError(f"input map must be {n}x{m}")
        if len(self.h) != m:
            raise SystemError(f"output has {len(self.h)} rows, expected {m} (square system)")
        if len(self.x0) != n:
            raise SystemError(f"x0 has {len(self.x0)} entries, expected {n}")
        allowed = set(self.states) | {TIME}
        for label, exprs in (("f", self.f), ("h", self.h)):
            for e in exprs:
                extra = free_variables(e) - allowed
                if extra:
                    raise SystemError(f"{label} uses undeclared or input symbols {sorted(extra)}")
        for row in self.g:
            for e in row:
                extra = free_variables(e) - allowed
                if extra:
                    raise SystemError(f"g uses undeclared or input symbols {sorted(extra)}")

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        return len(self.inputs)

    def initial_binding(self) -> dict[str, float]:
        b = {TIME: self.t0}
        b.update(zip(self.states, self.x0))
        return b

    def describe(self) -> str:
        lines = [f"states: {' '.join(self.states)}", f"inputs: {' '.join(self.inputs)}"]
        for name, value in zip(self.states, self.f):
            lines.append(f"  d{name}/dt = {to_str(value)}")
        for j, out in enumerate(self.h):
            lines.append(f"  y{j + 1} = {to_str(out)}")
        return "\n".join(lines)


@dataclass(frozen=True)
class NrdResult:
    """Numerical relative degree at an anchor point, with its Lie chains.

    ``lie_f_chain`` holds L_f^0(psi) .. L_f^order(psi); ``lie_g_chain`` holds
    L_g L_f^0(psi) .. L_g L_f^(order-1)(psi); ``magnitudes`` are the absolute
    values of the lie_g entries at the anchor.
    """

    order: int
    lie_f_chain: tuple[Expr, ...]
    lie_g_chain: tuple[Expr, ...]
    magnitudes: tuple[float, ...]
    anchor: tuple = field(default=(), compare=False)


@dataclass(frozen=True)
class RelativeDegree:
    """Outcome of the global relative degree test; ``order`` is None when undefined."""

    order: int | None
    reason: str = ""

    @property
    def defined(self) -> bool:
        return self.order is not None


def lie_f(sys: InputAffineSystem, psi: Expr, order: int = 1) -> Expr:
    """j-th Lie derivative of psi along the drift:
    L_f^j = d(L_f^(j-1))/dx . f + d(L_f^(j-1))/dt, with L_f^0 = psi."""
    if order < 0:
        raise ValueError("order must be non-negative")
    out = simplify(psi)
    for _ in range(order):
        out = _lie_f_once(sys, out)
    return out


def _lie_f_once(sys: InputAffineSystem, psi: Expr) -> Expr:
    terms = [diff(psi, TIME)]
    for name, fi in zip(sys.states, sys.f):
        terms.append(diff(psi, name) * fi)
    return simplify(sum(terms[1:], terms[0]))


def lie_g_lie_f(sys: InputAffineSystem, psi: Expr, order: int = 0) -> tuple[Expr, ...]:
    """Input-coefficient row L_g L_f^j(psi) = d(L_f^j psi)/dx . g (length m)."""
    base = lie_f(sys, psi, order)
    row = []
    for col in range(sys.m):
        terms = [diff(base, name) * sys.g[i][col] for i, name in enumerate(sys.states)]
        row.append(simplify(sum(terms[1:], terms[0])) if terms else Const(0.0))
    return tuple(row)


def _vanishes_somewhere(e: Expr) -> bool:
    """True when probing finds the expression both near zero and clearly nonzero."""
    values = [abs(v) for v in probe_values(e, count=16, include_zero_axes=True)]
    values = [v for v in values if not (v != v)]  # drop NaN probes
    if not values:
        return False
    return min(values) < 1e-10 < max(values)


def relative_degree(sys: InputAffineSystem, psi: Expr, max_order: int = 10) -> RelativeDegree:
    """Global relative degree of a scalar function psi.

    Returns the smallest order whose input coefficient is provably nonzero
    everywhere; undefined when the search exceeds ``max_order`` or when the
    surviving coefficient vanishes on a proper subset of the domain (detected
    by probing disagreement).
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    for j in range(max_order):
        row = lie_g_lie_f(sys, psi, j)
        if all(is_identically_zero(entry) for entry in row):
            continue
        for entry in row:
            if is_identically_zero(entry):
                return RelativeDegree(None, f"coefficient row at order {j} is partially zero")
            if not isinstance(simplify(entry), Const) and _vanishes_somewhere(entry):
                return RelativeDegree(
                    None,
                    f"coefficient {to_str(entry)} vanishes on part of the domain",
                )
        return RelativeDegree(j + 1)
    return RelativeDegree(None, f"no nonzero coefficient up to order {max_order}")


class EpsSchedule:
    """Per-order thresholds; a scalar broadcasts, a short list extends its last entry."""

    def __init__(self, eps):
        if isinstance(eps, (int, float)):
            values = [float(eps)]
        else:
            values = [float(v) for v in eps]
        if not values or any(v <= 0 for v in values):
            raise ValueError("thresholds must be positive")
        self.values = values

    def __getitem__(self, i: int) -> float:
        return self.values[min(i, len(self.values) - 1)]


def eps_nrd(
    sys: InputAffineSystem,
    psi: Expr,
    eps,
    anchor: Mapping[str, float],
    max_order: int = 10,
) -> NrdResult:
    """Pointwise numerical relative degree at the anchor.

    Smallest order whose input coefficient magnitude exceeds its threshold,
    with all lower-order magnitudes at or below theirs.  The Lie chains are
    retained for controller synthesis and switching-set construction.
    Only implemented for single-input systems.
    """
    if sys.m != 1:
        raise NotImplementedError("numerical relative degree is implemented for m=1")
    schedule = EpsSchedule(eps)
    missing = ({TIME} | set(sys.states)) - set(anchor)
    if missing:
        raise SystemError(f"anchor must bind t and every state; missing {sorted(missing)}")

    lf_chain = [simplify(psi)]
    lg_chain: list[Expr] = []
    magnitudes: list[float] = []
    for j in range(max_order):
        coeff = lie_g_lie_f(sys, lf_chain[j], 0)[0]
        lg_chain.append(coeff)
        try:
            magnitude = abs(evaluate(coeff, anchor))
        except EvalError as err:
            raise SystemError(f"cannot evaluate input coefficient at anchor: {err}") from err
        magnitudes.append(magnitude)
        lf_chain.append(_lie_f_once(sys, lf_chain[j]))
        if magnitude > schedule[j]:
            return NrdResult(
                order=j + 1,
                lie_f_chain=tuple(lf_chain[: j + 2]),
                lie_g_chain=tuple(lg_chain),
                magnitudes=tuple(magnitudes),
                anchor=tuple(sorted(anchor.items())),
            )
    raise NoNumericalRelativeDegreeError(max_order, magnitudes)
