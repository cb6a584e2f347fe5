"""Tracking controller synthesis on the integral-augmented system.

The output's tracking-error chain is differentiated until the input
coefficient exceeds its threshold at the anchor (input terms below threshold
are discarded), the resulting chain is linearised by feedback, the companion
error dynamics are stabilised by pole placement, and the augmented slack
states are eliminated so the final law depends only on time, the original
states and the integral states.  Validity regions are tracked by switching
predicates over the stored Lie-derivative magnitudes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .symbolic import (
    Const,
    Expr,
    EvalError,
    Quot,
    evaluate,
    free_variables,
    simplify,
    to_str,
)
from .system import TIME, EpsSchedule, InputAffineSystem, NrdResult, eps_nrd
from .augment import AugmentedSystem, sequential_capture

DEFAULT_HYSTERESIS = 1.05


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class GainVector:
    """Feedback gains K for companion-form error dynamics with the given poles.

    The closed loop satisfies E^(s) = -K1 E - K2 E' - ... - Ks E^(s-1), i.e.
    the characteristic polynomial is l^s + Ks l^(s-1) + ... + K2 l + K1.
    """

    K: tuple[float, ...]
    poles: tuple[float, ...]


def pole_gains(poles: Sequence[float]) -> GainVector:
    """Gains by coefficient matching of prod(l - p_i) against the companion form."""
    poles = tuple(float(p) for p in poles)
    if not poles:
        raise ValueError("at least one pole required")
    if any(p >= 0 for p in poles):
        warnings.warn(f"non-negative pole in {poles}: error dynamics will not decay", stacklevel=2)
    coeffs = [1.0]  # highest power first
    for p in poles:
        nxt = [0.0] * (len(coeffs) + 1)
        for i, c in enumerate(coeffs):
            nxt[i] += c
            nxt[i + 1] -= c * p
        coeffs = nxt
    # coeffs = [1, c_{s-1}, ..., c_0]; K_i multiplies E^(i-1), so K_i = c_{i-1}
    K = tuple(reversed(coeffs[1:]))
    return GainVector(K=K, poles=poles)


def companion_matrix(gains: GainVector):
    """Closed-loop matrix A - B K (integrator chain with gain feedback in the last row)."""
    import numpy as np

    s = len(gains.K)
    A = np.zeros((s, s))
    for i in range(s - 1):
        A[i, i + 1] = 1.0
    A[s - 1, :] = [-k for k in gains.K]
    return A


@dataclass(frozen=True)
class SwitchPredicate:
    """One membership condition of the controller's validity region.

    kind "below": usable while |expr| < threshold (the coefficient was treated
    as zero at synthesis).  kind "above": usable while |expr| >= threshold
    (the coefficient carries the input).  Hysteresis widens/raises the bound
    depending on whether an active controller is being checked or a cached
    one re-admitted.
    """

    expr: Expr
    threshold: float
    kind: str  # "below" | "above"
    label: str

    def holds(self, binding: Mapping[str, float], role: str = "exact", hysteresis: float = DEFAULT_HYSTERESIS) -> bool:
        try:
            value = abs(evaluate(self.expr, binding))
        except EvalError:
            return False  # guarded region counts as outside the validity set
        if value != value:  # NaN
            return False
        if self.kind == "below":
            bound = self.threshold * (hysteresis if role == "active" else 1.0)
            return value < bound
        bound = self.threshold * (hysteresis if role == "admit" else 1.0)
        return value >= bound


@dataclass(frozen=True)
class ErrorChain:
    gamma_f: Expr
    gamma_g: Expr
    gamma_r: Expr
    error_states: tuple[Expr, ...]  # E, E', ..., E^(sigma-1) over augmented coordinates


def reference_derivative(y_r: Expr, order: int) -> Expr:
    from .symbolic import diff

    out = simplify(y_r)
    for _ in range(order):
        out = diff(out, TIME)
    return out


def error_chain(sys: InputAffineSystem, y_r: Expr, nrd: NrdResult) -> ErrorChain:
    """Tracking-error derivative chain at the numerical relative degree.

    E^(j) = L_f^j(h) - y_r^(j) for j < order (input coefficients at those
    orders sat at or below threshold and are discarded); at the top order
    E^(order) = gamma_f + gamma_g * w - gamma_r.
    """
    sigma = nrd.order
    states = tuple(
        simplify(nrd.lie_f_chain[j] - reference_derivative(y_r, j)) for j in range(sigma)
    )
    return ErrorChain(
        gamma_f=nrd.lie_f_chain[sigma],
        gamma_g=nrd.lie_g_chain[sigma - 1],
        gamma_r=reference_derivative(y_r, sigma),
        error_states=states,
    )


@dataclass(frozen=True)
class SynthesizedController:
    """Closed-form switching-aware tracking controller.

    ``pi`` is the eliminated law for the last integral state's derivative
    (depends on t, original states and xi's only); ``w_tilde`` is the same law
    over the augmented coordinates; ``u_reconstruction`` is the original
    system input.  ``switching`` holds the membership predicates whose failure
    invalidates this controller.
    """

    pi: Expr
    w_tilde: Expr
    u_reconstruction: Expr | None
    nrd_signature: tuple
    switching: tuple[SwitchPredicate, ...]
    gamma_chain: NrdResult
    error_state_exprs: tuple[Expr, ...]
    gains: GainVector
    xi_rhs: tuple[Expr, ...]
    y_r: Expr
    aug: AugmentedSystem = field(compare=False, repr=False)

    @property
    def sigma(self) -> int:
        return self.nrd_signature[1]

    def binding(self, t: float, x: Sequence[float], xi: Sequence[float]) -> dict[str, float]:
        b = {TIME: float(t)}
        b.update(zip(self.aug.original.states, x))
        b.update(zip(self.aug.xi_names, xi))
        return b

    def membership(self, binding: Mapping[str, float], role: str, hysteresis: float = DEFAULT_HYSTERESIS) -> bool:
        return all(p.holds(binding, role, hysteresis) for p in self.switching)


def _broadcast_poles(poles, sigma: int) -> tuple[float, ...]:
    if isinstance(poles, (int, float)):
        return (float(poles),) * sigma
    values = [float(p) for p in poles]
    if len(values) < sigma:
        values += [values[-1]] * (sigma - len(values))
    return tuple(values[:sigma])


def synthesize(
    sysI: AugmentedSystem,
    y_r: Expr,
    poles,
    eps,
    anchor: Mapping[str, float] | None = None,
    max_order: int = 10,
) -> SynthesizedController:
    """Feedback-linearising tracking law for the (integral-augmented) system.

    Solves E^(sigma) = -K.E for the virtual input, eliminates the slack
    states, and records the Lie-derivative chains whose threshold crossings
    invalidate the law.  A scalar pole broadcasts to the synthesized order.
    """
    base = sysI.base
    if base.m != 1:
        raise NotImplementedError("controller synthesis is single-input")
    if anchor is None:
        anchor = base.initial_binding()

    nrd = eps_nrd(base, base.h[0], eps, anchor, max_order=max_order)
    sigma = nrd.order
    chain = error_chain(base, y_r, nrd)
    gains = pole_gains(_broadcast_poles(poles, sigma))

    feedback = sum(
        (Const(k) * e for k, e in zip(gains.K[1:], chain.error_states[1:])),
        Const(gains.K[0]) * chain.error_states[0],
    )
    w_tilde = simplify(
        Quot(Const(-1.0) * (chain.gamma_f - chain.gamma_r + feedback), chain.gamma_g)
    )
    pi = sysI.eliminate(w_tilde)

    allowed = {TIME} | set(sysI.original.states) | set(sysI.xi_names)
    leftover = free_variables(pi) - allowed
    if leftover:
        raise SynthesisError(f"elimination failed: controller still depends on {sorted(leftover)}")

    schedule = EpsSchedule(eps)
    predicates: list[SwitchPredicate] = []
    for stage in sysI.stages:
        for i, coeff in enumerate(stage.omega.lie_g_chain):
            kind = "above" if i == stage.rho - 1 else "below"
            predicates.append(
                SwitchPredicate(
                    expr=sysI.eliminate(coeff),
                    threshold=schedule[i],
                    kind=kind,
                    label=f"C1[constraint {stage.index}, order {i}]",
                )
            )
    for i, coeff in enumerate(nrd.lie_g_chain):
        kind = "above" if i == sigma - 1 else "below"
        predicates.append(
            SwitchPredicate(
                expr=sysI.eliminate(coeff),
                threshold=schedule[i],
                kind=kind,
                label=f"C2[output, order {i}]",
            )
        )

    signature = (tuple(stage.rho for stage in sysI.stages), sigma)
    return SynthesizedController(
        pi=pi,
        w_tilde=w_tilde,
        u_reconstruction=sysI.input_reconstruction,
        nrd_signature=signature,
        switching=tuple(predicates),
        gamma_chain=nrd,
        error_state_exprs=tuple(sysI.eliminate(e) for e in chain.error_states),
        gains=gains,
        xi_rhs=tuple(sysI.intermediate_input_rhs()) + (pi,) if sysI.stages else (),
        y_r=simplify(y_r),
        aug=sysI,
    )


def synthesize_pipeline(
    sys: InputAffineSystem,
    constraints: Sequence[Expr],
    y_r: Expr,
    eps,
    poles,
    betas,
    anchor: Mapping[str, float] | None = None,
    xi_values: Sequence[float] | None = None,
    max_order: int = 10,
) -> SynthesizedController:
    """Sequential constraint capture followed by controller synthesis
    (the full pipeline run at the initial point and at every switch)."""
    aug = sequential_capture(
        sys, constraints, eps, anchor=anchor, betas=betas, xi_values=xi_values, max_order=max_order
    )
    return synthesize(aug, y_r, poles, eps, anchor=None, max_order=max_order)


def switch_check(
    ctrl: SynthesizedController,
    t: float,
    x: Sequence[float],
    xi: Sequence[float],
    hysteresis: float = DEFAULT_HYSTERESIS,
) -> bool:
    """True when the controller's validity region is left at (t, x, xi).

    Membership uses the stored predicates with hysteresis: "above" entries
    trigger at their threshold, "below" entries only once they exceed
    hysteresis * threshold (re-admission of a cached controller demands the
    mirror-image margins).  Evaluation failures count as a trigger.
    """
    return not ctrl.membership(ctrl.binding(t, x, xi), role="active", hysteresis=hysteresis)


class ControllerCache:
    """Synthesized controllers keyed exactly on their numerical-relative-degree
    signature; single-writer, lookups never mutate."""

    def __init__(self):
        self._store: dict[tuple, SynthesizedController] = {}

    def store(self, ctrl: SynthesizedController) -> None:
        self._store[ctrl.nrd_signature] = ctrl

    def lookup(self, signature: tuple) -> SynthesizedController | None:
        return self._store.get(signature)

    def __len__(self) -> int:
        return len(self._store)

    def signatures(self) -> list[tuple]:
        return sorted(self._store)


def signature_label(signature: tuple) -> str:
    rhos, sigma = signature
    if rhos:
        return "r" + "-".join(str(r) for r in rhos) + f"s{sigma}"
    return f"s{sigma}"


def export_controller(ctrl: SynthesizedController) -> str:
    """Deterministic text export for diff-based regression checks."""
    lines = [
        f"signature: {signature_label(ctrl.nrd_signature)}",
        f"poles: {' '.join(f'{p:.12g}' for p in ctrl.gains.poles)}",
        f"gains: {' '.join(f'{k:.12g}' for k in ctrl.gains.K)}",
        f"reference: {to_str(ctrl.y_r)}",
        f"pi: {to_str(ctrl.pi)}",
        f"u: {to_str(ctrl.u_reconstruction) if ctrl.u_reconstruction is not None else to_str(ctrl.pi)}",
        f"w_tilde: {to_str(ctrl.w_tilde)}",
    ]
    for i, rhs in enumerate(ctrl.xi_rhs[:-1], start=1):
        lines.append(f"xi{i}_rhs: {to_str(rhs)}")
    for p in ctrl.switching:
        op = "<" if p.kind == "below" else ">="
        lines.append(f"switch {p.label}: |{to_str(p.expr)}| {op} {p.threshold:.12g}")
    return "\n".join(lines) + "\n"
