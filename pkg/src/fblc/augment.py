"""Slack-variable constraint capture and integral wrapping.

A constraint phi(t,x) <= 0 is captured by pairing it with a slack chain
z, z', ..., z^(rho-1) satisfying phi + z^2/2 = 0 and replacing the system
input with the highest slack derivative.  The input map of the captured
system carries the factor z, so actuation vanishes on the constraint
boundary and violation becomes structurally impossible for any integrable
virtual input.  Integral wrapping then adds a state xi with xi' = w and
feeds the captured system the bounded signal s_beta(xi), which guarantees
integrability.  Constraints are captured sequentially, each stage treating
the previous integral-wrapped system as its base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from math import comb
from typing import Iterable, Mapping, Sequence

from .symbolic import (
    Const,
    Expr,
    Call,
    EvalError,
    Prod,
    Quot,
    Sum,
    Var,
    evaluate,
    free_variables,
    simplify,
    substitute,
    to_str,
)
from .system import (
    TIME,
    InputAffineSystem,
    NrdResult,
    SystemError,
    eps_nrd,
)

SLACK_GUARD = 1e-8
FEASIBILITY_MARGIN = 1e-9


class CaptureError(ValueError):
    pass


class SlackGuardError(ValueError):
    """Slack magnitude fell below the division guard; switching territory."""


class InfeasibleInitialInputError(ValueError):
    def __init__(self, required: float, beta: float):
        super().__init__(
            f"initial input bound infeasible: |s_beta argument| = {required:.6g} "
            f"requires beta > {required:.6g}, got beta = {beta:.6g}"
        )
        self.required = required
        self.beta = beta


def slack_names(index: int, rho: int) -> tuple[str, ...]:
    return tuple("d" * i + f"z{index}" for i in range(rho))


def sigmoid_expr(beta: float, xi: str) -> Expr:
    """Bounded integral map s_beta(xi) = 2*beta*(1/(exp(-xi)+1) - 0.5), range (-beta, beta)."""
    gate = Quot(Const(1.0), Sum((Call("exp", Prod((Const(-1.0), Var(xi)))), Const(1.0))))
    return simplify(Prod((Const(2.0 * beta), Sum((gate, Const(-0.5))))))


def sigmoid_inverse(beta: float, y: float) -> float:
    if abs(y) >= beta:
        raise InfeasibleInitialInputError(abs(y), beta)
    return math.log((beta + y) / (beta - y))


def _leibniz_tail(names: Sequence[str], i: int) -> Expr:
    """Lower-order product terms of d^i/dt^i(z^2/2):
    (1/2) * sum_{j=1}^{i-1} C(i,j) z^(i-j) z^(j), slack derivatives as variables."""
    terms = []
    for j in range(1, i):
        terms.append(Prod((Const(0.5 * comb(i, j)), Var(names[i - j]), Var(names[j]))))
    if not terms:
        return Const(0.0)
    return simplify(Sum(tuple(terms)))


def leibniz_chain(sys: InputAffineSystem, phi: Expr, rho: int, index: int = 1) -> list[Expr]:
    """Symbolic derivatives d^i/dt^i(phi + z^2/2) for i = 0..rho.

    Slack derivatives appear as formal variables z, dz, ddz, ...; entry rho
    carries the input term L_g L_f^(rho-1)(phi) * u and the new top slack
    derivative.
    """
    from .system import lie_f, lie_g_lie_f

    if rho < 1:
        raise ValueError("rho must be >= 1")
    names = slack_names(index, rho + 1)  # includes the pseudo input name at position rho
    chain = [simplify(phi + Const(0.5) * Var(names[0]) ** 2)]
    for i in range(1, rho + 1):
        entry = lie_f(sys, phi, i) + Var(names[0]) * Var(names[i]) + _leibniz_tail(names, i)
        if i == rho:
            entry = entry + lie_g_lie_f(sys, phi, rho - 1)[0] * Var(sys.inputs[0])
        chain.append(simplify(entry))
    return chain


def slack_recovery(phi: Expr, lie_f_chain: Sequence[Expr], rho: int, index: int = 1) -> list[Expr]:
    """Recovery expressions for the slack chain over the base coordinates.

    z = sqrt(-2 phi); z^(i) = -(L_f^i(phi) + tail) / z with all lower-order
    recoveries substituted in, so each entry depends on base states and t only.
    Evaluable only where phi < 0; division guards apply near the boundary.
    """
    if rho < 1:
        raise ValueError("rho must be >= 1")
    names = slack_names(index, rho)
    table: dict[str, Expr] = {names[0]: simplify(Call("sqrt", Const(-2.0) * phi))}
    out = [table[names[0]]]
    for i in range(1, rho):
        raw = Quot(Const(-1.0) * (lie_f_chain[i] + _leibniz_tail(names, i)), Var(names[0]))
        resolved = substitute(raw, table)
        table[names[i]] = resolved
        out.append(resolved)
    return out


@dataclass(frozen=True)
class CaptureStage:
    """One constraint capture, optionally followed by integral wrapping."""

    index: int
    phi: Expr
    rho: int
    slacks: tuple[str, ...]
    recovery: tuple[tuple[str, Expr], ...]  # name -> expression over the then-base coordinates
    omega: NrdResult
    omega_f: Expr  # L_f^rho(phi) + Leibniz tail, over then-base + slack names
    omega_g: Expr
    pseudo_input: str
    u_exp: Expr  # reconstruction of the then-base input
    anchor: tuple[tuple[str, float], ...]
    beta: float | None = None
    xi_name: str | None = None
    new_input: str | None = None
    xi0: float | None = None

    @property
    def integralized(self) -> bool:
        return self.xi_name is not None

    def recovery_map(self) -> dict[str, Expr]:
        return dict(self.recovery)


@dataclass(frozen=True)
class AugmentedSystem:
    """A base system together with the capture/integralize history that built it."""

    original: InputAffineSystem
    base: InputAffineSystem
    stages: tuple[CaptureStage, ...] = ()
    provenance: tuple[str, ...] = ()

    @property
    def xi_names(self) -> tuple[str, ...]:
        return tuple(s.xi_name for s in self.stages if s.xi_name)

    @property
    def all_slack_names(self) -> tuple[str, ...]:
        out: list[str] = []
        for s in self.stages:
            out.extend(s.slacks)
        return tuple(out)

    @property
    def omega_chains(self) -> tuple[NrdResult, ...]:
        return tuple(s.omega for s in self.stages)

    def eliminate(self, expr: Expr) -> Expr:
        """Substitute every slack variable by its recovery, last stage first.

        The result depends only on t, the original states and the integral
        states.
        """
        out = expr
        for stage in reversed(self.stages):
            out = substitute(out, stage.recovery_map())
        leftovers = free_variables(out) & set(self.all_slack_names)
        if leftovers:
            raise CaptureError(f"elimination left slack variables {sorted(leftovers)}")
        return out

    @property
    def input_reconstruction(self) -> Expr | None:
        """Original input over (t, x, xi...), or None when nothing was captured."""
        if not self.stages:
            return None
        return self.eliminate(self.stages[0].u_exp)

    def intermediate_input_rhs(self) -> list[Expr]:
        """Eliminated reconstructions of xi_k' for k = 1..r-1 (stage k+1 solves
        for the stage-k virtual input); the last integral state's derivative is
        the synthesized controller and is not known here."""
        return [self.eliminate(stage.u_exp) for stage in self.stages[1:]]

    def slack_values(self, binding: Mapping[str, float]) -> dict[str, float]:
        """Recovered slack values at a point given over (t, x, xi...) coordinates."""
        values: dict[str, float] = {}
        extended = dict(binding)
        for stage in self.stages:
            for name, rec in stage.recovery:
                v = evaluate(rec, extended)
                if name == stage.slacks[0] and abs(v) < SLACK_GUARD:
                    raise SlackGuardError(
                        f"slack {name} = {v:.3g} below guard {SLACK_GUARD:g}"
                    )
                values[name] = v
                extended[name] = v
        return values

    def constraint_values(self, binding: Mapping[str, float]) -> list[float]:
        return [evaluate(stage.phi, binding) for stage in self.stages]


def _as_augmented(sys: InputAffineSystem | AugmentedSystem) -> AugmentedSystem:
    if isinstance(sys, AugmentedSystem):
        return sys
    return AugmentedSystem(original=sys, base=sys)


def capture(
    sys: InputAffineSystem | AugmentedSystem,
    phi: Expr,
    eps,
    anchor: Mapping[str, float] | None = None,
    max_order: int = 10,
) -> AugmentedSystem:
    """Capture one constraint: extend the state by the slack chain of phi and
    replace the input by the highest slack derivative.

    Requires a strictly feasible anchor (phi(anchor) < 0); the numerical
    relative degree at the anchor fixes the chain length.  The returned
    system's input map vanishes on the constraint boundary by construction.
    """
    aug = _as_augmented(sys)
    base = aug.base
    if base.m != 1:
        raise NotImplementedError("constraint capture pipeline is single-input")
    if anchor is None:
        anchor = base.initial_binding()
    anchor = dict(anchor)

    extra = free_variables(phi) - set(base.states) - {TIME}
    if extra:
        raise CaptureError(f"constraint uses unknown symbols {sorted(extra)}")

    phi_value = evaluate(phi, anchor)
    if phi_value >= -FEASIBILITY_MARGIN:
        raise CaptureError(
            f"anchor on or outside the constraint boundary: phi = {phi_value:.6g} "
            "(strictly feasible start required; boundary starts have no input authority)"
        )

    nrd = eps_nrd(base, phi, eps, anchor, max_order=max_order)
    rho = nrd.order
    index = len(aug.stages) + 1
    names = slack_names(index, rho)
    pseudo = "d" * rho + f"z{index}"
    collisions = (set(names) | {pseudo}) & (set(base.states) | {TIME} | set(base.inputs))
    if collisions:
        raise CaptureError(f"generated slack names collide with system symbols {sorted(collisions)}")

    z = Var(names[0])
    omega_f = simplify(nrd.lie_f_chain[rho] + _leibniz_tail(list(names) + [pseudo], rho))
    omega_g = nrd.lie_g_chain[rho - 1]
    u_exp = simplify(Quot(Const(-1.0) * (omega_f + z * Var(pseudo)), omega_g))
    u_drift = simplify(Quot(Const(-1.0) * omega_f, omega_g))
    g_scale = simplify(Quot(Const(-1.0) * z, omega_g))

    new_states = base.states + names
    new_f = [simplify(fi + gi[0] * u_drift) for fi, gi in zip(base.f, base.g)]
    new_f += [Var(names[i + 1]) for i in range(rho - 1)]
    new_f.append(Const(0.0))
    new_g = [(simplify(gi[0] * g_scale),) for gi in base.g]
    new_g += [(Const(0.0),)] * (rho - 1)
    new_g.append((Const(1.0),))

    recovery = slack_recovery(phi, nrd.lie_f_chain, rho, index)
    slack_x0 = []
    binding = dict(anchor)
    for name, rec in zip(names, recovery):
        v = evaluate(rec, binding)
        if name == names[0] and abs(v) < SLACK_GUARD:
            raise SlackGuardError(f"anchor slack {name} = {v:.3g} below guard")
        slack_x0.append(v)
        binding[name] = v

    new_base = InputAffineSystem(
        states=new_states,
        f=tuple(new_f),
        g=tuple(new_g),
        h=base.h,
        x0=tuple(anchor[s] for s in base.states) + tuple(slack_x0),
        t0=float(anchor[TIME]),
        inputs=(pseudo,),
    )
    stage = CaptureStage(
        index=index,
        phi=simplify(phi),
        rho=rho,
        slacks=names,
        recovery=tuple(zip(names, recovery)),
        omega=nrd,
        omega_f=omega_f,
        omega_g=omega_g,
        pseudo_input=pseudo,
        u_exp=u_exp,
        anchor=tuple(sorted(binding.items())),
    )
    return AugmentedSystem(
        original=aug.original,
        base=new_base,
        stages=aug.stages + (stage,),
        provenance=aug.provenance + (f"capture[{index}] phi={to_str(stage.phi)} order={rho}",),
    )


def integralize(
    aug: AugmentedSystem,
    beta: float,
    xi_value: float | None = None,
) -> AugmentedSystem:
    """Wrap the most recent capture with the integral controller structure.

    Adds a state xi with xi' = w (the new input) and substitutes the captured
    pseudo input by s_beta(xi) throughout the dynamics and the input
    reconstruction.  Without an explicit ``xi_value`` the integral state is
    initialised so the reconstructed input starts at zero; that requires the
    start magnitude to stay below beta.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not aug.stages:
        raise CaptureError("nothing to integralize: no capture stage present")
    stage = aug.stages[-1]
    if stage.integralized:
        raise CaptureError(f"stage {stage.index} already integral-wrapped")

    base = aug.base
    xi = f"xi{stage.index}"
    new_input = f"w{stage.index}"
    if xi in base.states or new_input in base.states:
        raise CaptureError(f"generated names {xi}/{new_input} collide with system symbols")

    s_beta = sigmoid_expr(beta, xi)
    new_f = [simplify(fi + gi[0] * s_beta) for fi, gi in zip(base.f, base.g)]
    new_f.append(Const(0.0))
    new_g = [(Const(0.0),)] * base.n + [(Const(1.0),)]

    if xi_value is None:
        anchor = dict(stage.anchor)
        z_value = anchor[stage.slacks[0]]
        omega_f_value = evaluate(stage.omega_f, anchor)
        xi_value = sigmoid_inverse(beta, -omega_f_value / z_value)

    new_base = InputAffineSystem(
        states=base.states + (xi,),
        f=tuple(new_f),
        g=tuple(new_g),
        h=base.h,
        x0=base.x0 + (xi_value,),
        t0=base.t0,
        inputs=(new_input,),
    )
    new_stage = replace(
        stage,
        beta=float(beta),
        xi_name=xi,
        new_input=new_input,
        xi0=float(xi_value),
        u_exp=substitute(stage.u_exp, {stage.pseudo_input: s_beta}),
    )
    return AugmentedSystem(
        original=aug.original,
        base=new_base,
        stages=aug.stages[:-1] + (new_stage,),
        provenance=aug.provenance + (f"integralize[{stage.index}] beta={beta:g}",),
    )


def integral_init(aug: AugmentedSystem, anchor: Mapping[str, float] | None = None) -> tuple[float, ...]:
    """Zero-offset integral state values at an anchor over the original coordinates.

    Recomputes, stage by stage, the slack values and the xi making each
    stage's reconstructed input start at zero.  With no anchor given, returns
    the values fixed at construction time.
    """
    if anchor is None:
        return tuple(s.xi0 for s in aug.stages if s.xi0 is not None)
    binding = dict(anchor)
    out = []
    for stage in aug.stages:
        if not stage.integralized:
            break
        for name, rec in stage.recovery:
            binding[name] = evaluate(rec, binding)
        if abs(binding[stage.slacks[0]]) < SLACK_GUARD:
            raise SlackGuardError(f"slack {stage.slacks[0]} below guard at anchor")
        omega_f_value = evaluate(stage.omega_f, binding)
        xi0 = sigmoid_inverse(stage.beta, -omega_f_value / binding[stage.slacks[0]])
        binding[stage.xi_name] = xi0
        out.append(xi0)
    return tuple(out)


def _beta_schedule(betas, count: int) -> list[float]:
    if isinstance(betas, (int, float)):
        return [float(betas)] * count
    values = [float(b) for b in betas]
    if len(values) < count:
        values += [values[-1]] * (count - len(values))
    return values[:count]


def sequential_capture(
    sys: InputAffineSystem | AugmentedSystem,
    constraints: Iterable[Expr],
    eps,
    anchor: Mapping[str, float] | None = None,
    betas=1.0,
    xi_values: Sequence[float] | None = None,
    max_order: int = 10,
) -> AugmentedSystem:
    """Capture constraints one at a time, integral-wrapping after each.

    Later captures differentiate through the earlier integral states, so their
    switching chains depend on the xi's introduced before them.  ``xi_values``
    overrides the zero-offset initialisation (used when re-anchoring mid-run,
    where the integral states already hold values).
    """
    aug = _as_augmented(sys)
    constraints = list(constraints)
    if not constraints:
        return aug
    betas = _beta_schedule(betas, len(constraints))
    if anchor is None:
        anchor = aug.base.initial_binding()
    binding = dict(anchor)

    for k, (phi, beta) in enumerate(zip(constraints, betas)):
        aug = capture(aug, phi, eps, binding, max_order=max_order)
        stage = aug.stages[-1]
        binding.update(dict(stage.anchor))
        xi_value = None if xi_values is None else float(xi_values[k])
        aug = integralize(aug, beta, xi_value=xi_value)
        binding[aug.stages[-1].xi_name] = aug.stages[-1].xi0
    return aug
