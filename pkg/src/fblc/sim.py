"""Closed-loop simulation with switching detection and verification reporting.

The integrator is an embedded Dormand-Prince 4(5) pair with PI step-size
control (first-same-as-last).  Closed loops couple the original dynamics
under the reconstructed input to the integral states; after every accepted
step the active controller's validity predicates are checked, a violation is
localized by bisection, and the controller is re-synthesized at the event
state (or fetched from the signature-keyed cache).

Switching discipline: a replacement controller of higher order (a coefficient
decayed below threshold) is admitted as soon as it is valid at the event
point.  A replacement of lower order (a coefficient recovered) must clear the
hysteresis margin and, probed under its own closed-loop field, keep its
margins for at least a minimum dwell; otherwise the active law is kept.  This
suppresses the sliding-mode chattering that raw threshold switching produces
when both vector fields point into the threshold band.

Runs are deterministic: same configuration, same trajectory.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .symbolic import Expr, EvalError, compile_exprs, evaluate, simplify
from .system import TIME, InputAffineSystem, NoNumericalRelativeDegreeError, eps_nrd, lie_f, lie_g_lie_f
from .augment import (
    AugmentedSystem,
    CaptureError,
    SlackGuardError,
    capture,
    sequential_capture,
)
from .fbl import (
    ControllerCache,
    SynthesizedController,
    SynthesisError,
    signature_label,
    synthesize,
    synthesize_pipeline,
)


class IntegrationError(RuntimeError):
    pass


class StepUnderflowError(IntegrationError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow at t = {t:.9g} (h = {h:.3g})")
        self.t = t


class GuardedDomainError(IntegrationError):
    """The right-hand side hit a guarded domain (boundary/switching territory)."""

    def __init__(self, t: float, detail: str):
        super().__init__(f"guarded-domain evaluation at t = {t:.9g}: {detail}")
        self.t = t


class SimulationError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Integration and synthesis parameters for one scenario run."""

    horizon: float
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = 0.05
    eps: object = 0.01
    betas: object = 1.0
    poles: object = -1.0
    event_tol: float = 1e-9
    max_order: int = 10
    hysteresis: float = 1.05
    max_events: int = 200
    min_dwell: float = 1e-3
    retry_steps: int = 25

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "max_step", "event_tol", "min_dwell"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped samples of a run plus any switch events."""

    state_names: tuple[str, ...]
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray | None = None
    outputs: np.ndarray | None = None
    references: np.ndarray | None = None
    constraints: np.ndarray | None = None
    events: tuple[tuple[float, str, str], ...] = ()

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states disagree in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("sample times must be strictly increasing")
        lo, hi = self.times[0], self.times[-1]
        for when, _, _ in self.events:
            if not (lo <= when <= hi):
                raise ValueError("event time outside the sampled span")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def max_constraint(self) -> float:
        if self.constraints is None or self.constraints.size == 0:
            return -math.inf
        return float(np.max(self.constraints))

    def tracking_error(self) -> np.ndarray:
        return np.abs(self.outputs - self.references)


# ---------------------------------------------------------------------------
# Dormand-Prince 4(5) with PI step control

_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_ERR = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_PI_ALPHA = 0.7 / 5
_PI_BETA = 0.4 / 5


class _Stepper:
    """Single adaptive integrator instance; step() advances one accepted step."""

    def __init__(self, rhs: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, cfg: RunConfig):
        self.rhs = rhs
        self.t = float(t)
        self.y = np.asarray(y, dtype=float)
        self.cfg = cfg
        self.h = min(cfg.max_step, 1e-4 if cfg.max_step > 1e-4 else cfg.max_step)
        self.err_prev = 1.0
        self.k1 = None  # FSAL stage reuse

    def _eval(self, t: float, y: np.ndarray) -> np.ndarray:
        try:
            out = self.rhs(t, y)
        except EvalError as err:
            raise GuardedDomainError(t, str(err)) from None
        arr = np.asarray(out, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise GuardedDomainError(t, "non-finite right-hand side")
        return arr

    def step(self, t_end: float) -> tuple[float, np.ndarray]:
        """Advance to the next accepted point (never past t_end)."""
        cfg = self.cfg
        if self.k1 is None:
            self.k1 = self._eval(self.t, self.y)
        while True:
            h = min(self.h, cfg.max_step, t_end - self.t)
            if h <= 0:
                raise IntegrationError("step() called at or past t_end")
            if h < 1e-14 * max(1.0, abs(self.t)):
                raise StepUnderflowError(self.t, h)
            try:
                k = [self.k1]
                for i in range(1, 7):
                    yi = self.y + h * sum(a * ks for a, ks in zip(_DP_A[i], k))
                    k.append(self._eval(self.t + _DP_C[i] * h, yi))
            except GuardedDomainError:
                # boundary contact inside the trial step: retreat and retry
                if h < 1e-13 * max(1.0, abs(self.t)):
                    raise
                self.h = h * 0.25
                continue

            y_new = self.y + h * sum(b * ks for b, ks in zip(_DP_B5, k))
            err_vec = h * sum(e * ks for e, ks in zip(_DP_ERR, k))
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(self.y), np.abs(y_new))
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))

            if err <= 1.0:
                err = max(err, 1e-10)
                factor = _SAFETY * err**-_PI_ALPHA * self.err_prev**_PI_BETA
                self.err_prev = err
                self.h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
                self.t += h
                self.y = y_new
                self.k1 = k[6]  # FSAL
                return self.t, self.y
            self.h = h * max(_MIN_FACTOR, _SAFETY * err ** (-1 / 5))


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    x_start: Sequence[float],
    t_span: tuple[float, float],
    cfg: RunConfig,
    state_names: Sequence[str] | None = None,
) -> Trajectory:
    """Integrate a plain vector field over a span, sampling every accepted step."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise ValueError("t_span must be increasing")
    y0 = np.asarray(x_start, dtype=float)
    names = tuple(state_names) if state_names else tuple(f"y{i+1}" for i in range(len(y0)))
    times = [t0]
    states = [y0.copy()]
    if t1 > t0:
        stepper = _Stepper(rhs, t0, y0, cfg)
        while stepper.t < t1 - 1e-14 * max(1.0, abs(t1)):
            t, y = stepper.step(t1)
            times.append(t)
            states.append(y.copy())
    return Trajectory(state_names=names, times=np.array(times), states=np.array(states))


def _propagate(rhs, t0: float, y0: np.ndarray, t1: float, cfg: RunConfig) -> np.ndarray:
    """State at t1 starting from (t0, y0); helper for event bisection."""
    if t1 <= t0:
        return y0.copy()
    stepper = _Stepper(rhs, t0, y0, cfg)
    while stepper.t < t1 - 1e-15 * max(1.0, abs(t1)):
        stepper.step(t1)
    return stepper.y


# ---------------------------------------------------------------------------
# per-controller compiled runtime
#
# The loop integrates in the controller's augmented chart (x, slack chains,
# integral states): those dynamics are polynomial in the slacks and stay
# smooth when the trajectory presses against a constraint boundary, whereas
# the eliminated (x, xi) form divides by sqrt(-2 phi) and degenerates there.
# Samples are projected back to (x, xi) for the trajectory record.


class _LoopRuntime:
    """Compiled closed-loop pieces for one controller, in its augmented chart."""

    def __init__(self, sys: InputAffineSystem, ctrl: SynthesizedController, constraints: Sequence[Expr], eps):
        from .system import EpsSchedule

        self.sys = sys
        self.ctrl = ctrl
        aug = ctrl.aug
        base = aug.base
        self.chart = base.states
        params = (TIME,) + base.states

        w = ctrl.w_tilde
        loop_exprs = [simplify(fi + gi[0] * w) for fi, gi in zip(base.f, base.g)]
        u_expr = aug.stages[0].u_exp if aug.stages else ctrl.pi
        self._rhs_fn = compile_exprs(loop_exprs, params)
        self._obs_fn = compile_exprs([u_expr, base.h[0], ctrl.y_r, *constraints], params)

        schedule = EpsSchedule(eps)
        self.predicates = []  # (kind, threshold) aligned with the compiled values
        pred_exprs = []
        for stage in aug.stages:
            for i, coeff in enumerate(stage.omega.lie_g_chain):
                kind = "above" if i == stage.rho - 1 else "below"
                self.predicates.append((kind, schedule[i]))
                pred_exprs.append(coeff)
        for i, coeff in enumerate(ctrl.gamma_chain.lie_g_chain):
            kind = "above" if i == ctrl.sigma - 1 else "below"
            self.predicates.append((kind, schedule[i]))
            pred_exprs.append(coeff)
        self._pred_fn = compile_exprs(pred_exprs, params)

        self._x_idx = [base.states.index(s) for s in sys.states]
        self._xi_idx = [base.states.index(s) for s in aug.xi_names]

    def project(self, y: np.ndarray) -> tuple[list[float], list[float]]:
        return [float(y[i]) for i in self._x_idx], [float(y[i]) for i in self._xi_idx]

    def projected_row(self, y: np.ndarray) -> list[float]:
        x, xi = self.project(y)
        return x + xi

    def chart_state(
        self,
        t: float,
        x: Sequence[float],
        xi: Sequence[float],
        donor_names: Sequence[str] = (),
        donor_values: Sequence[float] = (),
    ) -> np.ndarray:
        """Assemble this chart's state from (x, xi), reusing a donor chart's
        integrated slack values where names coincide and recovering the rest
        from the capture anchor."""
        donor = dict(zip(donor_names, donor_values))
        values = dict(zip(self.sys.states, map(float, x)))
        values.update(zip(self.ctrl.aug.xi_names, map(float, xi)))
        out = []
        for name, fallback in zip(self.chart, self.ctrl.aug.base.x0):
            if name in values:
                out.append(values[name])
            elif name in donor:
                out.append(float(donor[name]))
            else:
                out.append(float(fallback))
        return np.array(out, dtype=float)

    def rhs(self, t: float, y: np.ndarray) -> tuple:
        return self._rhs_fn(float(t), *[float(v) for v in y])

    def observe(self, t: float, y: np.ndarray) -> tuple:
        return self._obs_fn(float(t), *[float(v) for v in y])

    def predicate_values(self, t: float, y: np.ndarray) -> list[float]:
        return [abs(v) for v in self._pred_fn(float(t), *[float(v) for v in y])]

    def member(self, t: float, y: np.ndarray, hysteresis: float) -> bool:
        """Validity with the active-role hysteresis: "above" entries trigger at
        their threshold, "below" entries only beyond hysteresis * threshold."""
        try:
            values = self.predicate_values(t, y)
        except EvalError:
            return False
        for (kind, threshold), v in zip(self.predicates, values):
            if v != v:
                return False
            if kind == "below" and v >= threshold * hysteresis:
                return False
            if kind == "above" and v < threshold:
                return False
        return True

    def admissible(self, t: float, y: np.ndarray, cfg: RunConfig) -> bool:
        """Re-admission test: margins clear of the thresholds by the hysteresis
        factor, and no margin projected to collapse within the minimum dwell
        under this controller's own field (forward-Euler probe)."""
        try:
            v1 = self.predicate_values(t, y)
        except EvalError:
            return False
        for (kind, threshold), v in zip(self.predicates, v1):
            if v != v:
                return False
            if kind == "below" and v >= threshold:
                return False
            if kind == "above" and v < threshold * cfg.hysteresis:
                return False
        delta = cfg.min_dwell / 16.0
        try:
            f = np.asarray(self.rhs(t, y), dtype=float)
            if not np.all(np.isfinite(f)):
                return False
            v2 = self.predicate_values(t + delta, y + delta * f)
        except EvalError:
            return False
        for (kind, threshold), a, b in zip(self.predicates, v1, v2):
            if b != b:
                return False
            rate = (b - a) / delta
            if kind == "above" and rate < 0:
                margin = a - threshold
                if margin / -rate < cfg.min_dwell:
                    return False
            if kind == "below" and rate > 0:
                margin = threshold * cfg.hysteresis - a
                if margin / rate < cfg.min_dwell:
                    return False
        return True


def _fresh_signature(
    sys: InputAffineSystem,
    constraints: Sequence[Expr],
    cfg: RunConfig,
    t: float,
    x: Sequence[float],
    xi: Sequence[float],
) -> tuple[tuple, AugmentedSystem]:
    anchor = {TIME: float(t), **{s: float(v) for s, v in zip(sys.states, x)}}
    aug = sequential_capture(
        sys, constraints, cfg.eps, anchor=anchor, betas=cfg.betas,
        xi_values=[float(v) for v in xi], max_order=cfg.max_order,
    )
    nrd = eps_nrd(aug.base, aug.base.h[0], cfg.eps, aug.base.initial_binding(), max_order=cfg.max_order)
    return (tuple(s.rho for s in aug.stages), nrd.order), aug


def run_closed_loop(
    sys: InputAffineSystem,
    constraints: Sequence[Expr],
    y_r: Expr,
    cfg: RunConfig,
    anchor: Mapping[str, float] | None = None,
    cache: ControllerCache | None = None,
) -> Trajectory:
    """Simulate the constraint-respecting switching loop from a feasible anchor.

    Synthesizes the controller at the start point, integrates the coupled
    dynamics, evaluates the switching predicates after every accepted step,
    bisects any violation down to the event tolerance, and re-anchors the
    synthesis (or reuses a cached controller of the same signature) at the
    event state.  All switch events are logged on the trajectory; recorded
    states are the original states followed by the integral states.
    """
    constraints = [simplify(c) for c in constraints]
    if anchor is None:
        anchor = sys.initial_binding()
    anchor = dict(anchor)
    t0 = float(anchor[TIME])
    T = float(cfg.horizon)
    if T < t0:
        raise ValueError(f"horizon {T} precedes the start time {t0}")

    ctrl = synthesize_pipeline(
        sys, constraints, y_r, cfg.eps, cfg.poles, cfg.betas,
        anchor=anchor, max_order=cfg.max_order,
    )
    cache = cache if cache is not None else ControllerCache()
    cache.store(ctrl)
    runtimes: dict[int, _LoopRuntime] = {}

    def runtime_for(c: SynthesizedController) -> _LoopRuntime:
        rt = runtimes.get(id(c))
        if rt is None:
            rt = _LoopRuntime(sys, c, constraints, cfg.eps)
            runtimes[id(c)] = rt
        return rt

    rt = runtime_for(ctrl)
    y = np.array(ctrl.aug.base.x0, dtype=float)
    state_names = sys.states + ctrl.aug.xi_names

    times = [t0]
    states = [rt.projected_row(y)]
    obs_rows = [rt.observe(t0, y)]
    events: list[tuple[float, str, str]] = []

    def attempt_switch(t_evt: float, y_evt: np.ndarray):
        """Try to replace the active controller at the event state; None keeps it."""
        nonlocal ctrl
        x_evt, xi_evt = rt.project(y_evt)
        try:
            signature, aug = _fresh_signature(sys, constraints, cfg, t_evt, x_evt, xi_evt)
        except (CaptureError, SlackGuardError, NoNumericalRelativeDegreeError, SynthesisError) as err:
            raise SimulationError(
                f"re-synthesis failed at switch event t = {t_evt:.6g}, "
                f"x = {np.array2string(np.asarray(x_evt), precision=6)}: {err}"
            ) from err
        if signature == ctrl.nrd_signature:
            return None
        candidate = cache.lookup(signature)
        if candidate is None:
            candidate = synthesize(aug, y_r, cfg.poles, cfg.eps, max_order=cfg.max_order)
            cache.store(candidate)
        cand_rt = runtime_for(candidate)
        y_cand = cand_rt.chart_state(t_evt, x_evt, xi_evt, rt.chart, y_evt)
        if candidate.sigma > ctrl.sigma:
            # losing an input channel: adopt the conservative higher-order law
            if not cand_rt.member(t_evt, y_cand, 1.0):
                return None
        else:
            if not cand_rt.admissible(t_evt, y_cand, cfg):
                return None
        events.append(
            (t_evt, signature_label(ctrl.nrd_signature), signature_label(candidate.nrd_signature))
        )
        ctrl = candidate
        return cand_rt, y_cand

    def record(t: float, y_arr: np.ndarray):
        times.append(t)
        states.append(rt.projected_row(y_arr))
        obs_rows.append(rt.observe(t, y_arr))

    t = t0
    stepper = _Stepper(rt.rhs, t, y, cfg) if T > t0 else None
    was_member = True
    steps_outside = 0
    while t < T - 1e-12 * max(1.0, abs(T)):
        t_prev, y_prev = t, y.copy()
        try:
            t, y = stepper.step(T)
        except GuardedDomainError as err:
            t_evt, y_evt = _localize_event(
                rt.rhs, lambda tm, ym: rt.member(tm, ym, cfg.hysteresis),
                t_prev, y_prev, min(err.t, T), cfg,
            )
            switched = attempt_switch(t_evt, y_evt)
            if switched is None:
                raise SimulationError(
                    f"dynamics left the evaluable region at t = {t_evt:.9g} "
                    f"with no admissible replacement controller ({err})"
                ) from None
            rt, y = switched
            t = t_evt
            stepper = _Stepper(rt.rhs, t, y, cfg)
            was_member, steps_outside = True, 0
            record(t, y)
            if len(events) > cfg.max_events:
                raise SimulationError(f"more than {cfg.max_events} switch events")
            continue

        now_member = rt.member(t, y, cfg.hysteresis)
        if not now_member:
            switched = None
            if was_member:
                # fresh violation: localize the crossing and switch there
                t_evt, y_evt = _localize_event(
                    rt.rhs, lambda tm, ym: rt.member(tm, ym, cfg.hysteresis),
                    t_prev, y_prev, t, cfg,
                )
                switched = attempt_switch(t_evt, y_evt)
                if switched is not None:
                    rt, y = switched
                    t = t_evt
            else:
                # persistently outside (replacement refused before): retry cheaply
                steps_outside += 1
                if steps_outside % cfg.retry_steps == 0:
                    switched = attempt_switch(t, y)
                    if switched is not None:
                        rt, y = switched
            if switched is not None:
                stepper = _Stepper(rt.rhs, t, y, cfg)
                was_member, steps_outside = True, 0
                record(t, y)
                if len(events) > cfg.max_events:
                    raise SimulationError(f"more than {cfg.max_events} switch events")
                continue
            was_member = False
        else:
            was_member, steps_outside = True, 0
        record(t, y)

    obs = np.array(obs_rows)
    return Trajectory(
        state_names=state_names,
        times=np.array(times),
        states=np.array(states),
        inputs=obs[:, 0],
        outputs=obs[:, 1],
        references=obs[:, 2],
        constraints=obs[:, 3:] if constraints else None,
        events=tuple(events),
    )


def _localize_event(rhs, member, t_lo: float, y_lo: np.ndarray, t_hi: float, cfg: RunConfig):
    """Bisect the first predicate violation in (t_lo, t_hi]; returns the failing end."""

    def probe(tm: float) -> tuple[bool, np.ndarray | None]:
        try:
            ym = _propagate(rhs, t_lo, y_lo, tm, cfg)
        except IntegrationError:
            return False, None
        return member(tm, ym), ym

    lo, hi = t_lo, t_hi
    y_hi = None
    while hi - lo > cfg.event_tol:
        mid = 0.5 * (lo + hi)
        good, ym = probe(mid)
        if good:
            lo = mid
        else:
            hi, y_hi = mid, ym
    if y_hi is None:
        try:
            y_hi = _propagate(rhs, t_lo, y_lo, hi, cfg)
        except IntegrationError:
            # state only reachable up to lo: use the last good point
            hi = lo
            y_hi = _propagate(rhs, t_lo, y_lo, lo, cfg)
    return hi, y_hi


def run_classical_fbl(
    sys: InputAffineSystem,
    y_r: Expr,
    poles,
    cfg: RunConfig,
    constraints: Sequence[Expr] = (),
) -> Trajectory:
    """Baseline tracking loop on the un-augmented system, no constraint handling.

    Constraint columns are still evaluated so violations can be reported.
    Aborts when the input coefficient becomes numerically singular along the
    trajectory.
    """
    constraints = [simplify(c) for c in constraints]
    aug = AugmentedSystem(original=sys, base=sys)
    ctrl = synthesize(aug, y_r, poles, cfg.eps, max_order=cfg.max_order)
    gamma_fn = compile_exprs([ctrl.gamma_chain.lie_g_chain[-1]], (TIME,) + sys.states)
    rt = _LoopRuntime(sys, ctrl, constraints, cfg.eps)

    t0, T = sys.t0, float(cfg.horizon)
    y = np.array(sys.x0, dtype=float)
    times, states, obs_rows = [t0], [y.copy()], [rt.observe(t0, y)]
    if T > t0:
        stepper = _Stepper(rt.rhs, t0, y, cfg)
        while stepper.t < T - 1e-12 * max(1.0, abs(T)):
            t, y = stepper.step(T)
            if abs(gamma_fn(float(t), *[float(v) for v in y])[0]) < 1e-12:
                raise SimulationError(f"input coefficient singular at t = {t:.6g}")
            times.append(t)
            states.append(y.copy())
            obs_rows.append(rt.observe(t, y))
    obs = np.array(obs_rows)
    return Trajectory(
        state_names=sys.states,
        times=np.array(times),
        states=np.array(states),
        inputs=obs[:, 0],
        outputs=obs[:, 1],
        references=obs[:, 2],
        constraints=obs[:, 3:] if constraints else None,
    )


# ---------------------------------------------------------------------------
# verification operations


@dataclass(frozen=True)
class ConservationReport:
    max_drift: float
    max_recovery_mismatch: float
    ok: bool
    tol: float


def verify_conservation(traj: Trajectory, aug: AugmentedSystem, tol: float = 1e-6) -> ConservationReport:
    """Drift of phi + z^2/2 and slack-recovery mismatch along an augmented-system
    trajectory (states must include the slack chain)."""
    idx = {name: i for i, name in enumerate(traj.state_names)}
    max_drift = 0.0
    max_mismatch = 0.0
    for stage in aug.stages:
        z_col = idx[stage.slacks[0]]
        reference = None
        for t, row in zip(traj.times, traj.states):
            binding = {TIME: float(t)}
            binding.update({name: float(row[i]) for name, i in idx.items()})
            value = evaluate(stage.phi, binding) + 0.5 * row[z_col] ** 2
            if reference is None:
                reference = value
            max_drift = max(max_drift, abs(value - reference))
            try:
                recovered = {name: evaluate(rec, binding) for name, rec in stage.recovery}
            except EvalError:
                continue  # boundary contact: recovery undefined there
            for name, v in recovered.items():
                max_mismatch = max(max_mismatch, abs(v - row[idx[name]]))
    return ConservationReport(
        max_drift=max_drift,
        max_recovery_mismatch=max_mismatch,
        ok=max_drift < tol,
        tol=tol,
    )


@dataclass(frozen=True)
class ConstraintReport:
    max_values: tuple[float, ...]
    argmax_times: tuple[float, ...]
    tol: float
    ok: bool


def verify_constraints(traj: Trajectory, constraints: Sequence[Expr], tol: float = 1e-6) -> ConstraintReport:
    """Maximum of each constraint along the trajectory against the tolerance."""
    idx = {name: i for i, name in enumerate(traj.state_names)}
    maxima, arg_times = [], []
    for phi in constraints:
        best, best_t = -math.inf, traj.times[0]
        for t, row in zip(traj.times, traj.states):
            binding = {TIME: float(t)}
            binding.update({name: float(row[i]) for name, i in idx.items()})
            v = evaluate(phi, binding)
            if v > best:
                best, best_t = v, float(t)
        maxima.append(best)
        arg_times.append(best_t)
    return ConstraintReport(
        max_values=tuple(maxima),
        argmax_times=tuple(arg_times),
        tol=tol,
        ok=all(v <= tol for v in maxima),
    )


@dataclass(frozen=True)
class Theorem1Report:
    trials: int
    passed: int
    max_phi: float
    max_drift: float
    seed: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.passed == self.trials


def random_input_theorem1(
    sys: InputAffineSystem,
    phi: Expr,
    eps,
    anchor: Mapping[str, float] | None = None,
    trials: int = 50,
    seed: int = 0,
    starts: int = 10,
    input_bound: float = 5.0,
    horizon: float = 1.5,
    segments: int = 8,
    tol: float = 1e-6,
) -> Theorem1Report:
    """Constraint satisfaction of the captured system under arbitrary bounded
    piecewise-constant virtual inputs, from random strictly feasible starts.

    For each trial the constraint must stay at or below ``tol`` at every
    sample and phi + z^2/2 must be conserved to ``tol``.
    """
    if anchor is None:
        anchor = sys.initial_binding()
    rng = random.Random(seed)
    cfg = RunConfig(horizon=horizon, rel_tol=1e-10, abs_tol=1e-12, max_step=0.05)

    start_points = []
    guard_attempts = 0
    while len(start_points) < starts and guard_attempts < 200 * starts:
        guard_attempts += 1
        candidate = dict(anchor)
        for s in sys.states:
            candidate[s] = anchor[s] + rng.uniform(-1.5, 1.5)
        if evaluate(phi, candidate) < -0.2:
            start_points.append(candidate)
    if len(start_points) < starts:
        raise SimulationError("could not sample enough strictly feasible start points")

    passed = 0
    max_phi_seen = -math.inf
    max_drift_seen = 0.0
    per_start = max(1, trials // starts)
    done = 0
    for start in start_points:
        for _ in range(per_start):
            if done >= trials:
                break
            done += 1
            aug = capture(sys, phi, eps, start)
            base = aug.base
            levels = [rng.uniform(-input_bound, input_bound) for _ in range(segments)]
            t0 = base.t0
            t_edges = [t0 + horizon * i / segments for i in range(segments + 1)]
            drift_fn = compile_exprs(list(base.f), (TIME,) + base.states)
            gcol_fn = compile_exprs([gi[0] for gi in base.g], (TIME,) + base.states)

            times_all, states_all = [t0], [np.array(base.x0)]
            okay = True
            y0 = np.array(base.x0)
            for seg in range(segments):
                w = levels[seg]

                def rhs(t, y, w=w):
                    fv = drift_fn(float(t), *[float(v) for v in y])
                    gv = gcol_fn(float(t), *[float(v) for v in y])
                    return tuple(a + b * w for a, b in zip(fv, gv))

                try:
                    piece = integrate(rhs, y0, (t_edges[seg], t_edges[seg + 1]), cfg)
                except IntegrationError:
                    okay = False
                    break
                times_all.extend(piece.times[1:])
                states_all.extend(piece.states[1:])
                y0 = piece.states[-1]
            if not okay:
                continue

            traj = Trajectory(
                state_names=base.states,
                times=np.array(times_all),
                states=np.array(states_all),
            )
            c_rep = verify_constraints(traj, [phi], tol)
            k_rep = verify_conservation(traj, aug, tol)
            max_phi_seen = max(max_phi_seen, c_rep.max_values[0])
            max_drift_seen = max(max_drift_seen, k_rep.max_drift)
            if c_rep.ok and k_rep.ok:
                passed += 1
    return Theorem1Report(
        trials=done,
        passed=passed,
        max_phi=max_phi_seen,
        max_drift=max_drift_seen,
        seed=seed,
        tol=tol,
    )


# ---------------------------------------------------------------------------
# numerical-relative-degree landscape


@dataclass(frozen=True)
class LandscapeResult:
    axes: tuple[tuple[str, np.ndarray], ...]
    orders: np.ndarray  # integer order, 0 = no order up to max, -1 = boundary
    BOUNDARY: int = -1
    NONE: int = 0


def nrd_landscape(
    sysI: AugmentedSystem,
    axes: Sequence[tuple[str, float, float, int]],
    eps,
    fixed: Mapping[str, float] | None = None,
    max_order: int = 10,
) -> LandscapeResult:
    """Numerical relative degree of the output over a coordinate grid.

    Grid axes range over t and/or original states; remaining original states
    and integral states are pinned by ``fixed``.  Slack coordinates are
    recovered from the constraint; points where recovery is undefined (on or
    outside the boundary, or below the slack guard) are marked as boundary.
    """
    from .system import EpsSchedule

    base = sysI.base
    fixed = dict(fixed or {})
    schedule = EpsSchedule(eps)

    h = base.h[0]
    chain_exprs = []
    lf = simplify(h)
    for _ in range(max_order):
        chain_exprs.append(lie_g_lie_f(base, lf, 0)[0])
        lf = lie_f(base, lf, 1)
    chain_fn = compile_exprs(chain_exprs, (TIME,) + base.states)

    grids = [(name, np.linspace(lo, hi, count)) for name, lo, hi, count in axes]
    shape = tuple(len(g) for _, g in grids)
    orders = np.zeros(shape, dtype=int)

    for flat_index in range(int(np.prod(shape))):
        multi = np.unravel_index(flat_index, shape)
        binding = dict(fixed)
        for (name, grid), pos in zip(grids, multi):
            binding[name] = float(grid[pos])
        try:
            slack = sysI.slack_values(binding)
        except (EvalError, SlackGuardError):
            orders[multi] = LandscapeResult.BOUNDARY
            continue
        binding.update(slack)
        try:
            values = chain_fn(binding[TIME], *[binding[s] for s in base.states])
        except EvalError:
            orders[multi] = LandscapeResult.BOUNDARY
            continue
        order = LandscapeResult.NONE
        for j, v in enumerate(values):
            if abs(v) > schedule[j]:
                order = j + 1
                break
        orders[multi] = order
    return LandscapeResult(axes=tuple((n, g) for n, g in grids), orders=orders)


# ---------------------------------------------------------------------------
# CSV emission


def trajectory_csv(traj: Trajectory, constraint_count: int | None = None) -> str:
    """Render a trajectory in the interchange format:
    t,<states...>,u,y,y_ref,phi...,event (one row per accepted step)."""
    r = constraint_count
    if r is None:
        r = traj.constraints.shape[1] if traj.constraints is not None else 0
    header = ["t", *traj.state_names]
    if traj.inputs is not None:
        header += ["u", "y", "y_ref"]
    header += [f"phi{k+1}" for k in range(r)]
    header.append("event")

    event_by_time = {}
    for when, _, new in traj.events:
        event_by_time[float(when)] = new

    lines = [",".join(header)]
    for i, t in enumerate(traj.times):
        row = [f"{t:.12g}"] + [f"{v:.12g}" for v in traj.states[i]]
        if traj.inputs is not None:
            row += [f"{traj.inputs[i]:.12g}", f"{traj.outputs[i]:.12g}", f"{traj.references[i]:.12g}"]
        if r:
            row += [f"{traj.constraints[i][k]:.12g}" for k in range(r)]
        row.append(event_by_time.get(float(t), ""))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
