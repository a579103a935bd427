"""Event-driven integration of hybrid executions.

Within a mode the local flow is advanced by an adaptive Dormand-Prince 5(4)
pair (scipy's ``RK45`` stepper, driven step by step). Guard crossings are
detected as a sign change of the guard level across an accepted step and
localised with Brent's method on the step's dense output.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45
from scipy.optimize import brentq

from .core import (
    GUARD_TOL,
    HybridError,
    HybridState,
    HybridSystemDef,
    gradient,
)


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-12
    abs_tol: float = 1e-14
    guard_time_tol: float = 1e-12
    max_jumps_per_unit_time: int = 1000
    max_time: float = 100.0
    guard_tol: float = GUARD_TOL
    box_margin: float = 1e-2
    graze_tol: float = 1e-10

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "guard_time_tol", "max_jumps_per_unit_time",
                     "max_time", "guard_tol", "graze_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.box_margin < 0:
            raise ValueError("box_margin must be non-negative")


DEFAULT_CONFIG = IntegratorConfig()


class FlowError(HybridError):
    trajectory = None


class GuardCrossed(FlowError):
    def __init__(self, t):
        self.t = t
        super().__init__(f"guard crossed at t={t!r} during in-mode integration")


class Escaped(FlowError):
    def __init__(self, t, state):
        self.t = t
        self.state = state
        super().__init__(f"left the domain box of mode {state.mode} at t={t!r} (x={state.x})")


class Timeout(FlowError):
    pass


class ZenoSuspected(FlowError):
    pass


class Grazing(FlowError):
    pass


@dataclass
class Jump:
    t: float
    pre: HybridState
    post: HybridState


@dataclass
class Trajectory:
    samples: list = field(default_factory=list)  # (t, HybridState, is_post_jump)
    jumps: list = field(default_factory=list)
    escape_flag: bool = False

    @property
    def times(self):
        return np.array([s[0] for s in self.samples])

    @property
    def final(self):
        return self.samples[-1][1]

    def to_csv(self, dest=None):
        """Write ``t,mode,x1..xn,jump`` rows (17 significant digits).

        Returns the CSV text; also writes it to ``dest`` (path or file) if given.
        """
        n = len(self.samples[0][1].x) if self.samples else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mode", *[f"x{i + 1}" for i in range(n)], "jump"])
        for t, s, post in self.samples:
            w.writerow([fmt(t), s.mode, *[fmt(v) for v in s.x], int(post)])
        text = buf.getvalue()
        if dest is not None:
            if hasattr(dest, "write"):
                dest.write(text)
            else:
                with open(dest, "w", newline="") as fh:
                    fh.write(text)
        return text


def fmt(v):
    return format(float(v), ".17g")


# --- in-mode machinery --------------------------------------------------------------


def _solver(mode, x0, t0, t_bound, cfg):
    return RK45(lambda t, y: mode.field(y), t0, np.asarray(x0, dtype=float), t_bound,
                rtol=cfg.rel_tol, atol=cfg.abs_tol)


def _locate(level, dense, ta, tb, cfg):
    fa = level(dense(ta))
    if fa == 0.0:
        return ta
    return brentq(lambda t: level(dense(t)), ta, tb, xtol=cfg.guard_time_tol,
                  rtol=4 * np.finfo(float).eps)


def integrate_mode(sys: HybridSystemDef, s: HybridState, t: float,
                   cfg: IntegratorConfig = DEFAULT_CONFIG, strict: bool = True) -> HybridState:
    """Local flow of mode ``s.mode`` for signed time ``t``.

    With ``strict`` the guard may only be reached at the final time; otherwise
    the mode's vector field is integrated past it (smooth extension).
    """
    if t == 0:
        return HybridState(s.mode, s.x)
    mode = sys.modes[s.mode]
    solver = _solver(mode, s.x, 0.0, t, cfg)
    while solver.status == "running":
        solver.step()
        if solver.status == "failed":
            raise FlowError(f"integrator failed: {solver.message}")
        y = solver.y
        if strict and t > 0 and mode.guard(y) > cfg.guard_tol:
            tg = _locate(mode.guard, solver.dense_output(), solver.t_old, solver.t, cfg)
            raise GuardCrossed(tg)
        if not mode.in_box(y, cfg.box_margin):
            raise Escaped(solver.t, HybridState(s.mode, y))
    return HybridState(s.mode, solver.y)


def flow_to_level(mode, x0, level, direction: int, horizon: float, cfg, mode_index=0):
    """Integrate until ``level`` changes sign; returns ``(t, x)`` or None.

    ``direction`` is +1 (forward) or -1 (backward); the returned time carries
    the sign of ``direction``.
    """
    x0 = np.asarray(x0, dtype=float)
    l0 = level(x0)
    if l0 == 0.0:
        return 0.0, x0
    sign0 = math.copysign(1.0, l0)
    solver = _solver(mode, x0, 0.0, direction * horizon, cfg)
    while solver.status == "running":
        solver.step()
        if solver.status == "failed":
            raise FlowError(f"integrator failed: {solver.message}")
        y = solver.y
        ly = level(y)
        if ly * sign0 <= 0:
            dense = solver.dense_output()
            ta, tb = sorted((solver.t_old, solver.t))
            tr = _locate(level, dense, ta, tb, cfg)
            return tr, dense(tr)
        if not mode.in_box(y, cfg.box_margin):
            raise Escaped(solver.t, HybridState(mode_index, y))
    return None


def _impact(sys, s, cfg):
    mode = sys.modes[s.mode]
    g0 = mode.guard(s.x)
    if g0 <= 0:
        hit = flow_to_level(mode, s.x, mode.guard, +1, cfg.max_time, cfg, s.mode)
        if hit is None:
            raise Timeout(f"guard of mode {s.mode} not reached within max_time={cfg.max_time}")
    else:
        # beyond the guard: smooth extension, negative time-to-impact
        hit = flow_to_level(mode, s.x, mode.guard, -1, mode.collar_depth, cfg, s.mode)
        if hit is None:
            raise Escaped(0.0, s)
    return hit


def time_to_impact(sys: HybridSystemDef, s: HybridState,
                   cfg: IntegratorConfig = DEFAULT_CONFIG) -> float:
    """Time for the in-mode flow from ``s`` to reach the guard."""
    return float(_impact(sys, s, cfg)[0])


def project_to_guard(sys: HybridSystemDef, s: HybridState,
                     cfg: IntegratorConfig = DEFAULT_CONFIG) -> HybridState:
    """Guard point reached by the in-mode flow from ``s``."""
    return HybridState(s.mode, _impact(sys, s, cfg)[1])


# --- hybrid execution ------------------------------------------------------------------


@dataclass
class Execution:
    t: float
    state: HybridState
    jumps: list
    hits: list  # (t, HybridState) section crossings
    samples: list


class _SectionWatch:
    def __init__(self, section, min_gap):
        self.section = section
        self.min_gap = min_gap
        self.last = -np.inf

    def active(self, mode):
        return self.section is not None and self.section.mode == mode

    def on_section(self, x, fx):
        sec = self.section
        side = sec.side(x)
        tol = 1e-9 * (1.0 + float(np.max(np.abs(x))))
        if abs(side) > tol:
            return False
        return float(gradient(sec.side, x) @ fx) > 0


def _execute(sys: HybridSystemDef, s: HybridState, cfg: IntegratorConfig, t_end=None,
             section=None, on_hit=None, include_start=False, sample_times=None):
    """Run the hybrid execution from ``s``.

    Stops at ``t_end`` or when ``on_hit`` returns True. Section hits are
    upstream-to-downstream crossings of ``section`` (also reset landings on it).
    """
    t = 0.0
    state = HybridState(s.mode, s.x)
    jumps, hits, samples = [], [], []
    horizon = cfg.max_time if t_end is None else t_end
    watch = _SectionWatch(section, min_gap=max(1e3 * cfg.guard_time_tol, 1e-10))
    sample_times = [] if sample_times is None else list(sample_times)
    si = 0

    def emit_samples(upto, dense, inclusive):
        nonlocal si
        while si < len(sample_times) and (
                sample_times[si] < upto or (inclusive and sample_times[si] <= upto)):
            ts = sample_times[si]
            samples.append((ts, HybridState(state.mode, dense(ts)), False))
            si += 1

    def record_hit(th, x, mode):
        if th - watch.last < watch.min_gap:
            return False
        watch.last = th
        hit = HybridState(mode, x)
        hits.append((th, hit))
        return bool(on_hit is not None and on_hit(th, hit))

    def landing(tj):
        if watch.active(state.mode) and watch.on_section(
                state.x, sys.modes[state.mode].field(state.x)):
            return record_hit(tj, state.x, state.mode)
        return False

    def do_jump(tj, pre, post):
        nonlocal state, si
        jumps.append(Jump(tj, pre, post))
        state = post
        if len(jumps) > cfg.max_jumps_per_unit_time * tj + 1:
            raise ZenoSuspected(f"{len(jumps)} jumps by t={tj!r}")
        if sample_times:
            while samples and samples[-1][0] >= tj - cfg.guard_time_tol:
                samples.pop()
            while si < len(sample_times) and sample_times[si] <= tj + cfg.guard_time_tol:
                si += 1
            samples.append((tj, state, True))
        return landing(tj)

    def reset_at(tj, x_pre):
        m = state.mode
        post = HybridState(sys.next_mode(m), sys.modes[m].reset_map(x_pre))
        return do_jump(tj, HybridState(m, x_pre), post)

    try:
        if sample_times and sample_times[0] == 0.0:
            samples.append((0.0, state, False))
            si = 1
        if include_start:
            if landing(0.0):
                return Execution(t, state, jumps, hits, samples)
        elif watch.active(state.mode) and watch.on_section(
                state.x, sys.modes[state.mode].field(state.x)):
            watch.last = 0.0  # a start on the section is not a return
        if t_end is not None and t_end <= 0:
            return Execution(t, state, jumps, hits, samples)

        # on or beyond the guard at t = 0: jump immediately
        g0 = sys.modes[state.mode].guard(state.x)
        if g0 > 0:
            from .gluing import gluing_map  # gluing builds on this module

            pre = project_to_guard(sys, state, cfg)
            if do_jump(0.0, pre, gluing_map(sys, state, cfg)):
                return Execution(t, state, jumps, hits, samples)
        elif g0 == 0:
            if reset_at(0.0, state.x):
                return Execution(t, state, jumps, hits, samples)

        while True:
            mode = sys.modes[state.mode]
            solver = _solver(mode, state.x, t, horizon, cfg)
            g_prev = mode.guard(state.x)
            side_prev = section.side(state.x) if watch.active(state.mode) else None
            jumped = False
            while solver.status == "running":
                solver.step()
                if solver.status == "failed":
                    raise FlowError(f"integrator failed: {solver.message}")
                t0, t1, y1 = solver.t_old, solver.t, solver.y
                g1 = mode.guard(y1)
                dense = None
                tg = None
                if g1 >= 0 and g_prev < 0:
                    dense = solver.dense_output()
                    tg = _locate(mode.guard, dense, t0, t1, cfg)
                t_stop = t1 if tg is None else tg
                if side_prev is not None:
                    dense = dense or solver.dense_output()
                    end_side = section.side(y1) if tg is None else section.side(dense(tg))
                    if side_prev < 0 <= end_side:
                        th = _locate(section.side, dense, t0, t_stop, cfg)
                        emit_samples(th, dense, inclusive=True)
                        if record_hit(th, dense(th), state.mode):
                            return Execution(th, HybridState(state.mode, dense(th)),
                                             jumps, hits, samples)
                    side_prev = section.side(y1)
                if sample_times:
                    dense = dense or solver.dense_output()
                    emit_samples(t_stop, dense, inclusive=tg is None)
                if tg is not None:
                    x_pre = dense(tg)
                    rate = float(gradient(mode.guard, x_pre) @ mode.field(x_pre))
                    if rate <= cfg.graze_tol:
                        raise Grazing(f"tangential guard contact at t={tg!r} (dg/dt={rate!r})")
                    t = tg
                    if reset_at(tg, x_pre):
                        return Execution(t, state, jumps, hits, samples)
                    jumped = True
                    break
                g_prev = g1
                if not mode.in_box(y1, cfg.box_margin):
                    raise Escaped(t1, HybridState(state.mode, y1))
            if jumped:
                if t_end is not None and t >= t_end - cfg.guard_time_tol:
                    return Execution(t, state, jumps, hits, samples)
                continue
            t = solver.t
            state = HybridState(state.mode, solver.y)
            if t_end is None:
                raise Timeout(f"no stopping event within max_time={cfg.max_time}")
            # right-continuity: guard contact within time tolerance of t_end jumps now
            g_end = mode.guard(state.x)
            rate = float(gradient(mode.guard, state.x) @ mode.field(state.x))
            if rate > cfg.graze_tol and -g_end <= 10 * cfg.guard_time_tol * rate:
                reset_at(t, state.x)
            return Execution(t, state, jumps, hits, samples)
    except FlowError as exc:
        exc.trajectory = Trajectory(samples, jumps, escape_flag=True)
        raise


def hybrid_flow(sys: HybridSystemDef, s: HybridState, t: float,
                cfg: IntegratorConfig = DEFAULT_CONFIG) -> HybridState:
    """Right-continuous hybrid flow ``phi_t(s)`` for ``t >= 0``."""
    if t < 0:
        raise ValueError("hybrid flow is defined for t >= 0 only")
    if t == 0:
        return HybridState(s.mode, s.x)
    return _execute(sys, s, cfg, t_end=t).state


def simulate(sys: HybridSystemDef, s: HybridState, t_end: float, sample_dt: float,
             cfg: IntegratorConfig = DEFAULT_CONFIG) -> Trajectory:
    """Sampled execution on ``[0, t_end]`` with exact jump records.

    On Zeno suspicion or escape the raised error carries the partial
    trajectory (``exc.trajectory``, with ``escape_flag`` set).
    """
    if t_end < 0 or sample_dt <= 0:
        raise ValueError("need t_end >= 0 and sample_dt > 0")
    k = int(math.floor(t_end / sample_dt + 1e-9))
    times = [i * sample_dt for i in range(k + 1)]
    if times[-1] < t_end - 1e-12 * max(1.0, t_end):
        times.append(t_end)
    if t_end == 0:
        return Trajectory([(0.0, HybridState(s.mode, s.x), False)], [])
    run = _execute(sys, s, cfg, t_end=t_end, sample_times=times)
    samples = run.samples
    # terminal sample is the hybrid flow at t_end
    if samples[-1][0] < t_end - cfg.guard_time_tol:
        samples.append((t_end, run.state, False))
    elif not samples[-1][2]:
        samples[-1] = (samples[-1][0], run.state, False)
    return Trajectory(samples, run.jumps)
