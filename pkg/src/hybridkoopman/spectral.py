"""Poincare maps, Floquet analysis and the principal Koopman eigenfunctions.

The phase eigenfunction comes from asymptotic section-return times,
``theta(x) = omega * (K tau - t_K(x))``, and the amplitude eigenfunctions
from discrete Laplace averages ``exp(-nu t_K) w . (x_K - x*)`` over the
section hits ``x_K`` of the execution from ``x``. Both converge like
``|rho_2|^K``, so a handful of returns suffices.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import block_diag, expm
from scipy.sparse.linalg import spsolve

from . import exprlang
from .core import HybridError, HybridState, HybridSystemDef, gradient, sample_guard, tangent_basis
from .flow import (
    DEFAULT_CONFIG,
    Escaped,
    FlowError,
    IntegratorConfig,
    Timeout,
    _execute,
    fmt,
    integrate_mode,
)
from .observables import ObservableFn, fmt_complex


class SpectralError(HybridError):
    pass


class NoReturn(SpectralError):
    pass


class NoLimitCycle(SpectralError):
    pass


class NotStable(SpectralError):
    def __init__(self, report):
        self.report = report
        mags = ", ".join(f"{abs(r):.6g}" for r in report.multipliers)
        super().__init__(f"cycle is not asymptotically stable: |rho| = {mags}")


class NotConverged(SpectralError):
    pass


class MissingEigenfunction(SpectralError):
    pass


# --- sections --------------------------------------------------------------------------


class PoincareSection:
    """Level set ``{s(x) = 0}`` in one mode, oriented along the flow.

    ``side(x)`` is ``s`` with its sign chosen so it increases along the vector
    field at the anchor. Points on the section are described by coordinates
    along an orthonormal tangent basis at the anchor.
    """

    def __init__(self, sys: HybridSystemDef, mode: int, level, anchor, label: str | None = None):
        self.sys = sys
        self.mode = mode
        if isinstance(level, str):
            label = label or level
            level = exprlang.parse(level, sys.dim)
        self.label = label or exprlang.to_string(level)
        self._level = exprlang.compile_expr(level) if not callable(level) else level
        self.normal = np.ones(sys.dim)
        self.sign = 1.0
        anchor = self.project(np.asarray(anchor, dtype=float))
        grad = gradient(self._level, anchor)
        rate = float(grad @ sys.modes[mode].field(anchor))
        if abs(rate) <= 1e-10 * (1.0 + np.linalg.norm(grad)):
            raise SpectralError(f"section {self.label!r} is tangent to the flow at {anchor}")
        self.sign = math.copysign(1.0, rate)
        self.anchor = anchor
        self.normal = grad / np.linalg.norm(grad)
        self.tangents = tangent_basis(self.normal)

    def side(self, x) -> float:
        return self.sign * self._level(x)

    def project(self, p):
        """Newton along the level gradient onto the section."""
        p = np.array(p, dtype=float)
        for _ in range(50):
            val = self._level(p)
            grad = gradient(self._level, p)
            step = val / float(grad @ grad)
            p = p - step * grad
            if abs(step) * np.linalg.norm(grad) <= 1e-15 * (1.0 + np.max(np.abs(p))):
                break
        return p

    def coords(self, x):
        return self.tangents.T @ (np.asarray(x, dtype=float) - self.anchor)

    def point(self, u):
        return self.project(self.anchor + self.tangents @ np.atleast_1d(u))


def default_section(sys: HybridSystemDef, cfg: IntegratorConfig = DEFAULT_CONFIG):
    """Guard level set of the mode entered first, halfway along a nominal flight.

    A reset image point is flowed for half the period hint (or half the time
    to the next guard) and the guard level there defines the section.
    """
    from .flow import time_to_impact

    mode = sys.next_mode(0)
    z = sample_guard(sys, 0, 1, seed=0)[0]
    w = HybridState(mode, sys.modes[0].reset_map(z))
    flight = time_to_impact(sys, w, cfg)
    if sys.period_hint:
        flight = min(flight, sys.period_hint)
    x = integrate_mode(sys, w, 0.5 * flight, cfg).x
    g = sys.modes[mode].guard
    offset = g(x)
    return PoincareSection(sys, mode, lambda y: g(y) - offset, x,
                           label=f"guard level {offset!r} in mode {mode}")


# --- Poincare map and limit cycle ---------------------------------------------------------


def first_return(sys: HybridSystemDef, sec: PoincareSection, p: HybridState,
                 cfg: IntegratorConfig = DEFAULT_CONFIG):
    """``(t, state)`` of the first section crossing after time 0."""
    try:
        run = _execute(sys, p, cfg, section=sec, on_hit=lambda t, s: True)
    except (Timeout, Escaped) as exc:
        raise NoReturn(f"no return to section {sec.label!r} from {p.x}: {exc}") from exc
    return run.hits[-1]


def poincare_map(sys: HybridSystemDef, sec: PoincareSection, p,
                 cfg: IntegratorConfig = DEFAULT_CONFIG) -> HybridState:
    """First return of the hybrid flow from section point ``p``."""
    if not isinstance(p, HybridState):
        p = HybridState(sec.mode, p)
    return first_return(sys, sec, p, cfg)[1]


def _return_in_coords(sys, sec, cfg):
    def ret(u):
        return sec.coords(poincare_map(sys, sec, HybridState(sec.mode, sec.point(u)), cfg).x)
    return ret


def _dp_matrix(ret, u):
    m = len(u)
    cols = [np.atleast_1d(exprlang.directional_derivative_fn(ret, u, np.eye(m)[i]))
            for i in range(m)]
    return np.column_stack(cols)


@dataclass
class LimitCycle:
    x_star: HybridState
    tau: float
    residual: float
    newton_steps: int
    fixed_point_steps: int


def find_limit_cycle(sys: HybridSystemDef, sec: PoincareSection, guess,
                     cfg: IntegratorConfig = DEFAULT_CONFIG, tol: float = 1e-12,
                     max_iter: int = 60) -> LimitCycle:
    """Fixed point of the Poincare map by damped Newton, falling back to iteration."""
    ret = _return_in_coords(sys, sec, cfg)
    guess = guess.x if isinstance(guess, HybridState) else guess
    u = sec.coords(sec.project(np.asarray(guess, dtype=float)))
    newton = plain = 0
    try:
        for _ in range(max_iter):
            x = sec.point(u)
            t_ret, hit = first_return(sys, sec, HybridState(sec.mode, x), cfg)
            res = float(np.linalg.norm(hit.x - x))
            if res <= tol * (1.0 + np.linalg.norm(x)):
                return LimitCycle(HybridState(sec.mode, x), t_ret, res, newton, plain)
            g0 = sec.coords(hit.x) - u
            jac = _dp_matrix(ret, u) - np.eye(len(u))
            try:
                step = np.linalg.solve(jac, -g0)
            except np.linalg.LinAlgError:
                step = None
            accepted = False
            lam = 1.0
            while step is not None and lam >= 1.0 / 64:
                trial = u + lam * step
                try:
                    g1 = ret(trial) - trial
                except NoReturn:
                    g1 = None
                if g1 is not None and np.linalg.norm(g1) < np.linalg.norm(g0):
                    u, accepted = trial, True
                    newton += 1
                    break
                lam *= 0.5
            if not accepted:
                u = sec.coords(hit.x)
                plain += 1
    except NoReturn as exc:
        raise NoLimitCycle(f"Poincare iteration lost the section: {exc}") from exc
    raise NoLimitCycle(f"no fixed point within {max_iter} iterations (residual {res:.3e})")


# --- Floquet analysis ---------------------------------------------------------------------


@dataclass
class SpectralReport:
    section: PoincareSection
    x_star: HybridState
    tau: float
    omega: float
    multipliers: np.ndarray
    exponents: np.ndarray
    left_vectors: np.ndarray  # ambient covectors, one column per multiplier
    dp: np.ndarray
    r: int
    nonresonant: bool
    spread: bool
    degenerate: bool

    @property
    def stable(self) -> bool:
        return bool(np.all(np.abs(self.multipliers) < 1.0))

    @property
    def rho(self):
        return self.multipliers[0]

    @property
    def nu(self):
        return self.exponents[0]

    def to_text(self) -> str:
        lines = [
            f"section = {self.section.label}",
            f"mode = {self.x_star.mode}",
            "x_star = " + " ".join(fmt(v) for v in self.x_star.x),
            f"tau = {fmt(self.tau)}",
            f"omega = {fmt(self.omega)}",
        ]
        for i, (rho, nu) in enumerate(zip(self.multipliers, self.exponents), start=2):
            lines.append(f"rho_{i} = {fmt_complex(rho)}")
            lines.append(f"nu_{i} = {fmt_complex(nu)}")
            lines.append(f"w_{i} = " + " ".join(fmt_complex(v) for v in self.left_vectors[:, i - 2]))
        lines += [
            f"r = {self.r}",
            f"nonresonant = {str(self.nonresonant).lower()}",
            f"spectral_spread = {str(self.spread).lower()}",
            f"degenerate = {str(self.degenerate).lower()}",
            f"stable = {str(self.stable).lower()}",
        ]
        return "\n".join(lines) + "\n"


def _real_if_close(z):
    z = complex(z)
    return z.real if z.imag == 0 else z


def _normalize_covector(w):
    w = np.asarray(w, dtype=complex)
    w = w / np.linalg.norm(w)
    lead = w[np.flatnonzero(np.abs(w) > 1e-12 * np.max(np.abs(w)))[0]]
    w = w * (abs(lead) / lead)
    return w.real if np.all(w.imag == 0) else w


def floquet(sys: HybridSystemDef, sec: PoincareSection, x_star, tau: float,
            cfg: IntegratorConfig = DEFAULT_CONFIG, r: int = 2,
            margin: float = 1e-6) -> SpectralReport:
    """Multipliers and exponents of the cycle through ``x_star``.

    Raises :class:`NotStable` when some multiplier has modulus at least one.
    """
    x_star = x_star if isinstance(x_star, HybridState) else HybridState(sec.mode, x_star)
    u = sec.coords(x_star.x)
    dp = _dp_matrix(_return_in_coords(sys, sec, cfg), u)
    vals, left = np.linalg.eig(dp.T)
    order = sorted(range(len(vals)), key=lambda i: (-abs(vals[i]), -vals[i].imag))
    vals = vals[order]
    left = left[:, order]
    mults = np.array([_real_if_close(np.real_if_close(v, tol=1)) for v in vals],
                     dtype=complex if np.iscomplexobj(vals) and np.any(vals.imag) else float)
    exps = np.array([np.log(complex(v)) / tau for v in mults])
    exps = exps.real if np.all(exps.imag == 0) else exps
    cov = np.column_stack([_normalize_covector(sec.tangents @ left[:, i])
                           for i in range(len(vals))])

    nonres = True
    for i, nu_i in enumerate(exps):
        for m in itertools.product(range(r + 1), repeat=len(exps)):
            if 2 <= sum(m) <= r and abs(nu_i - np.dot(m, exps)) <= margin:
                nonres = False
    mags = np.abs(mults)
    spread = bool(mags[-1] > mags[0] ** r)
    degenerate = any(
        abs(mags[i] - mags[j]) <= margin * max(mags[i], 1e-300)
        and abs(mults[i] - np.conj(mults[j])) > margin
        for i in range(len(mults)) for j in range(i + 1, len(mults)))
    report = SpectralReport(sec, x_star, float(tau), 2 * math.pi / tau, mults, exps, cov, dp, r,
                            nonres, spread, degenerate)
    if not report.stable:
        raise NotStable(report)
    return report


def analyse(sys: HybridSystemDef, sec: PoincareSection, guess,
            cfg: IntegratorConfig = DEFAULT_CONFIG, r: int = 2) -> SpectralReport:
    cycle = find_limit_cycle(sys, sec, guess, cfg)
    return floquet(sys, sec, cycle.x_star, cycle.tau, cfg, r)


# --- eigenfunctions ----------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid of states in one mode."""

    axes: tuple
    mode: int = 0

    @classmethod
    def parse(cls, spec: str, mode: int = 0):
        """``"nx,ny:lo1,hi1,lo2,hi2"`` (any dimension)."""
        try:
            counts, box = spec.split(":")
            ns = [int(c) for c in counts.split(",")]
            bounds = [float(b) for b in box.split(",")]
        except ValueError as exc:
            raise ValueError(f"bad grid spec {spec!r}") from exc
        if len(bounds) != 2 * len(ns) or any(n < 1 for n in ns):
            raise ValueError(f"bad grid spec {spec!r}")
        axes = tuple(np.linspace(bounds[2 * i], bounds[2 * i + 1], n) for i, n in enumerate(ns))
        return cls(axes, mode)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    def states(self):
        return [HybridState(self.mode, np.array(p)) for p in itertools.product(*self.axes)]


@dataclass
class EigenfunctionGrid:
    """Eigenfunction values on a grid plus a pointwise evaluator.

    Calling the object evaluates the eigenfunction at any state from scratch;
    :meth:`interpolate` uses the tabulated values instead.
    """

    eigenvalue: complex
    grid: Grid
    values: np.ndarray
    normalization: dict
    evaluator: object = field(repr=False, default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if not np.all(np.isfinite(self.values)):
            raise SpectralError("eigenfunction grid holds non-finite values")
        if not np.any(self.values):
            raise SpectralError("an eigenfunction must not vanish identically")

    def __call__(self, s: HybridState) -> complex:
        return self.evaluator(s)

    def table(self):
        return self.values.reshape(self.grid.shape)

    def observable(self, sys: HybridSystemDef) -> ObservableFn:
        """Cubic interpolant of the table, as a tabulated observable."""
        if sys.num_modes != 1:
            raise ValueError("tabulated observables need one grid per mode")
        return ObservableFn.from_grid(sys, [self.grid.axes], [self.table()])

    def interpolate(self, s: HybridState) -> complex:
        if not hasattr(self, "_interp"):
            kw = dict(method="cubic", bounds_error=False, fill_value=None, solver=spsolve)
            tab = self.table()
            self._interp = (RegularGridInterpolator(self.grid.axes, tab.real, **kw),
                            RegularGridInterpolator(self.grid.axes, tab.imag, **kw))
        x = np.asarray(s.x, dtype=float)[None, :]
        return complex(self._interp[0](x)[0], self._interp[1](x)[0])

    def to_csv(self) -> str:
        n = len(self.grid.axes)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", *(f"x{i + 1}" for i in range(n)), "re", "im"])
        for s, v in zip(self.grid.states(), self.values):
            w.writerow([s.mode, *(fmt(c) for c in s.x), fmt(v.real), fmt(v.imag)])
        return buf.getvalue()


class Asymptotics:
    """Shared section-return run giving phase and amplitude estimates at a state."""

    def __init__(self, sys: HybridSystemDef, report: SpectralReport,
                 cfg: IntegratorConfig = DEFAULT_CONFIG, index: int = 0,
                 phase_tol: float = 1e-10, amp_tol: float = 1e-9, max_returns: int = 80):
        self.sys = sys
        self.report = report
        self.cfg = cfg
        self.index = index
        self.phase_tol = phase_tol
        self.amp_tol = amp_tol
        self._memo = {}
        self.max_returns = max_returns

    def _estimates(self, hits):
        rep = self.report
        k = len(hits)
        t_k, s_k = hits[-1]
        theta = rep.omega * (k * rep.tau - t_k)
        w = rep.left_vectors[:, self.index]
        nu = rep.exponents[self.index]
        amp = np.exp(-nu * t_k) * (w @ (s_k.x - rep.x_star.x))
        return theta, complex(amp)

    def evaluate(self, s: HybridState):
        """``(theta, amplitude)`` at ``s``; theta is not wrapped."""
        key = (s.mode, np.asarray(s.x, dtype=float).tobytes())
        if key not in self._memo:
            self._memo[key] = self._run(s)
        return self._memo[key]

    def _run(self, s):
        est = []

        def on_hit(t, hit):
            est.append(self._estimates(hits_so_far + [(t, hit)]))
            hits_so_far.append((t, hit))
            if len(est) < 2:
                return False
            (th0, a0), (th1, a1) = est[-2], est[-1]
            return (abs(th1 - th0) <= self.phase_tol
                    and abs(a1 - a0) <= self.amp_tol * (1.0 + abs(a1)))

        hits_so_far = []
        tau = self.report.tau
        cfg = self.cfg
        horizon = (self.max_returns + 2) * tau
        if cfg.max_time < horizon:
            cfg = IntegratorConfig(**{**cfg.__dict__, "max_time": horizon})
        try:
            _execute(self.sys, s, cfg, section=self.report.section, on_hit=on_hit)
        except Timeout as exc:
            raise NotConverged(f"asymptotic phase/amplitude at {s.x} did not settle") from exc
        return est[-1]

    def phase(self, s):
        return self.evaluate(s)[0]

    def amplitude(self, s):
        return self.evaluate(s)[1]


def _tabulate(func, states, threads: int = 1):
    if threads <= 1:
        return [func(s) for s in states]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, states))


def _wrap(theta):
    return (theta + math.pi) % (2 * math.pi) - math.pi


def phase_eigenfunction(sys: HybridSystemDef, report: SpectralReport, grid: Grid,
                        cfg: IntegratorConfig = DEFAULT_CONFIG, threads: int = 1,
                        asym: Asymptotics | None = None) -> EigenfunctionGrid:
    """Unimodular eigenfunction ``exp(i theta)`` from asymptotic phase, ``theta(x*) = 0``.

    The eigenvalue is whichever of ``+i omega``, ``-i omega`` fits the
    eigen-relation better at a few grid states.
    """
    asym = asym or Asymptotics(sys, report, cfg)

    def func(s):
        return complex(np.exp(1j * _wrap(asym.phase(s))))

    states = grid.states()
    values = _tabulate(func, states, threads)
    probes = states[:: max(1, len(states) // 3)][:3]
    best = None
    for lam in (1j * report.omega, -1j * report.omega):
        res = eigen_residual(sys, func, lam, probes, report.tau / 2, cfg, n_times=2)
        if best is None or res < best[1]:
            best = (lam, res)
    anchor = func(report.x_star)
    norm = {"anchor": [float(v) for v in report.x_star.x], "anchor_value": str(anchor),
            "rule": "phase zero at the cycle's section point",
            "sign_residuals": str(best[1])}
    return EigenfunctionGrid(best[0], grid, values, norm, func)


def amplitude_eigenfunction(sys: HybridSystemDef, report: SpectralReport, grid: Grid,
                            cfg: IntegratorConfig = DEFAULT_CONFIG, index: int = 0,
                            threads: int = 1, asym: Asymptotics | None = None) -> EigenfunctionGrid:
    """Eigenfunction for exponent ``nu_{index+2}`` by Laplace averages over section hits."""
    if report.degenerate:
        raise SpectralError("degenerate multipliers: amplitude eigenfunctions are not simple")
    asym = asym or Asymptotics(sys, report, cfg, index=index)

    def func(s):
        a = asym.amplitude(s)
        return a if np.iscomplexobj(report.exponents) else complex(a.real, 0.0)

    values = _tabulate(func, grid.states(), threads)
    w = report.left_vectors[:, index]
    norm = {"covector": [str(v) for v in w], "rule": "unit covector, leading entry positive",
            "anchor_value": str(func(report.x_star))}
    return EigenfunctionGrid(complex(report.exponents[index]), grid, values, norm, func)


def eigen_residual(sys: HybridSystemDef, phi, lam: complex, test_points, horizon: float,
                   cfg: IntegratorConfig = DEFAULT_CONFIG, n_times: int = 8,
                   failures: list | None = None) -> float:
    """``max |phi(phi_t x) - exp(lam t) phi(x)| / (1 + |phi(x)|)`` over samples.

    ``phi`` is an :class:`EigenfunctionGrid`, an :class:`ObservableFn` or any
    callable on states. Points whose trajectory fails are skipped and noted in
    ``failures``.
    """
    times = [horizon * (i + 1) / n_times for i in range(n_times)]
    worst = 0.0
    for idx, x in enumerate(test_points):
        x = x if isinstance(x, HybridState) else HybridState(0, x)
        try:
            run = _execute(sys, x, cfg, t_end=horizon, sample_times=times)
            f0 = phi(x)
            samples = [(t, s) for t, s, _ in run.samples if t > 0]
            if not samples or samples[-1][0] < horizon - cfg.guard_time_tol:
                samples.append((horizon, run.state))
            for t, s in samples:
                err = abs(phi(s) - np.exp(lam * t) * f0) / (1.0 + abs(f0))
                worst = max(worst, float(err))
        except (FlowError, SpectralError, exprlang.ExprError) as exc:
            if failures is not None:
                failures.append((idx, f"{type(exc).__name__}: {exc}"))
    return worst


# --- embedding -------------------------------------------------------------------------------


@dataclass
class Embedding:
    """Linear embedding ``E`` with ``E(phi_t x) = expm(A t) E(x)``."""

    eigfns: list
    A: np.ndarray
    layout: list  # (eigfn index, "re" | "im" | "real")

    def __call__(self, s: HybridState) -> np.ndarray:
        cache = {}
        out = []
        for i, part in self.layout:
            if i not in cache:
                cache[i] = complex(self.eigfns[i](s))
            v = cache[i]
            out.append(v.imag if part == "im" else v.real)
        return np.array(out)

    def propagate(self, e, t: float) -> np.ndarray:
        return expm(self.A * t) @ np.asarray(e, dtype=float)


def build_embedding(sys: HybridSystemDef, report: SpectralReport, eigfns,
                    cfg: IntegratorConfig = DEFAULT_CONFIG) -> Embedding:
    """Stack ``[Re phase, Im phase, amplitudes...]`` with a block-diagonal generator."""
    eigfns = list(eigfns)
    lams = [complex(getattr(e, "eigenvalue", None)) for e in eigfns]
    omega = report.omega
    phase = [i for i, l in enumerate(lams)
             if abs(l.real) <= 1e-9 * omega and abs(abs(l.imag) - omega) <= 1e-9 * omega]
    if len(phase) != 1:
        raise MissingEigenfunction("need exactly one phase eigenfunction")
    amps = [i for i in range(len(eigfns)) if i not in phase]
    width = sum(2 if lams[i].imag else 1 for i in amps)
    if width != sys.dim - 1:
        raise MissingEigenfunction(
            f"amplitude eigenfunctions cover {width} of {sys.dim - 1} transverse directions")
    blocks, layout = [], []
    for i in phase + amps:
        lam = lams[i]
        if lam.imag:
            blocks.append(np.array([[lam.real, -lam.imag], [lam.imag, lam.real]]))
            layout += [(i, "re"), (i, "im")]
        else:
            blocks.append(np.array([[lam.real]]))
            layout.append((i, "real"))
    return Embedding(eigfns, block_diag(*blocks), layout)
