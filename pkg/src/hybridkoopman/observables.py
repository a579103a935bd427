"""Complex observables on a hybrid system and the seam-matching tests for them.

An observable is a pair of real functions per mode. Derivatives are taken
along vector fields by nested central differences, with each field
re-evaluated at every stencil node, so iterated derivatives are genuine Lie
derivatives rather than fixed-direction derivatives.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve

from . import exprlang
from .core import HybridError, HybridState, HybridSystemDef, sample_seam
from .flow import DEFAULT_CONFIG, IntegratorConfig, fmt
from .gluing import CollarChart, Frame, pushforward

MAX_ORDER = 2
DEFAULT_TOL = {0: 1e-5, 1: 1e-5, 2: 1e-3}
SCAN_TOL = {0: 1e-4, 1: 1e-4, 2: 1e-3}


def fmt_complex(z) -> str:
    z = complex(z)
    if z.imag == 0:
        return fmt(z.real)
    return f"{z.real:.17g}{z.imag:+.17g}j"


# --- observables -------------------------------------------------------------------


@dataclass
class ObservableFn:
    """Observable ``f: M -> C`` given per mode by real and imaginary parts.

    ``parts[j]`` is a callable ``x -> (re, im)``. ``tol_factor`` widens the
    membership tolerance for tabulated (interpolated) data.
    """

    parts: tuple
    k: int = 2
    tol_factor: float = 1.0
    source: dict = field(default_factory=dict)

    def __call__(self, s: HybridState) -> complex:
        re, im = self.parts[s.mode](np.asarray(s.x, dtype=float))
        return complex(re, im)

    def pair(self, mode: int):
        """Real 2-vector valued function of mode ``mode``, for derivative stencils."""
        part = self.parts[mode]
        return lambda x: np.asarray(part(np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def from_strings(cls, sys: HybridSystemDef, re, im="0", k: int = 2):
        """``re``/``im`` are expression strings shared by all modes, or per-mode lists."""
        res = [re] * sys.num_modes if isinstance(re, str) else list(re)
        ims = [im] * sys.num_modes if isinstance(im, str) else list(im)
        if len(res) != sys.num_modes or len(ims) != sys.num_modes:
            raise ValueError("need one real and one imaginary expression per mode")
        parts = []
        for r, i in zip(res, ims):
            fr = exprlang.compile_expr(exprlang.parse(r, sys.dim))
            fi = exprlang.compile_expr(exprlang.parse(i, sys.dim))
            parts.append(lambda x, fr=fr, fi=fi: (fr(x), fi(x)))
        return cls(tuple(parts), k, 1.0, {"kind": "expression", "re": res, "im": ims})

    @classmethod
    def from_callable(cls, sys: HybridSystemDef, func, k: int = 2, tol_factor: float = 1.0):
        """``func(mode, x)`` returns a complex number."""
        def part(x, mode):
            v = complex(func(mode, x))
            return v.real, v.imag
        parts = tuple(lambda x, m=m: part(x, m) for m in range(sys.num_modes))
        return cls(parts, k, tol_factor, {"kind": "callable"})

    @classmethod
    def from_grid(cls, sys: HybridSystemDef, axes, values, k: int = 2):
        """Tabulated observable: ``axes[j]`` are the grid axes of mode ``j`` and
        ``values[j]`` the complex samples on their tensor grid (cubic interpolation).
        """
        parts = []
        for ax, vals in zip(axes, values):
            vals = np.asarray(vals, dtype=complex)
            ax = tuple(np.asarray(a, dtype=float) for a in ax)
            # direct sparse solve: the default iterative solver stops near 1e-6,
            # which derivative stencils then amplify
            kw = dict(method="cubic", bounds_error=False, fill_value=None, solver=spsolve)
            ire = RegularGridInterpolator(ax, vals.real, **kw)
            iim = RegularGridInterpolator(ax, vals.imag, **kw)
            parts.append(lambda x, ire=ire, iim=iim: (float(ire(x[None, :])[0]),
                                                      float(iim(x[None, :])[0])))
        return cls(tuple(parts), k, 10.0, {"kind": "grid"})

    @classmethod
    def constant(cls, sys: HybridSystemDef, value: complex):
        value = complex(value)
        return cls(tuple((lambda x: (value.real, value.imag)) for _ in range(sys.num_modes)),
                   2, 1.0, {"kind": "constant", "value": str(value)})


# --- Lie derivatives -----------------------------------------------------------------


def _nested(func, fields, x, h):
    if not fields:
        return func(x)
    outer, inner = fields[0], fields[1:]
    v = np.asarray(outer(x), dtype=float)
    return exprlang.directional_derivative_fn(
        lambda y: _nested(func, inner, y, h), x, v, h=h and h * _scale(x, v))


def _scale(x, v):
    return (1.0 + float(np.max(np.abs(x)))) / max(1.0, float(np.max(np.abs(v))))


def lie_derivative(sys: HybridSystemDef, f: ObservableFn, fields, s: HybridState) -> complex:
    """``L_{A1} L_{A2} ... f`` at ``s``; ``fields[0]`` is applied last (outermost).

    Each field maps a coordinate vector to a tangent vector of mode ``s.mode``.
    """
    fields = list(fields)
    if len(fields) > MAX_ORDER:
        raise ValueError(f"total order {len(fields)} exceeds {MAX_ORDER}")
    # nested stencils need the larger step to keep round-off amplification down
    h = exprlang.EPS ** 0.25 if len(fields) > 1 else None
    out = np.asarray(_nested(f.pair(s.mode), fields, np.asarray(s.x, dtype=float), h))
    return complex(out[0], out[1])


def multi_indices(n: int, k: int):
    """Multi-indices ``(l1..ln)`` with ``sum <= k`` in lexicographic order."""
    return [l for l in itertools.product(range(k + 1), repeat=n) if sum(l) <= k]


# --- membership ------------------------------------------------------------------------


@dataclass
class MembershipReport:
    k: int
    tol: float
    rows: list  # (sample_index, mode, multi_index, lhs, rhs, residual)
    failures: list = field(default_factory=list)  # (sample_index, message)

    @property
    def max_residual(self) -> float:
        return max((r[5] for r in self.rows), default=0.0)

    @property
    def max_lhs(self) -> float:
        return max((abs(r[3]) for r in self.rows), default=0.0)

    @property
    def threshold(self) -> float:
        return self.tol * (1.0 + self.max_lhs)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and not self.failures and self.max_residual <= self.threshold

    def sample_residuals(self):
        """Worst residual per guard sample."""
        worst = {}
        for idx, _, _, _, _, res in self.rows:
            worst[idx] = max(worst.get(idx, 0.0), res)
        return [worst[i] for i in sorted(worst)]

    def to_csv(self) -> str:
        n = len(self.rows[0][2]) if self.rows else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_index", *(f"l{i + 1}" for i in range(n)), "lhs", "rhs", "residual"])
        for idx, _, l, lhs, rhs, res in self.rows:
            w.writerow([idx, *l, fmt_complex(lhs), fmt_complex(rhs), fmt(res)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = [
            f"k = {self.k}",
            f"samples = {len(self.sample_residuals())}",
            f"max_residual = {fmt(self.max_residual)}",
            f"threshold = {fmt(self.threshold)}",
            f"verdict = {'pass' if self.passed else 'fail'}",
        ]
        head += [f"failure sample={i}: {msg}" for i, msg in self.failures]
        return "\n".join(head) + "\n\n" + self.to_csv()


def _guard_points(sys, guard_samples, seed):
    """``[(mode, z)]`` from a per-mode count or explicit ``(mode, z)`` pairs."""
    if isinstance(guard_samples, int):
        return [(j, z) for j in range(sys.num_modes)
                for z in sample_seam(sys, j, guard_samples, seed=seed + j)]
    return [(int(j), np.asarray(z, dtype=float)) for j, z in guard_samples]


def _pushed_field(sys, j, aux, cfg, known):
    """``D Psi aux`` on the image collar of guard ``j`` as a plain field ``w -> v``."""
    nxt = sys.next_mode(j)

    def pushed(w):
        w = np.asarray(w, dtype=float)
        pre = known.get(w.tobytes())
        return pushforward(sys, "gluing", aux, HybridState(nxt, w), cfg, preimage=pre)
    return pushed


def check_membership(sys: HybridSystemDef, f: ObservableFn, frame: Frame, k: int,
                     guard_samples=50, tol: float | None = None, seed: int = 0,
                     cfg: IntegratorConfig = DEFAULT_CONFIG) -> MembershipReport:
    """Compare Lie-derivative stacks of ``f`` on both sides of every guard.

    At each guard sample ``z`` the stack ``L_F^l1 L_F2^l2 ... f(z)`` is
    compared with ``L_F'^l1 L_{DPsi F2}^l2 ... f(R(z))`` for all multi-indices
    of total order at most ``k``.
    """
    if not 0 <= k <= MAX_ORDER:
        raise ValueError(f"k must be between 0 and {MAX_ORDER}")
    tol = (DEFAULT_TOL[k] if tol is None else tol) * f.tol_factor
    rows, failures = [], []
    for idx, (j, z) in enumerate(_guard_points(sys, guard_samples, seed)):
        mode = sys.modes[j]
        nxt = sys.next_mode(j)
        w = mode.reset_map(z)
        known = {w.tobytes(): HybridState(j, z)}
        aux = frame.fields(j)
        left = [mode.field, *aux]
        right = [sys.modes[nxt].field, *(_pushed_field(sys, j, a, cfg, known) for a in aux)]
        try:
            for l in multi_indices(sys.dim, k):
                lf = [fld for fld, c in zip(left, l) for _ in range(c)]
                rf = [fld for fld, c in zip(right, l) for _ in range(c)]
                lhs = lie_derivative(sys, f, lf, HybridState(j, z))
                rhs = lie_derivative(sys, f, rf, HybridState(nxt, w))
                rows.append((idx, j, l, lhs, rhs, abs(lhs - rhs)))
        except (HybridError, exprlang.ExprError, ArithmeticError) as exc:
            failures.append((idx, f"{type(exc).__name__}: {exc}"))
    return MembershipReport(k, tol, rows, failures)


def quotient_consistency(sys: HybridSystemDef, f: ObservableFn, guard_samples=50,
                         tol: float = 1e-8, seed: int = 0) -> bool:
    """True iff ``|f(z) - f(R(z))| <= tol`` at every sampled guard point."""
    for j, z in _guard_points(sys, guard_samples, seed):
        w = HybridState(sys.next_mode(j), sys.modes[j].reset_map(z))
        if abs(f(HybridState(j, z)) - f(w)) > tol:
            return False
    return True


# --- seam smoothness -------------------------------------------------------------------

# one-sided 4-point stencils at nodes 0, h, 2h, 3h
_ONE_SIDED = {
    0: np.array([1.0, 0.0, 0.0, 0.0]),
    1: np.array([-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0]),
    2: np.array([2.0, -5.0, 4.0, -1.0]),
}
_CENTRAL = {
    0: (np.array([0.0]), np.array([1.0])),
    1: (np.array([-1.0, 1.0]), np.array([-0.5, 0.5])),
    2: (np.array([-1.0, 0.0, 1.0]), np.array([1.0, -2.0, 1.0])),
}


@dataclass
class ScanReport:
    k: int
    tol: float
    rows: list  # (grid_index, derivative multi-index, left, right, jump)
    failures: list = field(default_factory=list)

    @property
    def max_jump(self) -> float:
        return max((r[4] for r in self.rows), default=0.0)

    def max_jump_of_order(self, order: int) -> float:
        return max((r[4] for r in self.rows if sum(r[1]) == order), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and not self.failures and self.max_jump <= self.tol

    def to_csv(self) -> str:
        n = len(self.rows[0][1]) if self.rows else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["grid_index", *(f"d{i + 1}" for i in range(n)), "left", "right", "jump"])
        for idx, d, left, right, jump in self.rows:
            w.writerow([idx, *d, fmt_complex(left), fmt_complex(right), fmt(jump)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = [f"k = {self.k}", f"max_jump = {fmt(self.max_jump)}", f"tol = {fmt(self.tol)}",
                f"verdict = {'pass' if self.passed else 'fail'}"]
        head += [f"failure grid={i}: {msg}" for i, msg in self.failures]
        return "\n".join(head) + "\n\n" + self.to_csv()


def _seam_derivative(func, c, d, side, h):
    """Derivative ``d`` of ``y -> func(y)`` at ``y = (0, c)``, one-sided in ``y1``."""
    n = len(d)
    steps = [h * (1.0 + abs(ci)) for ci in c]
    axes = [(side * h * np.arange(4), _ONE_SIDED[d[0]] / (side * h) ** d[0])]
    for i in range(1, n):
        offs, wts = _CENTRAL[d[i]]
        axes.append((offs * steps[i - 1], wts / steps[i - 1] ** d[i]))
    total = 0.0
    for combo in itertools.product(*(range(len(a[0])) for a in axes)):
        wt = np.prod([axes[a][1][m] for a, m in enumerate(combo)])
        if wt == 0.0:
            continue
        y = np.array([axes[a][0][m] for a, m in enumerate(combo)])
        y[1:] += c
        total = total + wt * func(y)
    return total


def seam_smoothness_scan(sys: HybridSystemDef, f: ObservableFn, chart: CollarChart, k: int,
                         grid=None, tol: float | None = None, samples: int = 10,
                         seed: int = 0, h: float = 1e-3) -> ScanReport:
    """Jumps of one-sided derivatives of ``y -> f(eta^-1(y))`` across ``y1 = 0``.

    ``grid`` holds seam coordinates ``(y2..yn)``; by default they are taken
    from guard samples. Each side is evaluated through its own branch of the
    collar chart, with the first-coordinate stencil lying on that side only.
    """
    if not 0 <= k <= MAX_ORDER:
        raise ValueError(f"k must be between 0 and {MAX_ORDER}")
    tol = SCAN_TOL[k] if tol is None else tol
    if grid is None:
        grid = [chart.zeta(z) for z in sample_seam(sys, chart.mode, samples, seed=seed)]
    grid = [np.atleast_1d(np.asarray(c, dtype=float)) for c in grid]
    rows, failures = [], []
    for idx, c in enumerate(grid):
        try:
            for d in multi_indices(sys.dim, k):
                vals = []
                for side in (-1, +1):
                    def func(y, side=side):
                        return f(chart.branch(side, y))
                    vals.append(_seam_derivative(func, c, d, side, h))
                rows.append((idx, d, vals[0], vals[1], abs(vals[1] - vals[0])))
        except (HybridError, exprlang.ExprError, ArithmeticError) as exc:
            failures.append((idx, f"{type(exc).__name__}: {exc}"))
    return ScanReport(k, tol, rows, failures)
