"""Hybrid system data model and checks of the standing assumptions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from . import exprlang
from .exprlang import ExprTree, EvalError, compile_expr

GUARD_TOL = 1e-9


class HybridError(Exception):
    """Base class for hybrid-system errors."""


class NotOnGuard(HybridError):
    pass


class VectorFieldError(HybridError):
    def __init__(self, component, cause):
        self.component = component
        super().__init__(f"component {component}: {cause}")


class SamplingError(HybridError):
    pass


@dataclass(frozen=True)
class ModeDef:
    vector_field: tuple
    guard_level: ExprTree
    reset: tuple
    domain_box: np.ndarray
    collar_depth: float = 1.0
    _f: tuple = field(init=False, repr=False, compare=False)
    _g: object = field(init=False, repr=False, compare=False)
    _r: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vector_field", tuple(self.vector_field))
        object.__setattr__(self, "reset", tuple(self.reset))
        box = np.array(self.domain_box, dtype=float).reshape(-1, 2)
        if np.any(box[:, 0] > box[:, 1]):
            raise ValueError("domain_box intervals must satisfy lo <= hi")
        object.__setattr__(self, "domain_box", box)
        if not self.collar_depth > 0:
            raise ValueError("collar_depth must be positive")
        object.__setattr__(self, "_f", tuple(compile_expr(e) for e in self.vector_field))
        object.__setattr__(self, "_g", compile_expr(self.guard_level))
        object.__setattr__(self, "_r", tuple(compile_expr(e) for e in self.reset))

    @property
    def dim(self):
        return len(self.vector_field)

    def field(self, x):
        try:
            return np.array([f(x) for f in self._f])
        except EvalError:
            for i, f in enumerate(self._f):
                try:
                    f(x)
                except EvalError as exc:
                    raise VectorFieldError(i, exc) from None
            raise

    def guard(self, x):
        return self._g(x)

    def reset_map(self, x):
        return np.array([r(x) for r in self._r])

    def in_box(self, x, margin=0.0):
        lo, hi = self.domain_box[:, 0], self.domain_box[:, 1]
        pad = margin * np.maximum(hi - lo, 1.0)
        return bool(np.all(x >= lo - pad) and np.all(x <= hi + pad))


@dataclass(frozen=True)
class HybridSystemDef:
    num_modes: int
    dim: int
    modes: tuple
    period_hint: float | None = None
    frame: tuple | None = None  # per mode: tuple of auxiliary fields, each n ExprTrees

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if not self.modes:
            raise ValueError("mode list is empty")
        if self.num_modes != len(self.modes):
            raise ValueError(f"num_modes={self.num_modes} but {len(self.modes)} modes given")
        for j, m in enumerate(self.modes):
            if len(m.vector_field) != self.dim:
                raise ValueError(f"mode {j}: vector_field arity {len(m.vector_field)} != dim {self.dim}")
            if len(m.reset) != self.dim:
                raise ValueError(f"mode {j}: reset arity {len(m.reset)} != dim {self.dim}")
            if m.domain_box.shape != (self.dim, 2):
                raise ValueError(f"mode {j}: domain_box must have {self.dim} intervals")
            trees = [*m.vector_field, m.guard_level, *m.reset]
            if max(exprlang.max_var_index(e) for e in trees) > self.dim:
                raise ValueError(f"mode {j}: expression uses a variable beyond x{self.dim}")
        if self.period_hint is not None and not self.period_hint > 0:
            raise ValueError("period_hint must be positive")

    def next_mode(self, j):
        return (j + 1) % self.num_modes

    def prev_mode(self, j):
        return (j - 1) % self.num_modes


@dataclass(frozen=True)
class HybridState:
    mode: int
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).copy())

    def __iter__(self):
        yield self.mode
        yield self.x


def check_state(sys: HybridSystemDef, s: HybridState, margin=1e-9):
    if not 0 <= s.mode < sys.num_modes:
        raise ValueError(f"mode {s.mode} outside [0, {sys.num_modes})")
    if s.x.shape != (sys.dim,):
        raise ValueError(f"state has dimension {s.x.shape}, expected ({sys.dim},)")
    if not sys.modes[s.mode].in_box(s.x, margin):
        raise ValueError(f"state {s.x} outside the domain box of mode {s.mode}")


def eval_vector_field(sys: HybridSystemDef, s: HybridState) -> np.ndarray:
    return sys.modes[s.mode].field(s.x)


def guard_distance(sys: HybridSystemDef, s: HybridState) -> float:
    """Guard level ``g_j(x)``: zero on the guard, negative in the interior."""
    return sys.modes[s.mode].guard(s.x)


def apply_reset(sys: HybridSystemDef, s: HybridState, tol: float = GUARD_TOL) -> HybridState:
    g = guard_distance(sys, s)
    if abs(g) > tol:
        raise NotOnGuard(f"guard level {g:.3e} exceeds tolerance {tol:.1e}")
    return HybridState(sys.next_mode(s.mode), sys.modes[s.mode].reset_map(s.x))


# --- geometry helpers -------------------------------------------------------------


def gradient(func, x):
    x = np.asarray(x, dtype=float)
    n = len(x)
    return np.array([exprlang.directional_derivative_fn(func, x, np.eye(n)[i]) for i in range(n)])


def jacobian(func, x):
    """Central-difference Jacobian of a vector map, columns along unit axes."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    cols = [np.atleast_1d(exprlang.directional_derivative_fn(func, x, np.eye(n)[i]))
            for i in range(n)]
    return np.column_stack(cols)


def tangent_basis(normal):
    """Orthonormal basis (columns) of the complement of ``normal``."""
    normal = np.asarray(normal, dtype=float)
    _, _, vt = np.linalg.svd(normal.reshape(1, -1))
    return vt[1:].T


def guard_axis(mode: ModeDef) -> int:
    """First coordinate axis along which the guard level has nonzero slope."""
    center = mode.domain_box.mean(axis=1)
    grad = gradient(mode.guard, center)
    scale = max(np.max(np.abs(grad)), 1e-300)
    for k, gk in enumerate(grad):
        if abs(gk) > 1e-8 * scale:
            return k
    raise SamplingError("guard level has vanishing gradient at the box center")


def solve_on_guard(mode: ModeDef, point, axis: int, pad: float = 0.05):
    """Move ``point`` along ``axis`` onto the guard; None if no root in the box."""
    lo, hi = mode.domain_box[axis]
    width = max(hi - lo, 1e-12)
    lo, hi = lo - pad * width, hi + pad * width
    p = np.array(point, dtype=float)

    def g(s):
        p[axis] = s
        return mode.guard(p)

    try:
        ga, gb = g(lo), g(hi)
    except EvalError:
        return None
    if ga == 0.0:
        root = lo
    elif gb == 0.0:
        root = hi
    elif ga * gb > 0:
        return None
    else:
        root = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    q = np.array(point, dtype=float)
    q[axis] = root
    if not mode.in_box(q, 1e-12):
        return None
    return q


def sample_guard(sys: HybridSystemDef, j: int, samples: int, seed: int = 0) -> np.ndarray:
    """Latin-hypercube samples of the box projected onto guard ``j``."""
    mode = sys.modes[j]
    axis = guard_axis(mode)
    lo, hi = mode.domain_box[:, 0], mode.domain_box[:, 1]
    # shrink so projected points stay off the open box faces
    inner_lo = lo + 1e-3 * (hi - lo)
    inner_hi = hi - 1e-3 * (hi - lo)
    sampler = qmc.LatinHypercube(d=sys.dim, seed=seed)
    out = []
    attempts = 0
    while len(out) < samples and attempts < 20:
        raw = qmc.scale(sampler.random(samples), inner_lo, np.maximum(inner_hi, inner_lo + 1e-15))
        for p in raw:
            q = solve_on_guard(mode, p, axis)
            if q is not None:
                out.append(q)
                if len(out) == samples:
                    break
        attempts += 1
    if not out:
        raise SamplingError(f"guard of mode {j} has no points inside its domain box")
    return np.array(out)


def _clear_of_edges(mode: ModeDef, x, margin):
    """Inside the box and ``margin`` away from every face except at most one."""
    lo, hi = mode.domain_box[:, 0], mode.domain_box[:, 1]
    width = np.maximum(hi - lo, 1e-300)
    depth = np.minimum(x - lo, hi - x) / width
    return bool(np.all(depth >= -1e-9) and np.count_nonzero(depth < margin) <= 1)


def sample_seam(sys: HybridSystemDef, j: int, samples: int, seed: int = 0,
                margin: float = 0.02) -> np.ndarray:
    """Guard samples whose reset image lies inside the successor box, ``margin`` deep.

    ``margin`` is relative to the box widths, so derivative stencils and short
    flows at ``R(z)`` stay in the successor's domain.
    """
    nxt = sys.modes[sys.next_mode(j)]
    mode = sys.modes[j]
    kept = []
    pool = samples
    for _ in range(6):
        pool *= 2
        kept = [z for z in sample_guard(sys, j, pool, seed=seed)
                if _clear_of_edges(nxt, mode.reset_map(z), margin)]
        if len(kept) >= samples:
            return np.array(kept[:samples])
    if not kept:
        raise SamplingError(f"no guard point of mode {j} resets inside the successor box")
    return np.array(kept)


# --- assumption validation ---------------------------------------------------------


@dataclass
class AssumptionResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class ValidationReport:
    results: list

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def __getitem__(self, name):
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def lines(self):
        return [f"{r.name} {'pass' if r.passed else 'FAIL'} margin={r.margin!r} {r.detail}".rstrip()
                for r in self.results]


def _box_depth(mode: ModeDef, x):
    lo, hi = mode.domain_box[:, 0], mode.domain_box[:, 1]
    return float(np.min(np.minimum(x - lo, hi - x)))


def reset_image_normal(sys: HybridSystemDef, j: int, z):
    """Unit normal to ``R(G^(j))`` at ``R(z)``, plus the singular values of DR|TG."""
    mode = sys.modes[j]
    tg = tangent_basis(gradient(mode.guard, z))
    jr = jacobian(mode.reset_map, z) @ tg
    u, svals, _ = np.linalg.svd(jr, full_matrices=True)
    return u[:, -1], svals


def validate_assumptions(sys: HybridSystemDef, samples: int = 100, tol: float = 1e-8,
                         seed: int = 0) -> ValidationReport:
    a1 = np.inf
    a2_rank = np.inf
    a2_inward = np.inf
    a2_landing = -np.inf
    a3 = np.inf
    guard_pts = {}
    image_pts = {}
    for j, mode in enumerate(sys.modes):
        zs = sample_guard(sys, j, samples, seed=seed + j)
        guard_pts[j] = zs
        nxt = sys.modes[sys.next_mode(j)]
        images = []
        for z in zs:
            a1 = min(a1, float(gradient(mode.guard, z) @ mode.field(z)))
            w = mode.reset_map(z)
            images.append(w)
            normal, svals = reset_image_normal(sys, j, z)
            a2_rank = min(a2_rank, float(svals[-1]) if len(svals) else np.inf)
            # orient the normal toward the box interior of the successor mode
            delta = 1e-6 * (1.0 + np.max(np.abs(w)))
            dp, dm = _box_depth(nxt, w + delta * normal), _box_depth(nxt, w - delta * normal)
            flux = float(normal @ nxt.field(w))
            if dp > dm:
                a2_inward = min(a2_inward, flux)
            elif dm > dp:
                a2_inward = min(a2_inward, -flux)
            else:
                a2_inward = min(a2_inward, abs(flux))
            a2_landing = max(a2_landing, nxt.guard(w))
        image_pts[sys.next_mode(j)] = np.array(images)
    for j in range(sys.num_modes):
        if j in image_pts:
            a3 = min(a3, float(cdist(guard_pts[j], image_pts[j]).min()))
    a2_margin = min(a2_rank, a2_inward, -a2_landing)
    return ValidationReport([
        AssumptionResult("A1", a1 > tol, a1, "min grad(g).F on guard samples"),
        AssumptionResult(
            "A2", a2_margin > tol, a2_margin,
            f"min sv(DR|TG)={a2_rank!r} inward_flux={a2_inward!r} max successor g(R(z))={a2_landing!r}"),
        AssumptionResult("A3", a3 > tol, a3, "min distance between G^(j) and R(G^(j-1)) samples"),
    ])


def parse_mode(vector_field: Sequence[str], guard_level: str, reset: Sequence[str],
               domain_box, collar_depth: float = 1.0, dim: int | None = None) -> ModeDef:
    """Build a :class:`ModeDef` from expression strings."""
    n = dim if dim is not None else len(vector_field)
    return ModeDef(
        vector_field=tuple(exprlang.parse(e, n) for e in vector_field),
        guard_level=exprlang.parse(guard_level, n),
        reset=tuple(exprlang.parse(e, n) for e in reset),
        domain_box=np.asarray(domain_box, dtype=float),
        collar_depth=collar_depth,
    )


def paper_example() -> HybridSystemDef:
    """Single-mode planar system with a globally attracting hybrid limit cycle.

    Flow ``(-x1, -2 x2)`` on ``1 <= x1 <= 2``; the guard ``x1 = 1`` resets to
    ``(2, x2 + 1)``. The cycle is ``x2 = x1^2 / 3`` with period ``ln 2``.
    """
    mode = parse_mode(
        vector_field=["-x1", "-2*x2"],
        guard_level="1 - x1",
        reset=["2", "x2 + 1"],
        domain_box=[[1.0, 2.0], [1e-3, 10.0]],
        collar_depth=1.0,
    )
    frame = ((tuple(exprlang.parse(e, 2) for e in ("0", "x2")),),)
    return HybridSystemDef(num_modes=1, dim=2, modes=(mode,), period_hint=float(np.log(2.0)),
                           frame=frame)
