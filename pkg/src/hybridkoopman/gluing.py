"""Gluing map across the guard, its inverse and pushforward, frames and collar charts.

The gluing map of mode ``j`` sends a collar point ``x`` to
``phi^(j+1)_{sigma(x)}(R(h(x)))``: flow to the guard, reset, then flow forward
in the next mode for the same time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprlang
from .core import (
    HybridError,
    HybridState,
    HybridSystemDef,
    gradient,
    guard_axis,
    jacobian,
    sample_guard,
    solve_on_guard,
    tangent_basis,
)
from .flow import (
    DEFAULT_CONFIG,
    Escaped,
    IntegratorConfig,
    _impact,
    flow_to_level,
    integrate_mode,
)


class GluingError(HybridError):
    pass


class NotInImage(GluingError):
    pass


class InverseResetError(GluingError):
    pass


def _cache(sys):
    store = sys.__dict__.get("_gluing_cache")
    if store is None:
        store = {}
        object.__setattr__(sys, "_gluing_cache", store)
    return store


# --- guard parameterisations ------------------------------------------------------------


class GuardChart:
    """Coordinates ``c`` in R^(n-1) on a guard patch, with inverse.

    The default chart drops the coordinate along which the guard level has
    nonzero slope and recovers it by 1-D root finding on the guard.
    """

    def __init__(self, sys: HybridSystemDef, mode: int, forward=None, inverse=None):
        self.sys = sys
        self.mode = mode
        n = sys.dim
        if forward is None:
            self.axis = guard_axis(sys.modes[mode])
            self.keep = [i for i in range(n) if i != self.axis]
            self._fwd = None
            self._inv = None
        else:
            self.axis = None
            self._fwd = [exprlang.compile_expr(e) if not callable(e) else e for e in forward]
            self._inv = [exprlang.compile_expr(e) if not callable(e) else e for e in inverse]

    @classmethod
    def from_strings(cls, sys, mode, forward, inverse):
        n = sys.dim
        return cls(sys, mode, [exprlang.parse(e, n) for e in forward],
                   [exprlang.parse(e, n - 1) for e in inverse])

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self._fwd is None:
            return z[self.keep]
        return np.array([f(z) for f in self._fwd])

    def inverse(self, c):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        if self._inv is not None:
            return np.array([f(c) for f in self._inv])
        p = np.empty(self.sys.dim)
        p[self.keep] = c
        p[self.axis] = self.sys.modes[self.mode].domain_box[self.axis].mean()
        z = solve_on_guard(self.sys.modes[self.mode], p, self.axis, pad=0.5)
        if z is None:
            # off the box: Newton along the axis on the extended guard level
            g = self.sys.modes[self.mode].guard
            z = p.copy()
            for _ in range(60):
                e = np.zeros_like(z)
                e[self.axis] = 1.0
                slope = exprlang.directional_derivative_fn(g, z, e)
                step = g(z) / slope
                z[self.axis] -= step
                if abs(step) <= 1e-15 * (1 + abs(z[self.axis])):
                    break
        return z

    def round_trip_error(self, points):
        return max(float(np.max(np.abs(self.inverse(self(z)) - z))) for z in points)


def default_chart(sys, mode):
    store = _cache(sys)
    key = ("chart", mode)
    if key not in store:
        store[key] = GuardChart(sys, mode)
    return store[key]


# --- the gluing map ----------------------------------------------------------------------


def gluing_map(sys: HybridSystemDef, s: HybridState,
               cfg: IntegratorConfig = DEFAULT_CONFIG) -> HybridState:
    """Flow to the guard, reset, flow forward in the next mode for the same time."""
    sigma, z = _impact(sys, s, cfg)
    mode = sys.modes[s.mode]
    w = HybridState(sys.next_mode(s.mode), mode.reset_map(z))
    return integrate_mode(sys, w, sigma, cfg, strict=False)


def reset_image_level(sys: HybridSystemDef, j: int, w, chart=None, c0=None):
    """Signed offset of ``w`` from the reset image ``R(G^(j))``.

    Returns ``(level, c)``: ``c`` are guard coordinates of the closest image
    point ``R(z)`` (Gauss-Newton) and ``level`` is the component of
    ``w - R(z)`` along the unit normal oriented with the successor flow, so
    points inside the image collar have positive level.
    """
    chart = chart or default_chart(sys, j)
    mode = sys.modes[j]
    nxt = sys.modes[sys.next_mode(j)]
    w = np.asarray(w, dtype=float)
    c = _closest_image_coords(sys, j, w) if c0 is None else np.array(c0, dtype=float)

    def image(cc):
        return mode.reset_map(chart.inverse(cc))

    for _ in range(50):
        wr = image(c)
        jac = _central_jacobian(image, c)
        step = np.linalg.lstsq(jac, w - wr, rcond=None)[0]
        c = c + step
        if np.max(np.abs(step)) <= 1e-13 * (1.0 + np.max(np.abs(c))):
            break
    else:
        raise InverseResetError(f"Gauss-Newton on the reset image did not converge at w={w}")
    wr = image(c)
    # residual is orthogonal to the image at the optimum, so a plain
    # central-difference tangent is accurate enough for the normal
    u = np.linalg.svd(jac, full_matrices=True)[0]
    normal = u[:, -1]
    if normal @ nxt.field(wr) < 0:
        normal = -normal
    return float(normal @ (w - wr)), c


def _central_jacobian(func, c, h=1e-6):
    cols = []
    for i in range(len(c)):
        e = np.zeros_like(c)
        e[i] = h * (1.0 + abs(c[i]))
        cols.append((func(c + e) - func(c - e)) / (2 * e[i]))
    return np.column_stack(cols)


def _closest_image_coords(sys, j, w):
    store = _cache(sys)
    key = ("image-samples", j)
    if key not in store:
        chart = default_chart(sys, j)
        zs = sample_guard(sys, j, 32, seed=12345)
        store[key] = (np.array([chart(z) for z in zs]),
                      np.array([sys.modes[j].reset_map(z) for z in zs]))
    coords, images = store[key]
    k = int(np.argmin(np.linalg.norm(images - w, axis=1)))
    return coords[k].copy()


def gluing_map_inverse(sys: HybridSystemDef, s: HybridState,
                       cfg: IntegratorConfig = DEFAULT_CONFIG) -> HybridState:
    """Preimage under the gluing map of a point in the image collar."""
    j = sys.prev_mode(s.mode)
    chart = default_chart(sys, j)
    nxt = sys.modes[s.mode]
    hint = [None]

    def level(w):
        value, hint[0] = reset_image_level(sys, j, w, chart, hint[0])
        return value

    l0 = level(s.x)
    direction = -1 if l0 > 0 else 1
    hit = flow_to_level(nxt, s.x, level, direction, sys.modes[j].collar_depth, cfg, s.mode)
    if hit is None:
        raise NotInImage(f"{s.x} does not reach R(G^({j})) within collar depth")
    t_r, w = hit
    _, c = reset_image_level(sys, j, w, chart, hint[0])
    z = chart.inverse(c)
    sigma = -t_r
    return integrate_mode(sys, HybridState(j, z), -sigma, cfg, strict=False)


def pushforward(sys: HybridSystemDef, map_kind, field, s: HybridState,
                cfg: IntegratorConfig = DEFAULT_CONFIG, preimage=None) -> np.ndarray:
    """Pushforward of ``field`` at ``s`` through the gluing map or a mode flow.

    ``map_kind`` is ``"gluing"`` or ``("mode_flow", t)``. ``field`` maps a
    coordinate vector to a tangent vector. ``preimage`` skips the inversion
    when the caller already knows it.
    """
    if map_kind == "gluing":
        if preimage is None:
            preimage = gluing_map_inverse(sys, s, cfg)
        src = preimage.mode

        def fmap(y):
            return gluing_map(sys, HybridState(src, y), cfg).x
    else:
        kind, t = map_kind
        if kind != "mode_flow":
            raise ValueError(f"unknown map kind {map_kind!r}")
        if preimage is None:
            preimage = integrate_mode(sys, s, -t, cfg, strict=False)
        src = preimage.mode

        def fmap(y):
            return integrate_mode(sys, HybridState(src, y), t, cfg, strict=False).x

    v = np.asarray(field(preimage.x), dtype=float)
    return np.asarray(exprlang.directional_derivative_fn(fmap, preimage.x, v), dtype=float)


def pushforward_field(sys, field, cfg=DEFAULT_CONFIG):
    """The vector field ``w -> (D Psi field)(w)`` on the image collar."""
    def pushed(w, mode):
        return pushforward(sys, "gluing", field, HybridState(mode, w), cfg)
    return pushed


# --- frames -------------------------------------------------------------------------------


@dataclass
class Frame:
    """Auxiliary fields F_2..F_n per mode, as expression tuples."""

    exprs: tuple  # exprs[j][i] is the tuple of n ExprTrees of field F_{i+2} in mode j
    note: str = ""
    _compiled: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.exprs = tuple(tuple(tuple(f) for f in mode) for mode in self.exprs)
        self._compiled = tuple(
            tuple(tuple(exprlang.compile_expr(e) for e in f) for f in mode) for mode in self.exprs)

    @classmethod
    def from_strings(cls, sys, fields, note=""):
        """``fields`` is a list of aux fields (shared by all modes) or a per-mode list."""
        n = sys.dim
        if fields and isinstance(fields[0][0], str):
            fields = [fields] * sys.num_modes
        return cls(tuple(tuple(tuple(exprlang.parse(e, n) for e in f) for f in mode)
                         for mode in fields), note)

    @classmethod
    def from_system(cls, sys):
        if sys.frame is None:
            raise ValueError("system document carries no frame")
        frame = sys.frame
        if len(frame) == 1 and sys.num_modes > 1:
            frame = frame * sys.num_modes
        return cls(frame, "from system document")

    def fields(self, j):
        return [lambda x, f=f: np.array([c(x) for c in f]) for f in self._compiled[j]]


@dataclass
class FrameReport:
    span_margin: float
    tangency_residual: float
    bracket_residual: float
    tol: float
    rows: list  # (mode, kind, sample index, value)

    @property
    def spans_guard(self):
        return self.span_margin > self.tol and self.tangency_residual <= self.tol

    @property
    def commutes(self):
        return self.bracket_residual <= self.tol

    @property
    def passed(self):
        return self.spans_guard and self.commutes


def lie_bracket(a, b, x):
    """``[A, B](x) = DB(x) A(x) - DA(x) B(x)`` by central differences."""
    x = np.asarray(x, dtype=float)
    db_a = exprlang.directional_derivative_fn(b, x, a(x))
    da_b = exprlang.directional_derivative_fn(a, x, b(x))
    return np.asarray(db_a) - np.asarray(da_b)


def sample_collar(sys: HybridSystemDef, j: int, samples: int, seed: int = 0,
                  cfg: IntegratorConfig = DEFAULT_CONFIG, depth=None):
    """Collar points: guard samples flowed backward by random times inside the box."""
    rng = np.random.default_rng(seed)
    mode = sys.modes[j]
    depth = mode.collar_depth if depth is None else depth
    strict = IntegratorConfig(**{**cfg.__dict__, "box_margin": 0.0})
    out = []
    for z in sample_guard(sys, j, samples, seed=seed):
        t = rng.uniform(0.02, 1.0) * depth
        for _ in range(40):
            try:
                x = integrate_mode(sys, HybridState(j, z), -t, strict, strict=False)
            except Escaped:
                t *= 0.5
                continue
            out.append(x)
            break
    return out


def check_frame(sys: HybridSystemDef, frame: Frame, samples: int = 20, tol: float = 1e-6,
                seed: int = 0, cfg: IntegratorConfig = DEFAULT_CONFIG) -> FrameReport:
    span = np.inf
    tangency = 0.0
    bracket = 0.0
    rows = []
    for j, mode in enumerate(sys.modes):
        aux = frame.fields(j)
        for k, z in enumerate(sample_guard(sys, j, samples, seed=seed + j)):
            grad = gradient(mode.guard, z)
            unit = grad / np.linalg.norm(grad)
            tb = tangent_basis(unit)
            vecs = np.column_stack([f(z) for f in aux])
            for f in aux:
                v = f(z)
                res = abs(unit @ v) / max(np.linalg.norm(v), 1e-300)
                tangency = max(tangency, res)
            sv = np.linalg.svd(tb.T @ vecs, compute_uv=False)
            margin = float(sv[-1]) if len(sv) else np.inf
            span = min(span, margin)
            rows.append((j, "span", k, margin))
        fields = [mode.field, *aux]
        for k, x in enumerate(sample_collar(sys, j, samples, seed=seed + 100 + j, cfg=cfg)):
            worst = 0.0
            for a in range(len(fields)):
                for b in range(a + 1, len(fields)):
                    worst = max(worst, float(np.linalg.norm(lie_bracket(fields[a], fields[b], x.x))))
            bracket = max(bracket, worst)
            rows.append((j, "bracket", k, worst))
    return FrameReport(span, tangency, bracket, tol, rows)


# --- collar chart --------------------------------------------------------------------------


@dataclass
class CollarChart:
    """Seam chart: first coordinate is flow time (negative before the guard).

    ``eta`` maps a collar point to ``(-sigma(x), zeta(h(x)))`` on the guard side
    and ``(sigma(Psi^-1 x), zeta(h(Psi^-1 x)))`` on the image side.
    """

    sys: HybridSystemDef
    mode: int
    zeta: GuardChart
    cfg: IntegratorConfig = DEFAULT_CONFIG

    def eta(self, s: HybridState, side: int = -1) -> np.ndarray:
        if side < 0:
            sigma, z = _impact(self.sys, s, self.cfg)
            return np.concatenate([[-sigma], self.zeta(z)])
        pre = gluing_map_inverse(self.sys, s, self.cfg)
        sigma, z = _impact(self.sys, pre, self.cfg)
        return np.concatenate([[sigma], self.zeta(z)])

    def eta_inverse(self, y) -> HybridState:
        y = np.asarray(y, dtype=float)
        z = HybridState(self.mode, self.zeta.inverse(y[1:]))
        if y[0] < 0:
            return integrate_mode(self.sys, z, y[0], self.cfg, strict=False)
        return self.branch(+1, y)

    def branch(self, side: int, y) -> HybridState:
        """Evaluate one side's formula at ``y`` (extended smoothly across the seam)."""
        y = np.asarray(y, dtype=float)
        z = HybridState(self.mode, self.zeta.inverse(y[1:]))
        if side < 0:
            return integrate_mode(self.sys, z, y[0], self.cfg, strict=False)
        base = gluing_map(self.sys, z, self.cfg)
        return integrate_mode(self.sys, base, y[0], self.cfg, strict=False)


def build_collar_chart(sys: HybridSystemDef, j: int, frame: Frame | None = None, zeta=None,
                       cfg: IntegratorConfig = DEFAULT_CONFIG, samples: int = 16,
                       tol: float = 1e-8) -> CollarChart:
    """Collar chart around guard ``j``; ``zeta`` defaults to the axis-projection chart.

    ``frame`` is accepted for provenance; the chart itself only needs ``zeta``.
    """
    zeta = zeta or default_chart(sys, j)
    pts = sample_guard(sys, j, samples, seed=7)
    err = zeta.round_trip_error(pts)
    if err > tol:
        raise GluingError(f"guard chart round trip error {err:.3e} exceeds {tol:.1e}")
    return CollarChart(sys, j, zeta, cfg)
