"""Command-line front end: system loading, subcommands and file emission."""

from __future__ import annotations

import argparse
import json
import sys as _sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import exprlang
from .core import HybridError, HybridState, HybridSystemDef, paper_example, parse_mode, validate_assumptions
from .flow import DEFAULT_CONFIG, IntegratorConfig, fmt, hybrid_flow, project_to_guard, simulate, time_to_impact
from .gluing import Frame, build_collar_chart, check_frame, gluing_map, gluing_map_inverse
from .observables import ObservableFn, check_membership, seam_smoothness_scan
from .spectral import (
    Asymptotics,
    Grid,
    PoincareSection,
    SpectralError,
    amplitude_eigenfunction,
    build_embedding,
    default_section,
    find_limit_cycle,
    floquet,
    phase_eigenfunction,
    poincare_map,
)

FIXTURES = {"paper-example": paper_example}

SYSTEM_SCHEMA = {
    "type": "object",
    "required": ["num_modes", "dim", "modes"],
    "properties": {
        "num_modes": {"type": "integer", "minimum": 1},
        "dim": {"type": "integer", "minimum": 1},
        "period_hint": {"type": "number", "exclusiveMinimum": 0},
        "frame": {"type": "array", "items": {"type": "array", "items": {"type": "string"}}},
        "modes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["vector_field", "guard_level", "reset", "domain_box"],
                "properties": {
                    "vector_field": {"type": "array", "items": {"type": "string"}},
                    "guard_level": {"type": "string"},
                    "reset": {"type": "array", "items": {"type": "string"}},
                    "domain_box": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "number"},
                                  "minItems": 2, "maxItems": 2},
                    },
                    "collar_depth": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
    },
}


class UsageError(Exception):
    """Malformed command-line value (exit code 2)."""


class SystemDocumentError(Exception):
    """Invalid system document; ``pointer`` locates the offending value."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


def _pointer(parts) -> str:
    return "".join(f"/{p}" for p in parts)


def _check_schema(doc):
    validator = jsonschema.Draft202012Validator(SYSTEM_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [p for p in err.validator_value if p not in err.instance]
        path.append(missing[0])
    raise SystemDocumentError(_pointer(path), err.message)


def system_from_document(doc) -> HybridSystemDef:
    _check_schema(doc)
    n = doc["dim"]
    if doc["num_modes"] != len(doc["modes"]):
        raise SystemDocumentError("/num_modes", f"{doc['num_modes']} but {len(doc['modes'])} modes")
    modes = []
    for j, m in enumerate(doc["modes"]):
        for key in ("vector_field", "reset", "domain_box"):
            if len(m[key]) != n:
                raise SystemDocumentError(f"/modes/{j}/{key}",
                                          f"expected {n} entries, got {len(m[key])}")
        try:
            modes.append(parse_mode(m["vector_field"], m["guard_level"], m["reset"],
                                    m["domain_box"], m.get("collar_depth", 1.0), dim=n))
        except exprlang.ParseError as exc:
            raise SystemDocumentError(f"/modes/{j}", str(exc)) from exc
    frame = None
    if "frame" in doc:
        try:
            fields = tuple(tuple(exprlang.parse(e, n) for e in f) for f in doc["frame"])
        except exprlang.ParseError as exc:
            raise SystemDocumentError("/frame", str(exc)) from exc
        for i, f in enumerate(fields):
            if len(f) != n:
                raise SystemDocumentError(f"/frame/{i}", f"expected {n} entries, got {len(f)}")
        frame = (fields,)
    try:
        return HybridSystemDef(doc["num_modes"], n, tuple(modes), doc.get("period_hint"), frame)
    except ValueError as exc:
        raise SystemDocumentError("", str(exc)) from exc


def load_system(source: str) -> HybridSystemDef:
    """Fixture name or path to a JSON system document."""
    if source in FIXTURES:
        return FIXTURES[source]()
    try:
        doc = json.loads(Path(source).read_text())
    except FileNotFoundError as exc:
        raise SystemDocumentError("", f"no fixture or file named {source!r}") from exc
    except json.JSONDecodeError as exc:
        raise SystemDocumentError("", f"not valid JSON: {exc}") from exc
    return system_from_document(doc)


# --- argument helpers -------------------------------------------------------------------


def _floats(text: str, what: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from exc


def _state(text: str, sysdef: HybridSystemDef, what: str = "--x0") -> HybridState:
    vals = _floats(text, what)
    if len(vals) != sysdef.dim + 1 or vals[0] != int(vals[0]):
        raise UsageError(f"{what}: expected 'mode,x1,...,x{sysdef.dim}', got {text!r}")
    mode = int(vals[0])
    if not 0 <= mode < sysdef.num_modes:
        raise UsageError(f"{what}: mode {mode} out of range")
    return HybridState(mode, vals[1:])


def _section(args, sysdef, cfg):
    if args.section_level is None:
        return default_section(sysdef, cfg)
    mode = args.section_mode
    anchor = sysdef.modes[mode].domain_box.mean(axis=1)
    if getattr(args, "guess", None):
        anchor = _state(args.guess, sysdef, "--guess").x
    return PoincareSection(sysdef, mode, args.section_level, anchor)


def _report(sysdef, args, cfg):
    sec = _section(args, sysdef, cfg)
    guess = _state(args.guess, sysdef, "--guess").x if args.guess else sec.anchor
    cycle = find_limit_cycle(sysdef, sec, guess, cfg)
    return floquet(sysdef, sec, cycle.x_star, cycle.tau, cfg, r=args.r)


def _grid(args, sysdef):
    spec = args.grid
    if spec is None:
        box = sysdef.modes[0].domain_box
        spec = ",".join(["20"] * sysdef.dim) + ":" + ",".join(fmt(v) for v in box.ravel())
    try:
        grid = Grid.parse(spec, mode=args.grid_mode)
    except ValueError as exc:
        raise UsageError(f"--grid: {exc}") from exc
    if len(grid.axes) != sysdef.dim:
        raise UsageError(f"--grid: expected {sysdef.dim} axes")
    return grid


def _emit(text: str, out, written):
    if out is None:
        _sys.stdout.write(text)
    else:
        Path(out).write_text(text)
        written.append(str(out))


def _kv(pairs):
    return "".join(f"{k} = {v}\n" for k, v in pairs)


# --- subcommands ------------------------------------------------------------------------


def cmd_validate(args, sysdef, cfg, written):
    rep = validate_assumptions(sysdef, samples=args.samples, tol=args.tol, seed=args.seed)
    _emit("\n".join(rep.lines()) + "\n", args.out, written)
    return 0 if rep.passed else 1


def cmd_simulate(args, sysdef, cfg, written):
    s = _state(args.x0, sysdef)
    traj = simulate(sysdef, s, args.t_end, args.dt, cfg)
    _emit(traj.to_csv(), args.out, written)
    return 0


def cmd_sigma(args, sysdef, cfg, written):
    s = _state(args.x0, sysdef)
    sigma = time_to_impact(sysdef, s, cfg)
    h = project_to_guard(sysdef, s, cfg)
    _emit(_kv([("sigma", fmt(sigma)), ("h", " ".join(fmt(v) for v in h.x))]), args.out, written)
    return 0


def cmd_gluing(args, sysdef, cfg, written):
    s = _state(args.x0, sysdef)
    image = gluing_map_inverse(sysdef, s, cfg) if args.inverse else gluing_map(sysdef, s, cfg)
    label = "psi_inverse" if args.inverse else "psi"
    _emit(_kv([("mode", image.mode), (label, " ".join(fmt(v) for v in image.x))]), args.out, written)
    return 0


def _frame(args, sysdef):
    if args.frame:
        fields = [f.split(",") for f in args.frame.split(";")]
        try:
            return Frame.from_strings(sysdef, fields, note="command line")
        except exprlang.ParseError as exc:
            raise UsageError(f"--frame: {exc}") from exc
    return Frame.from_system(sysdef)


def cmd_frame_check(args, sysdef, cfg, written):
    rep = check_frame(sysdef, _frame(args, sysdef), samples=args.samples, tol=args.tol,
                      seed=args.seed, cfg=cfg)
    text = _kv([("span_margin", fmt(rep.span_margin)),
                ("tangency_residual", fmt(rep.tangency_residual)),
                ("bracket_residual", fmt(rep.bracket_residual)),
                ("spans_guard", str(rep.spans_guard).lower()),
                ("commutes", str(rep.commutes).lower()),
                ("verdict", "pass" if rep.passed else "fail")])
    _emit(text, args.out, written)
    return 0 if rep.passed else 1


def cmd_poincare(args, sysdef, cfg, written):
    p = _state(args.p0, sysdef, "--p0")
    args.section_mode = p.mode
    if args.section_level is None:
        raise UsageError("poincare needs --section-level")
    sec = PoincareSection(sysdef, p.mode, args.section_level, p.x)
    lines = ["iterate," + ",".join(f"x{i + 1}" for i in range(sysdef.dim))]
    lines.append("0," + ",".join(fmt(v) for v in p.x))
    for k in range(1, args.iters + 1):
        p = poincare_map(sysdef, sec, p, cfg)
        lines.append(f"{k}," + ",".join(fmt(v) for v in p.x))
    _emit("\n".join(lines) + "\n", args.out, written)
    return 0


def cmd_floquet(args, sysdef, cfg, written):
    _emit(_report(sysdef, args, cfg).to_text(), args.out, written)
    return 0


def _observable(args, sysdef):
    try:
        return ObservableFn.from_strings(sysdef, args.re, args.im)
    except exprlang.ParseError as exc:
        raise UsageError(f"observable: {exc}") from exc


def cmd_eigfn(args, sysdef, cfg, written):
    rep = _report(sysdef, args, cfg)
    grid = _grid(args, sysdef)
    asym = Asymptotics(sysdef, rep, cfg)
    if args.kind == "phase":
        eig = phase_eigenfunction(sysdef, rep, grid, cfg, threads=args.threads, asym=asym)
    else:
        eig = amplitude_eigenfunction(sysdef, rep, grid, cfg, threads=args.threads, asym=asym)
    _emit(eig.to_csv(), args.out, written)
    _sys.stderr.write(f"eigenvalue = {eig.eigenvalue!r}\n")
    return 0


def cmd_check_observable(args, sysdef, cfg, written):
    f = _observable(args, sysdef)
    rep = check_membership(sysdef, f, _frame(args, sysdef), args.k, guard_samples=args.samples,
                           tol=args.tol, seed=args.seed, cfg=cfg)
    _emit(rep.to_text(), args.out, written)
    if args.out is not None:
        _sys.stdout.write(_kv([("max_residual", fmt(rep.max_residual)),
                               ("verdict", "pass" if rep.passed else "fail")]))
    return 0 if rep.passed else 1


def cmd_seam_scan(args, sysdef, cfg, written):
    f = _observable(args, sysdef)
    chart = build_collar_chart(sysdef, args.mode, cfg=cfg)
    rep = seam_smoothness_scan(sysdef, f, chart, args.k, tol=args.tol, samples=args.samples,
                               seed=args.seed)
    _emit(rep.to_text(), args.out, written)
    if args.out is not None:
        _sys.stdout.write(_kv([("max_jump", fmt(rep.max_jump)),
                               ("verdict", "pass" if rep.passed else "fail")]))
    return 0 if rep.passed else 1


def cmd_embed(args, sysdef, cfg, written):
    rep = _report(sysdef, args, cfg)
    grid = _grid(args, sysdef)
    asym = Asymptotics(sysdef, rep, cfg)
    phase = phase_eigenfunction(sysdef, rep, grid, cfg, threads=args.threads, asym=asym)
    amps = [amplitude_eigenfunction(sysdef, rep, grid, cfg, index=i, threads=args.threads,
                                    asym=asym if i == 0 else None)
            for i in range(sysdef.dim - 1)]
    emb = build_embedding(sysdef, rep, [phase, *amps], cfg)
    fractions = _floats(args.t_checks, "--t-checks")
    worst = 0.0
    for s in grid.states():
        e = emb(s)
        for frac in fractions:
            t = frac * rep.tau
            err = np.linalg.norm(emb(hybrid_flow(sysdef, s, t, cfg)) - emb.propagate(e, t))
            worst = max(worst, float(err / (1.0 + np.linalg.norm(e))))
    lines = ["A = " + "; ".join(" ".join(fmt(v) for v in row) for row in emb.A),
             f"max_relative_error = {fmt(worst)}",
             f"tolerance = {fmt(args.tol)}",
             f"verdict = {'pass' if worst <= args.tol else 'fail'}"]
    _emit("\n".join(lines) + "\n", args.out, written)
    return 0 if worst <= args.tol else 1


# --- parser and dispatch -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridkoopman", description=__doc__)
    p.add_argument("--system", default="paper-example", help="fixture name or JSON document")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--rel-tol", type=float, default=DEFAULT_CONFIG.rel_tol)
    p.add_argument("--abs-tol", type=float, default=DEFAULT_CONFIG.abs_tol)
    p.add_argument("--max-time", type=float, default=DEFAULT_CONFIG.max_time)
    p.add_argument("--manifest", default=None, help="manifest path (default: beside --out)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--out", default=None)
        c.set_defaults(func=func)
        return c

    def section_opts(c):
        c.add_argument("--section-level", default=None)
        c.add_argument("--section-mode", type=int, default=0)
        c.add_argument("--guess", default=None, help="'mode,x1,...' near the cycle")
        c.add_argument("--r", type=int, default=2)

    def observable_opts(c):
        c.add_argument("--re", required=True)
        c.add_argument("--im", default="0")
        c.add_argument("--k", type=int, default=1)
        c.add_argument("--samples", type=int, default=50)

    c = command("validate", cmd_validate, "check the standing assumptions")
    c.add_argument("--samples", type=int, default=100)
    c.add_argument("--tol", type=float, default=1e-8)

    c = command("simulate", cmd_simulate, "sampled hybrid execution as CSV")
    c.add_argument("--x0", required=True)
    c.add_argument("--t-end", type=float, required=True)
    c.add_argument("--dt", type=float, default=0.01)

    c = command("sigma", cmd_sigma, "time to impact and guard projection")
    c.add_argument("--x0", required=True)

    c = command("gluing", cmd_gluing, "gluing map (or its inverse)")
    c.add_argument("--x0", required=True)
    c.add_argument("--inverse", action="store_true")

    c = command("frame-check", cmd_frame_check, "verify a commuting frame")
    c.add_argument("--frame", default=None, help="fields separated by ';', components by ','")
    c.add_argument("--samples", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-6)

    c = command("poincare", cmd_poincare, "iterate the Poincare map")
    c.add_argument("--section-level", default=None)
    c.add_argument("--p0", required=True)
    c.add_argument("--iters", type=int, default=1)

    c = command("floquet", cmd_floquet, "period, multipliers and exponents")
    section_opts(c)

    c = command("eigfn", cmd_eigfn, "tabulate a principal eigenfunction")
    c.add_argument("kind", choices=["phase", "amplitude"])
    section_opts(c)
    c.add_argument("--grid", default=None, help="'nx,ny:lo1,hi1,lo2,hi2'")
    c.add_argument("--grid-mode", type=int, default=0)

    c = command("check-observable", cmd_check_observable, "seam membership of an observable")
    observable_opts(c)
    c.add_argument("--frame", default=None)
    c.add_argument("--tol", type=float, default=None)

    c = command("seam-scan", cmd_seam_scan, "derivative jumps across the seam")
    observable_opts(c)
    c.set_defaults(samples=10)
    c.add_argument("--mode", type=int, default=0)
    c.add_argument("--tol", type=float, default=None)

    c = command("embed", cmd_embed, "linear embedding check")
    section_opts(c)
    c.add_argument("--grid", default=None)
    c.add_argument("--grid-mode", type=int, default=0)
    c.add_argument("--t-checks", default="0.25,0.5,1", help="fractions of the period")
    c.add_argument("--tol", type=float, default=1e-5)

    c = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    c.add_argument("manifest_path")
    c.set_defaults(func=None)
    return p


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_manifest(args, argv, code, started, elapsed, written):
    if args.manifest:
        path = Path(args.manifest)
    elif getattr(args, "out", None):
        path = Path(str(args.out) + ".manifest.json")
    else:
        path = Path(f"{args.command}_manifest.json")
    config = {k: v for k, v in vars(args).items() if k not in ("func", "manifest")}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "inputs": {"system": args.system},
        "outputs": written,
        "seed": args.seed,
        "exit_code": code,
        "started": started,
        "wall_clock_seconds": elapsed,
        "version": _version(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def run(argv=None) -> int:
    """Execute one command; returns the process exit code."""
    argv = list(_sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _sys.stderr.write(f"usage error: {exc}\n")
        return 2
    if args.command == "replay":
        try:
            recorded = json.loads(Path(args.manifest_path).read_text())["argv"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            _sys.stderr.write(f"usage error: unreadable manifest: {exc}\n")
            return 2
        return run(recorded)

    started = datetime.now(timezone.utc).isoformat()
    clock = time.perf_counter()
    written = []
    try:
        sysdef = load_system(args.system)
        cfg = IntegratorConfig(rel_tol=args.rel_tol, abs_tol=args.abs_tol, max_time=args.max_time)
        code = args.func(args, sysdef, cfg, written)
    except UsageError as exc:
        _sys.stderr.write(f"usage error: {exc}\n")
        code = 2
    except SystemDocumentError as exc:
        _sys.stderr.write(f"invalid system document: {exc}\n")
        code = 1
    except (HybridError, SpectralError, exprlang.ExprError, ValueError) as exc:
        _sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        code = 1
    _write_manifest(args, argv, code, started, time.perf_counter() - clock, written)
    return code


def main():
    raise SystemExit(run())
