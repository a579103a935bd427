"""Acceptance criteria for the example system, one test per criterion.

Each test prints a single PASS/FAIL line with the measured quantity, then
asserts. Run on its own with ``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from hybridkoopman import exprlang
from hybridkoopman.cli import run
from hybridkoopman.core import HybridState, paper_example, sample_seam
from hybridkoopman.flow import hybrid_flow, integrate_mode, project_to_guard, time_to_impact
from hybridkoopman.gluing import Frame, build_collar_chart, gluing_map, pushforward
from hybridkoopman.observables import ObservableFn, check_membership, seam_smoothness_scan
from hybridkoopman.spectral import (
    Asymptotics,
    Grid,
    PoincareSection,
    amplitude_eigenfunction,
    build_embedding,
    eigen_residual,
    find_limit_cycle,
    floquet,
    phase_eigenfunction,
)

import oracles

GRID = "20,20:1,2,0.1,2"
NU_EXPR = "x2 - x1^2/3"
PHASE_EXPR = ("cos(2*pi*ln(x1)/ln(2))", "sin(2*pi*ln(x1)/ln(2))")


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def system():
    return paper_example()


@pytest.fixture(scope="module")
def floquet_cli(tmp_path_factory):
    out = tmp_path_factory.mktemp("floquet") / "floquet.txt"
    start = time.perf_counter()
    code = run(["--manifest", str(out) + ".manifest.json", "floquet", "--out", str(out)])
    elapsed = time.perf_counter() - start
    fields = dict(line.split(" = ", 1) for line in out.read_text().splitlines())
    return code, fields, elapsed


def _spectral_run(system, level, anchor):
    start = time.perf_counter()
    sec = PoincareSection(system, 0, level, anchor)
    cycle = find_limit_cycle(system, sec, anchor)
    report = floquet(system, sec, cycle.x_star, cycle.tau)
    grid = Grid.parse(GRID)
    asym = Asymptotics(system, report)
    amp = amplitude_eigenfunction(system, report, grid, asym=asym)
    amp_seconds = time.perf_counter() - start
    phase = phase_eigenfunction(system, report, grid, asym=asym)
    return report, grid, amp, phase, amp_seconds


@pytest.fixture(scope="module")
def primary(system):
    return _spectral_run(system, "x1 - 2", [2.0, 2.0])


@pytest.fixture(scope="module")
def secondary(system):
    return _spectral_run(system, "x1 - 1.5", [1.5, 1.0])


def collar_points(system, n, seed):
    """Guard samples flowed backward by random times that keep them in the box."""
    rng = np.random.default_rng(seed)
    out = []
    for z in sample_seam(system, 0, n, seed=seed):
        limit = min(math.log(1.98), 0.5 * math.log(9.8 / z[1]))
        t = rng.uniform(0.02, 1.0) * limit
        out.append(integrate_mode(system, HybridState(0, z), -t, strict=False))
    return out


def test_criterion_01_period(capsys, floquet_cli):
    code, fields, elapsed = floquet_cli
    err = abs(float(fields["tau"]) - math.log(2))
    verdict(capsys, 1, "period", code == 0 and err <= 1e-6 and elapsed < 1.0,
            f"|tau - ln 2| = {err:.2e} (tol 1e-6), {elapsed:.2f} s (limit 1 s)")


def test_criterion_02_multiplier(capsys, floquet_cli):
    code, fields, elapsed = floquet_cli
    err = abs(complex(fields["rho_2"]) - 0.25)
    verdict(capsys, 2, "Floquet multiplier", code == 0 and err <= 1e-4 and elapsed < 1.0,
            f"|rho - 1/4| = {err:.2e} (tol 1e-4), {elapsed:.2f} s (limit 1 s)")


def test_criterion_03_exponent(capsys, floquet_cli):
    _, fields, _ = floquet_cli
    err = abs(complex(fields["nu_2"]) + 2.0)
    verdict(capsys, 3, "Floquet exponent", err <= 1e-3, f"|nu + 2| = {err:.2e} (tol 1e-3)")


def test_criterion_04_amplitude(capsys, primary):
    _, grid, amp, _, seconds = primary
    exact = np.array([oracles.phi_nu(s.x) for s in grid.states()])
    keep = np.abs(exact) >= 0.05
    c = np.vdot(exact[keep], amp.values[keep]) / np.vdot(exact[keep], exact[keep])
    rel = np.max(np.abs(amp.values[keep] - c * exact[keep]) / np.abs(c * exact[keep]))
    verdict(capsys, 4, "amplitude eigenfunction", rel <= 1e-3 and seconds < 60.0,
            f"max relative error {rel:.2e} (tol 1e-3), c = {c.real:.6g}, "
            f"{seconds:.1f} s (limit 60 s)")


def test_criterion_05_phase(capsys, primary):
    _, grid, _, phase, _ = primary
    iso = np.array([2 * np.pi * np.log(s.x[0]) / math.log(2) for s in grid.states()])
    errs = [np.max(np.abs(np.angle(phase.values * np.exp(-1j * sign * iso)))) for sign in (1, -1)]
    sign = 1 if errs[0] <= errs[1] else -1
    err = min(errs)
    verdict(capsys, 5, "phase eigenfunction", err <= 1e-3,
            f"max |arg error| = {err:.2e} rad (tol 1e-3) with sign {sign:+d}")


def test_criterion_06_eigen_relation(capsys, system, primary):
    report, _, amp, phase, _ = primary
    horizon = 2 * oracles.TAU
    pts = Grid.parse("10,10:1,2,0.1,2").states()
    nu = ObservableFn.from_strings(system, NU_EXPR)
    om = ObservableFn.from_strings(system, *PHASE_EXPR)
    analytic = max(eigen_residual(system, nu, -2.0, pts, horizon),
                   eigen_residual(system, om, -1j * oracles.OMEGA, pts, horizon))
    computed = max(eigen_residual(system, amp, amp.eigenvalue, pts, 2 * report.tau),
                   eigen_residual(system, phase, phase.eigenvalue, pts, 2 * report.tau))
    verdict(capsys, 6, "eigen-relation residuals", analytic <= 1e-6 and computed <= 1e-3,
            f"analytic {analytic:.2e} (tol 1e-6), computed {computed:.2e} (tol 1e-3)")


def test_criterion_07_membership(capsys, system):
    frame = Frame.from_system(system)
    reps = [check_membership(system, ObservableFn.from_strings(system, *expr), frame, 1,
                             guard_samples=50)
            for expr in ((NU_EXPR,), PHASE_EXPR)]
    bad = check_membership(system, ObservableFn.from_strings(system, "x1"), frame, 0,
                           guard_samples=50)
    n = min(len(r.sample_residuals()) for r in reps)
    worst_rel = max(r.max_residual / (1 + r.max_lhs) for r in reps)
    weakest = min(bad.sample_residuals())
    ok = all(r.passed for r in reps) and worst_rel <= 1e-5 and n >= 50 and not bad.passed \
        and weakest >= 0.9 and len(bad.sample_residuals()) >= 50
    verdict(capsys, 7, "membership discrimination", ok,
            f"eigenfunctions k=1 relative residual {worst_rel:.2e} at {n} samples; "
            f"x1 k=0 smallest residual {weakest:.3f}")


def test_criterion_08_collar_identities(capsys, system):
    field = system.modes[0].field
    rng = np.random.default_rng(8)
    pts = collar_points(system, 100, seed=8)
    d_sigma = d_h = push = equi = 0.0
    for s in pts:
        x = s.x
        ds = exprlang.directional_derivative_fn(
            lambda y: time_to_impact(system, HybridState(0, y)), x, field(x))
        d_sigma = max(d_sigma, abs(ds + 1.0))
        dh = exprlang.directional_derivative_fn(
            lambda y: project_to_guard(system, HybridState(0, y)).x, x, field(x))
        d_h = max(d_h, float(np.linalg.norm(dh)))
        w = gluing_map(system, s)
        pf = pushforward(system, "gluing", field, w, preimage=s)
        push = max(push, float(np.linalg.norm(pf + field(w.x))))
        t = rng.uniform(0.0, min(math.log(1.98 / x[0]), 0.5 * math.log(9.8 / x[1])))
        lhs = integrate_mode(system, w, t, strict=False).x
        rhs = gluing_map(system, integrate_mode(system, s, -t, strict=False)).x
        equi = max(equi, float(np.linalg.norm(lhs - rhs)))
    ok = len(pts) == 100 and d_sigma <= 1e-6 and d_h <= 1e-6 and push <= 1e-6 and equi <= 1e-7
    verdict(capsys, 8, "collar identities", ok,
            f"|dsigma(F)+1| {d_sigma:.1e}, |Dh(F)| {d_h:.1e}, |DPsi F + F| {push:.1e}, "
            f"equivariance {equi:.1e} over {len(pts)} points")


def test_criterion_09_pushforward(capsys, system):
    f2 = lambda y: np.array([0.0, y[1]])  # noqa: E731
    worst = 0.0
    pts = collar_points(system, 50, seed=9)
    for x in pts:
        w = gluing_map(system, x)
        pf = pushforward(system, "gluing", f2, w, preimage=x)
        worst = max(worst, float(np.linalg.norm(pf - oracles.pushed_f2(w.x))))
    verdict(capsys, 9, "pushforward of x2 d/dx2", len(pts) == 50 and worst <= 1e-5,
            f"max error {worst:.2e} (tol 1e-5) at {len(pts)} points")


def test_criterion_10_semigroup(capsys, system):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        s = HybridState(0, np.array([rng.uniform(1.0, 2.0), rng.uniform(0.01, 5.0)]))
        t, u = rng.uniform(0.0, 2.0, size=2)
        a = hybrid_flow(system, hybrid_flow(system, s, t), u).x
        b = hybrid_flow(system, s, t + u).x
        worst = max(worst, float(np.linalg.norm(a - b) / (1.0 + np.linalg.norm(b))))
    verdict(capsys, 10, "semigroup", worst <= 1e-8, f"max relative error {worst:.2e} (tol 1e-8)")


def test_criterion_11_seam_scan(capsys, system):
    chart = build_collar_chart(system, 0)
    good = seam_smoothness_scan(system, ObservableFn.from_strings(system, NU_EXPR), chart, 1)
    bad = seam_smoothness_scan(system, ObservableFn.from_strings(system, "x1"), chart, 1)
    jump = bad.max_jump_of_order(0)
    ok = good.passed and good.max_jump <= 1e-4 and not bad.passed and jump >= 0.99
    verdict(capsys, 11, "seam-smoothness scan", ok,
            f"phi_nu max jump {good.max_jump:.2e} (tol 1e-4); x1 value jump {jump:.3f}")


def test_criterion_12_embedding(capsys, system, primary):
    report, grid, amp, phase, _ = primary
    emb = build_embedding(system, report, [phase, amp])
    worst = 0.0
    for s in grid.states():
        e = emb(s)
        for t in (report.tau / 4, report.tau / 2, report.tau):
            err = np.linalg.norm(emb(hybrid_flow(system, s, t)) - emb.propagate(e, t))
            worst = max(worst, float(err / (1.0 + np.linalg.norm(e))))
    verdict(capsys, 12, "linear embedding", worst <= 1e-5,
            f"max relative error {worst:.2e} (tol 1e-5) over {len(grid.states())} grid points")


def test_criterion_13_uniqueness(capsys, primary, secondary):
    devs = []
    for a, b in ((primary[2], secondary[2]), (primary[3], secondary[3])):
        c = np.vdot(b.values, a.values) / np.vdot(b.values, b.values)
        devs.append(float(np.max(np.abs(a.values - c * b.values)) / np.max(np.abs(a.values))))
    verdict(capsys, 13, "uniqueness up to a scalar", max(devs) <= 1e-3,
            f"amplitude deviation {devs[0]:.2e}, phase deviation {devs[1]:.2e} (tol 1e-3)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
