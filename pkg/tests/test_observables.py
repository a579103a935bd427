import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridkoopman.core import HybridState
from hybridkoopman.flow import hybrid_flow
from hybridkoopman.gluing import Frame, build_collar_chart
from hybridkoopman.observables import (
    ObservableFn,
    check_membership,
    lie_derivative,
    multi_indices,
    quotient_consistency,
    seam_smoothness_scan,
)

import oracles

NU = "x2 - x1^2/3"
PHASE = ("cos(2*pi*ln(x1)/ln(2))", "sin(2*pi*ln(x1)/ln(2))")
BUMP1 = "(x1 - 1)*(x1 - 2)"          # continuous, kinked
BUMP2 = "((x1 - 1)*(x1 - 2))^2"      # C^1, jump in second derivative


@pytest.fixture(scope="module")
def frame(system):
    return Frame.from_system(system)


def _obs(system, re, im="0"):
    return ObservableFn.from_strings(system, re, im)


def test_multi_indices_are_lexicographic():
    assert multi_indices(2, 1) == [(0, 0), (0, 1), (1, 0)]
    assert multi_indices(2, 2) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)]


def test_lie_derivative_of_amplitude_is_eigen_relation(system):
    f = _obs(system, NU)
    field = system.modes[0].field
    s = HybridState(0, np.array([1.5, 1.0]))
    assert lie_derivative(system, f, [field], s) == pytest.approx(-2 * f(s), abs=1e-9)
    assert lie_derivative(system, f, [field, field], s) == pytest.approx(4 * f(s), abs=1e-6)


def test_lie_derivative_order_limit(system):
    f = _obs(system, NU)
    field = system.modes[0].field
    with pytest.raises(ValueError):
        lie_derivative(system, f, [field] * 3, HybridState(0, np.array([1.5, 1.0])))


@pytest.mark.parametrize("k", [0, 1, 2])
def test_eigenfunctions_are_members(system, frame, k):
    for f in (_obs(system, NU), _obs(system, *PHASE)):
        rep = check_membership(system, f, frame, k, guard_samples=8 if k == 2 else 30)
        assert rep.passed, rep.to_text()


def test_coordinate_is_not_continuous(system, frame):
    rep = check_membership(system, _obs(system, "x1"), frame, 0, guard_samples=10)
    assert not rep.passed
    assert rep.max_residual == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("expr, smooth_to", [(BUMP1, 0), (BUMP2, 1), (NU, 2)])
def test_membership_levels_nest(system, frame, expr, smooth_to):
    f = _obs(system, expr)
    verdicts = [check_membership(system, f, frame, k, guard_samples=6).passed for k in (0, 1, 2)]
    assert verdicts == [k <= smooth_to for k in (0, 1, 2)]


def test_constant_passes_everywhere(system, frame):
    f = ObservableFn.constant(system, 2 - 1j)
    assert all(check_membership(system, f, frame, k, guard_samples=5).passed for k in (0, 1, 2))


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 1.0))
def test_zero_order_agrees_with_quotient_consistency(system, frame, a, b, c):
    # a*x1 + b*x2 + c*phi_nu is glued continuously only when a = b = 0
    f = _obs(system, f"{a!r}*x1 + {b!r}*x2 + {c!r}*({NU})")
    rep = check_membership(system, f, frame, 0, guard_samples=10, tol=1e-8)
    assert rep.passed == quotient_consistency(system, f, guard_samples=10, tol=1e-8 * (1 + rep.max_lhs))


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_members_form_a_vector_space(system, frame, a, b):
    re = f"{a!r}*({NU}) + {b!r}*{PHASE[0]}"
    im = f"{b!r}*{PHASE[1]}"
    assert check_membership(system, _obs(system, re, im), frame, 1, guard_samples=10).passed


def test_report_csv_and_text(system, frame):
    rep = check_membership(system, _obs(system, NU), frame, 1, guard_samples=3)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "sample_index,l1,l2,lhs,rhs,residual"
    assert len(lines) == 1 + 3 * 3
    assert "verdict = pass" in rep.to_text()
    assert len(rep.sample_residuals()) == 3


def test_explicit_guard_points(system, frame):
    pts = [(0, [1.0, 0.2]), (0, [1.0, 0.7])]
    rep = check_membership(system, _obs(system, NU), frame, 1, guard_samples=pts)
    assert rep.passed and len(rep.sample_residuals()) == 2


@pytest.fixture(scope="module")
def flowed_grid(system):
    axes = (np.linspace(1.0, 2.0, 161), np.linspace(0.05, 3.0, 6))
    pts = [[hybrid_flow(system, HybridState(0, np.array([a, b])), 0.3).x for b in axes[1]]
           for a in axes[0]]
    return axes, pts


@pytest.mark.parametrize("closed_form", [oracles.phi_nu, oracles.phi_iomega])
def test_flowed_eigenfunction_stays_a_member(system, frame, flowed_grid, closed_form):
    axes, pts = flowed_grid
    values = np.array([[closed_form(y) for y in row] for row in pts])
    f = ObservableFn.from_grid(system, [axes], [values])
    guard = [(0, [1.0, c]) for c in np.linspace(0.1, 1.0, 8)]
    rep = check_membership(system, f, frame, 1, guard_samples=guard)
    assert rep.passed, rep.to_text()


def test_grid_observable_reproduces_quadratics(system):
    axes = (np.linspace(1, 2, 7), np.linspace(0, 3, 5))
    a, b = np.meshgrid(*axes, indexing="ij")
    f = ObservableFn.from_grid(system, [axes], [b - a ** 2 / 3])
    x = np.array([1.37, 2.21])
    assert f(HybridState(0, x)).real == pytest.approx(oracles.phi_nu(x), abs=1e-12)
    assert f.tol_factor == 10.0


@pytest.fixture(scope="module")
def chart(system):
    return build_collar_chart(system, 0)


def test_scan_passes_for_eigenfunction(system, chart):
    rep = seam_smoothness_scan(system, _obs(system, NU), chart, 2, samples=4)
    assert rep.passed, rep.to_text()


@pytest.mark.parametrize("expr, k", [(NU, 1), (BUMP1, 1), (BUMP2, 2), ("x1", 0)])
def test_scan_agrees_with_membership(system, frame, chart, expr, k):
    f = _obs(system, expr)
    scan = seam_smoothness_scan(system, f, chart, k, samples=4)
    member = check_membership(system, f, frame, k, guard_samples=4)
    assert scan.passed == member.passed


def test_scan_locates_the_kink(system, chart):
    rep = seam_smoothness_scan(system, _obs(system, BUMP1), chart, 1, samples=3)
    assert rep.max_jump_of_order(0) < 1e-6
    # d/dy1 along the flow: -x1 (2 x1 - 3) is 1 at x1 = 1 and -2 at x1 = 2
    assert rep.max_jump_of_order(1) == pytest.approx(3.0, rel=1e-3)


def test_scan_csv_header(system, chart):
    rep = seam_smoothness_scan(system, _obs(system, NU), chart, 1, grid=[[0.5]])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "grid_index,d1,d2,left,right,jump"
    assert len(lines) == 4


def test_scan_order_validated(system, chart):
    with pytest.raises(ValueError):
        seam_smoothness_scan(system, _obs(system, NU), chart, 3)
