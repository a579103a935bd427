"""
Which observables are smooth across the seam?
=============================================

An observable descends to the glued state space when its values and Lie
derivatives agree at each guard point and at its reset image.
"""

from hybridkoopman import (
    Frame,
    ObservableFn,
    build_collar_chart,
    check_membership,
    paper_example,
    seam_smoothness_scan,
)

system = paper_example()
frame = Frame.from_system(system)
chart = build_collar_chart(system, 0)

candidates = {
    "x1": "x1",
    "(x1-1)(x1-2)": "(x1 - 1)*(x1 - 2)",
    "((x1-1)(x1-2))^2": "((x1 - 1)*(x1 - 2))^2",
    "x2 - x1^2/3": "x2 - x1^2/3",
}

for name, expr in candidates.items():
    f = ObservableFn.from_strings(system, expr)
    levels = [k for k in (0, 1, 2) if check_membership(system, f, frame, k, guard_samples=10).passed]
    smooth = max(levels) if levels else "none"
    scan = seam_smoothness_scan(system, f, chart, 1, samples=5)
    print(f"{name:>18}: smooth up to k={smooth}; scan max jump (k<=1) {scan.max_jump:.3g}")
