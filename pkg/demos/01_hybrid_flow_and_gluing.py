"""
Executions, time to impact and the gluing map
=============================================

The built-in planar system flows by ``(-x1, -2 x2)`` on ``1 <= x1 <= 2``.
When ``x1`` reaches 1 the state jumps to ``(2, x2 + 1)``.
"""

import math

import numpy as np

from hybridkoopman import (
    HybridState,
    gluing_map,
    gluing_map_inverse,
    paper_example,
    simulate,
    time_to_impact,
)

system = paper_example()
start = HybridState(0, np.array([2.0, 2.0]))

# Simulate three periods. Every jump is recorded with its exact pre- and
# post-reset states, and the trajectory prints as CSV with 17 digits.
traj = simulate(system, start, 3 * math.log(2), 0.1)
for jump in traj.jumps:
    print(f"jump at t={jump.t:.12f}: {jump.pre.x} -> {jump.post.x}")
print(traj.to_csv().splitlines()[0])

# Time to impact is ln x1 for this flow.
print("sigma(1.5, 2) =", time_to_impact(system, HybridState(0, np.array([1.5, 2.0]))),
      "vs ln 1.5 =", math.log(1.5))

# The gluing map flows to the guard, resets, and flows on for the same
# time. In closed form it is (2/x1, x2/x1^4 + 1/x1^2).
x = HybridState(0, np.array([1.5, 0.9]))
w = gluing_map(system, x)
print("Psi(1.5, 0.9) =", w.x, "closed form:", [2 / 1.5, 0.9 / 1.5 ** 4 + 1 / 1.5 ** 2])
print("Psi^-1(Psi(x)) =", gluing_map_inverse(system, w).x)
