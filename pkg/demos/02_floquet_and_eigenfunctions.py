"""
Limit cycle, Floquet data and principal eigenfunctions
======================================================

The section ``x1 = 2`` sees the return map ``c -> c/4 + 1``. Its fixed point
``c = 4/3`` is where the cycle ``x2 = x1^2/3`` crosses the section.
"""

import numpy as np

from hybridkoopman import (
    Asymptotics,
    Grid,
    PoincareSection,
    amplitude_eigenfunction,
    build_embedding,
    find_limit_cycle,
    floquet,
    hybrid_flow,
    paper_example,
    phase_eigenfunction,
)

system = paper_example()
section = PoincareSection(system, 0, "x1 - 2", [2.0, 2.0])

cycle = find_limit_cycle(system, section, [2.0, 10.0])
report = floquet(system, section, cycle.x_star, cycle.tau)
print(report.to_text())

# Both eigenfunctions come from one section-return run per grid point.
grid = Grid.parse("8,8:1,2,0.1,2")
asym = Asymptotics(system, report)
amp = amplitude_eigenfunction(system, report, grid, asym=asym)
phase = phase_eigenfunction(system, report, grid, asym=asym)

x1, x2 = np.array([s.x for s in grid.states()]).T
print("amplitude vs x2 - x1^2/3:", np.max(np.abs(amp.values.real - (x2 - x1 ** 2 / 3))))
print("phase vs exp(-2 pi i log2 x1):",
      np.max(np.abs(phase.values - np.exp(-2j * np.pi * np.log2(x1)))))
print("phase eigenvalue:", phase.eigenvalue)

# Stacking Re/Im of the phase with the amplitude linearises the flow.
emb = build_embedding(system, report, [phase, amp])
print("generator A =\n", emb.A)
s = grid.states()[17]
t = 0.4
print("E(phi_t x) =", emb(hybrid_flow(system, s, t)))
print("e^{At} E(x) =", emb.propagate(emb(s), t))
