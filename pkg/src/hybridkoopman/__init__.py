"""Koopman spectral analysis of hybrid systems with attracting hybrid limit cycles."""

from .core import (
    HybridState,
    HybridSystemDef,
    ModeDef,
    apply_reset,
    eval_vector_field,
    guard_distance,
    paper_example,
    parse_mode,
    validate_assumptions,
)
from .flow import (
    IntegratorConfig,
    Trajectory,
    hybrid_flow,
    integrate_mode,
    project_to_guard,
    simulate,
    time_to_impact,
)
from .gluing import (
    Frame,
    build_collar_chart,
    check_frame,
    gluing_map,
    gluing_map_inverse,
    pushforward,
)
from .observables import (
    ObservableFn,
    check_membership,
    lie_derivative,
    quotient_consistency,
    seam_smoothness_scan,
)
from .spectral import (
    Asymptotics,
    EigenfunctionGrid,
    Grid,
    PoincareSection,
    amplitude_eigenfunction,
    analyse,
    build_embedding,
    default_section,
    eigen_residual,
    find_limit_cycle,
    floquet,
    phase_eigenfunction,
    poincare_map,
)

__all__ = [name for name in dir() if not name.startswith("_")]
