"""Numerical laboratory for quantum dynamics constrained to a surface.

Tube-coordinate geometry, gauge and scaling transforms, the scaled tube
Hamiltonian and its effective surface-plus-oscillator limit, unitary
propagation, and the convergence experiments tying them together.
"""

from . import errors
from .geometry import (
    CallableChart,
    CurvatureData,
    FlatChart,
    PerturbedTorus,
    SurfaceChart,
    Torus,
    TubeMetric,
    curvature_potential,
    density_factors,
    expansion_order_fit,
    first_fundamental_form,
    make_chart,
    shape_operator,
    tube_metric,
)
from .fields import (
    GaugeData,
    NormalTaylor,
    PotentialSet,
    build_potentials,
    gauge_transform,
    hypothesis_audit,
    normal_taylor,
)
from .operators import (
    DiscreteOperator,
    GridSpec,
    WaveFunction,
    apply_transforms,
    assemble_effective,
    assemble_kinetic_bound,
    assemble_scaled,
    assemble_unscaled,
    dump_operator,
    hermiticity_defect,
    inverse_transforms,
    lowest_eigenvalues,
    remainder,
)
from .evolution import (
    ConvergenceTable,
    PropagatorConfig,
    Trajectory,
    convergence_experiment,
    diagnostics,
    factorization_check,
    propagate,
)
from .harness import ResultBundle, RunConfig, emit, run, spectrum

__version__ = "0.1.0"
