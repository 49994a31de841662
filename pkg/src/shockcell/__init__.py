"""Design and homogenization of flat-response shock-absorbing cells."""

__version__ = "0.1.0"

from .topology import (
    CellTopology, ShapeParams, TopologyError,
    load_topology, expand_symmetry, bundled_topology, bundled_names,
    default_params, default_bounds,
)
from .implicit import InflatedField, implicit_field
from .mesher import PeriodicMesh, MeshError, inflate, solid_cell_mesh, replicate, dump_mesh
from .fem import (
    Material, PeriodicDofMap, HomogState, InadmissibleState,
    build_dof_map, neo_hookean, elastic_energy, effective_stress,
    effective_stress_gradient, plane_strain_uniaxial_modulus,
)
from .contact import (
    TiledSurface, ContactError, build_tiling, null_tiling, tiled_displacement,
    barrier_energy, surfaces_intersect, step_limit,
)
from .solver import (
    SolveSettings, SolverError, CurveSample, StressStrainCurve,
    force_spd, newton_solve, constrained_newton_solve, incremental_solve,
    solve_curve, homogenize_tiled, rotate_rest, default_schedule,
    load_curve_csv, total_energy,
)
from .shapeopt import (
    DEFAULT_MATERIAL, ObjectiveSpec, OptResult, objective, adjoint_gradient,
    optimize, dense_verify, extend_range,
)
from .family import (
    FamilyEntry, FamilyFailure, FamilyDatabase, CoverageCell, CoverageMap,
    sweep, coverage, select_material, required_thickness, alpha_for,
    IdealCurve, ideal_curve,
)
from .config import ConfigError, RunConfig, load_config
