"""Particle-based mesoscale fluid simulator with rank-parallel stepping.

The collision engine implements stochastic rotation dynamics on a
cubic cell grid with a randomly shifted collision lattice.  Domain
decomposition supports two interchangeable communication schemes:
full particle migration into shifted-grid owners, and a halo scheme
that reduces partial per-cell moments instead of moving particles.
"""

from .collision import (
    CellMomentField,
    GridShift,
    LinkedCellList,
    RotationPlan,
    accumulate_cell_moments,
    build_linked_cells,
    build_rotation_plan,
    cell_momentum_drift,
    finalize_com,
    rotate_cell_velocities,
    rotate_velocities,
    sample_grid_shift,
    sample_rotation_axes,
    sample_rotation_axis,
    segment_moments,
)
from .decomposition import (
    CODE_STAY,
    DomainGrid,
    build_decomposition,
    classify_base3,
    code_digits,
    neighbor_rank,
    reflect_code,
)
from .engine import (
    BACKEND_PROCESS,
    BACKEND_SEQUENTIAL,
    BACKEND_SERIAL,
    POLICY_IMMEDIATE,
    POLICY_LAZY,
    ConservationReport,
    EquivalenceReport,
    Simulation,
    conservation_report,
    equivalence_check,
    serial_collision_step,
    step_parallel,
    step_serial,
)
from .errors import BinningError, ConfigError, MpcdError, TopologyError
from .exchange import (
    CommRecord,
    HaloPlan,
    Message,
    Transport,
    build_halo_plan,
    comm_stats,
    halo_exchange_particles,
    halo_reduce_scatter_moments,
    migrate_particles,
)
from .params import SCHEME_HALO, SCHEME_MIGRATION, SimParams
from .particles import (
    ParticleSet,
    init_system,
    kinetic_energy,
    stream_and_wrap,
    total_momentum,
    wrap_coordinates,
)
from .rng import Purpose, RngKey, sample_uniform

__version__ = "0.1.0"

__all__ = [
    "BACKEND_PROCESS",
    "BACKEND_SEQUENTIAL",
    "BACKEND_SERIAL",
    "BinningError",
    "CODE_STAY",
    "CellMomentField",
    "CommRecord",
    "ConfigError",
    "ConservationReport",
    "DomainGrid",
    "EquivalenceReport",
    "GridShift",
    "HaloPlan",
    "LinkedCellList",
    "Message",
    "MpcdError",
    "POLICY_IMMEDIATE",
    "POLICY_LAZY",
    "ParticleSet",
    "Purpose",
    "RngKey",
    "RotationPlan",
    "SCHEME_HALO",
    "SCHEME_MIGRATION",
    "SimParams",
    "Simulation",
    "TopologyError",
    "Transport",
    "accumulate_cell_moments",
    "build_decomposition",
    "build_halo_plan",
    "build_linked_cells",
    "build_rotation_plan",
    "cell_momentum_drift",
    "classify_base3",
    "code_digits",
    "comm_stats",
    "conservation_report",
    "equivalence_check",
    "finalize_com",
    "halo_exchange_particles",
    "halo_reduce_scatter_moments",
    "init_system",
    "kinetic_energy",
    "migrate_particles",
    "neighbor_rank",
    "reflect_code",
    "rotate_cell_velocities",
    "rotate_velocities",
    "sample_grid_shift",
    "sample_rotation_axes",
    "sample_rotation_axis",
    "sample_uniform",
    "segment_moments",
    "serial_collision_step",
    "step_parallel",
    "step_serial",
    "stream_and_wrap",
    "total_momentum",
    "wrap_coordinates",
]
