"""Timestep orchestration: serial oracle and rank-parallel phases.

A step always runs shift -> bin -> (reduce) -> rotate -> stream, so the
initial state collides before it first streams.  The parallel step is
expressed as a fixed list of per-rank phase functions; between phases
the runner routes each rank's outbox through the Transport.  Phases
never touch another rank's state, which lets the same functions run
in-process (sequential backend) or in worker processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import collision, exchange, particles as particles_mod, rng
from .collision import (
    CellMomentField,
    GridShift,
    build_linked_cells,
    build_rotation_plan,
    cell_momentum_drift,
    finalize_com,
    linked_cells_from_indices,
    rotate_cell_velocities,
    sample_grid_shift,
    segment_moments,
)
from .decomposition import DomainGrid, build_decomposition, classify_base3
from .errors import ConfigError, MpcdError, TopologyError
from .exchange import (
    DIAG_CHANNEL,
    Transport,
    absorb_migration,
    apply_reduce,
    apply_scatter,
    build_halo_plan,
    migration_outbox,
    reduce_outbox,
    scatter_outbox,
)
from .params import SCHEME_HALO, SCHEME_MIGRATION, SimParams
from .particles import ParticleSet, init_system, stream_and_wrap, wrap_coordinates

POLICY_IMMEDIATE = "immediate"
POLICY_LAZY = "lazy"
POLICIES = (POLICY_IMMEDIATE, POLICY_LAZY)


@dataclass
class RankState:
    """Everything one rank owns: particles plus static topology data."""

    rank: int
    params: SimParams
    grid: DomainGrid
    policy: str
    capture_drift: bool
    capture_com: bool
    ids: np.ndarray
    particles: ParticleSet
    plan: exchange.HaloPlan | None = None
    # static geometry, derived once
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    decomposed: np.ndarray | None = None
    route_borders: np.ndarray | None = None
    local_global_ids: np.ndarray | None = None  # halo grid cell -> global cell
    owned_local_cells: np.ndarray | None = None  # owned band of the halo grid
    own_global_ids: np.ndarray | None = None  # owned-cell grid -> global cell
    # per-step scratch
    offset: np.ndarray | None = None
    lc: collision.LinkedCellList | None = None
    moments: np.ndarray | None = None
    pre_owned: np.ndarray | None = None
    post_local: np.ndarray | None = None
    gcells: np.ndarray | None = None


def _local_global_ids(grid: DomainGrid, rank: int, halo: np.ndarray) -> np.ndarray:
    """Global wrapped cell id of every cell in the halo-extended grid."""
    L = grid.edge_length
    own_lo = grid.own_cell_lo(rank)
    dims = grid.own_cells + 2 * halo  # halo is 0 along wrapped axes
    axes = [
        np.mod(own_lo[d] - halo[d] + np.arange(dims[d], dtype=np.int64), L)
        for d in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return ((gx * L + gy) * L + gz).ravel()


def _owned_band_cells(dims: np.ndarray, halo: np.ndarray, own: np.ndarray) -> np.ndarray:
    ranges = [range(int(halo[d]), int(halo[d] + own[d])) for d in range(3)]
    return exchange.flat_cell_box(ranges, dims)


def build_rank_state(
    params: SimParams,
    rank: int,
    *,
    policy: str = POLICY_IMMEDIATE,
    capture_drift: bool = False,
    capture_com: bool = False,
    velocity_variance: float = 1.0,
    preinit: tuple[np.ndarray, ParticleSet] | None = None,
) -> RankState:
    if policy not in POLICIES:
        raise ConfigError(f"migration policy must be one of {POLICIES}")
    grid = build_decomposition(params.edge_length, params.cell_size, params.rank_dims)
    if preinit is None:
        ids, owned = particles_mod.init_owned_slice(
            params, grid.lower(rank), grid.upper(rank), velocity_variance
        )
    else:
        ids, owned = preinit
    state = RankState(
        rank=rank,
        params=params,
        grid=grid,
        policy=policy,
        capture_drift=capture_drift,
        capture_com=capture_com,
        ids=ids,
        particles=owned,
    )
    state.lower = grid.lower(rank)
    state.upper = grid.upper(rank)
    state.decomposed = np.asarray(grid.rank_dims) > 1
    a = params.cell_size
    if params.scheme == SCHEME_HALO:
        eff_halo = params.halo_width + (1 if policy == POLICY_LAZY else 0)
        state.plan = build_halo_plan(grid, rank, eff_halo)
        state.local_global_ids = _local_global_ids(grid, rank, state.plan.halo)
        state.owned_local_cells = _owned_band_cells(
            state.plan.dims, state.plan.halo, grid.own_cells
        )
        state.own_global_ids = state.local_global_ids[state.owned_local_cells]
        if policy == POLICY_LAZY:
            pad = np.where(state.decomposed, params.halo_width * a, 0.0)
            borders = np.empty(6)
            borders[0::2] = state.lower - pad
            borders[1::2] = state.upper + pad
            state.route_borders = borders
        else:
            state.route_borders = grid.dom_borders(rank)
    else:
        if policy == POLICY_LAZY:
            raise ConfigError("lazy migration applies to the halo scheme only")
        own_lo = grid.own_cell_lo(rank)
        lx, ly, lz = (np.arange(int(n), dtype=np.int64) for n in grid.own_cells)
        gx, gy, gz = np.meshgrid(own_lo[0] + lx, own_lo[1] + ly, own_lo[2] + lz, indexing="ij")
        L = grid.edge_length
        state.own_global_ids = (
            (np.mod(gx, L) * L + np.mod(gy, L)) * L + np.mod(gz, L)
        ).ravel()
        state.route_borders = grid.dom_borders(rank)
    return state


def _halo_grid_bounds(state: RankState):
    a = state.params.cell_size
    halo = state.plan.halo
    grid_min = np.where(
        state.decomposed,
        state.lower - halo * a + state.offset,
        state.offset,
    )
    grid_max = grid_min + state.plan.dims * a
    return grid_min, grid_max


def _conservation_partials(state: RankState) -> dict:
    p = state.particles
    return {
        "n": p.n,
        "momentum": particles_mod.total_momentum(p),
        "energy": particles_mod.kinetic_energy(p),
        "mass": particles_mod.total_mass(p),
    }


# ---------------------------------------------------------------------------
# Scheme B (halo reduction) phases
# ---------------------------------------------------------------------------


def phase_halo_bin(state: RankState, step: int, inbox):
    params = state.params
    state.offset = sample_grid_shift(step, params.seed, params.cell_size).offset
    grid_min, grid_max = _halo_grid_bounds(state)
    state.lc = build_linked_cells(
        state.particles.positions,
        params.cell_size,
        grid_min,
        grid_max,
        wrap=~state.decomposed,
    )
    state.moments = segment_moments(
        state.lc, state.particles.velocities, state.particles.masses
    )
    return reduce_outbox(state.plan, state.moments), None


def phase_halo_reduce(state: RankState, step: int, inbox):
    apply_reduce(state.plan, state.moments, inbox)
    diag = None
    if state.capture_com:
        owned = state.moments[state.owned_local_cells]
        occ = owned[:, 3] > 0
        com = finalize_com(CellMomentField(owned))
        diag = {"com_ids": state.own_global_ids[occ], "com": com[occ]}
    if state.capture_drift:
        state.pre_owned = state.moments[state.owned_local_cells].copy()
    return scatter_outbox(state.plan, state.moments), diag


def phase_halo_rotate(state: RankState, step: int, inbox):
    apply_scatter(state.plan, state.moments, inbox)
    params = state.params
    com = finalize_com(CellMomentField(state.moments))
    occupied = state.lc.bin_count > 0
    rot_plan = build_rotation_plan(
        step, params.seed, params.alpha, state.local_global_ids, occupied
    )
    rotated = rotate_cell_velocities(
        state.lc, state.particles.velocities, com, rot_plan
    )
    state.particles = ParticleSet(
        state.particles.positions, rotated, state.particles.masses
    )
    outbox = []
    if state.capture_drift:
        state.post_local = segment_moments(
            state.lc, state.particles.velocities, state.particles.masses
        )
        outbox = [
            (e.peer, DIAG_CHANNEL, e.code, state.post_local[e.send_cells])
            for e in state.plan.entries
        ]
    return outbox, None


def phase_halo_stream(state: RankState, step: int, inbox):
    diag = {}
    if state.capture_drift:
        for msg in inbox:
            entry = state.plan.entry_for(26 - msg.code)
            state.post_local[entry.recv_cells] += msg.payload
        diag["max_cell_drift"] = cell_momentum_drift(
            state.pre_owned, state.post_local[state.owned_local_cells]
        )
    p = state.particles
    streamed = ParticleSet(
        p.positions + p.velocities * state.params.dt, p.velocities, p.masses
    )
    codes = np.atleast_1d(classify_base3(streamed.positions, state.route_borders))
    before = streamed.n
    state.ids, state.particles, _, msgs = migration_outbox(
        state.rank, state.grid, state.ids, streamed, codes
    )
    diag["crossings"] = before - state.particles.n
    return msgs, diag


def phase_halo_absorb(state: RankState, step: int, inbox):
    state.ids, state.particles, _ = absorb_migration(
        state.ids, state.particles, inbox, state.route_borders
    )
    return [], _conservation_partials(state)


# ---------------------------------------------------------------------------
# Scheme A (particle migration) phases
# ---------------------------------------------------------------------------


def _shifted_owner_digits(state: RankState, gcells: np.ndarray) -> np.ndarray:
    """Base-3 digits of each particle's shifted-cell owner, per axis.

    r is how far the shifted cell sits past my first owned cell along
    the wrapped axis: inside my band -> 1, the cell just above -> 2,
    the cell just below (== L-1 away) -> 0.  Anything else means the
    particle's cell is not adjacent to my domain.
    """
    grid = state.grid
    L = grid.edge_length
    own = grid.own_cells
    own_lo = grid.own_cell_lo(state.rank)
    r = np.mod(gcells - own_lo, L)
    digits = np.where(r < own, 1, np.where(r == own, 2, np.where(r == L - 1, 0, -1)))
    if np.any(digits < 0):
        i = int(np.argmax(np.any(digits < 0, axis=1)))
        raise TopologyError(
            f"particle {int(state.ids[i])} has shifted cell {gcells[i].tolist()} "
            "not adjacent to its rank; grid shift must stay within one cell"
        )
    return digits


def phase_migration_gather(state: RankState, step: int, inbox):
    params = state.params
    state.offset = sample_grid_shift(step, params.seed, params.cell_size).offset
    pos = state.particles.positions
    a = params.cell_size
    gcells = np.mod(
        np.floor((pos - state.offset) / a).astype(np.int64),
        state.grid.edge_length,
    )
    digits = _shifted_owner_digits(state, gcells)
    codes = digits[:, 0] * 9 + digits[:, 1] * 3 + digits[:, 2]
    gflat = state.grid.global_flat_cells(gcells)
    before = state.particles.n
    state.ids, state.particles, state.gcells, msgs = migration_outbox(
        state.rank,
        state.grid,
        state.ids,
        state.particles,
        codes,
        extra=gflat.astype(np.float64)[:, None],
    )
    return msgs, {"gathered_out": before - state.particles.n}


def phase_migration_collide(state: RankState, step: int, inbox):
    params = state.params
    grid = state.grid
    a = params.cell_size
    L = grid.edge_length
    state.ids, state.particles, extra = absorb_migration(
        state.ids, state.particles, inbox, None, base_extra=state.gcells
    )
    state.gcells = None
    if extra is None:
        extra = np.empty((0, 1))
    gflat = extra[:, 0].astype(np.int64)
    g = np.stack([gflat // (L * L), (gflat // L) % L, gflat % L], axis=1)
    own_lo = grid.own_cell_lo(state.rank)
    own = grid.own_cells
    local = np.mod(g - own_lo, L)
    if np.any(local >= own):
        raise TopologyError(
            "gathered particle's shifted cell is not owned by this rank"
        )
    flat_local = (local[:, 0] * own[1] + local[:, 1]) * own[2] + local[:, 2]
    grid_min = state.lower + state.offset
    state.lc = linked_cells_from_indices(
        flat_local,
        own,
        grid_min,
        grid_min + own * a,
        a,
        wrap=~state.decomposed,
    )
    p = state.particles
    state.moments = segment_moments(state.lc, p.velocities, p.masses)
    occupied = state.lc.bin_count > 0
    com = finalize_com(CellMomentField(state.moments))
    plan = build_rotation_plan(
        step, params.seed, params.alpha, state.own_global_ids, occupied
    )
    rotated = rotate_cell_velocities(state.lc, p.velocities, com, plan)
    diag = {}
    if state.capture_drift:
        post = segment_moments(state.lc, rotated, p.masses)
        diag["max_cell_drift"] = cell_momentum_drift(state.moments, post)
    if state.capture_com:
        occ = occupied
        diag["com_ids"] = state.own_global_ids[occ]
        diag["com"] = com[occ]
    streamed = ParticleSet(
        p.positions + rotated * params.dt, rotated, p.masses
    )
    codes = np.atleast_1d(
        classify_base3(streamed.positions, state.route_borders)
    )
    before = streamed.n
    state.ids, state.particles, _, msgs = migration_outbox(
        state.rank, grid, state.ids, streamed, codes
    )
    diag["crossings"] = before - state.particles.n
    return msgs, diag


def phase_migration_absorb(state: RankState, step: int, inbox):
    state.ids, state.particles, _ = absorb_migration(
        state.ids, state.particles, inbox, state.route_borders
    )
    return [], _conservation_partials(state)


PHASES = {
    SCHEME_HALO: (
        phase_halo_bin,
        phase_halo_reduce,
        phase_halo_rotate,
        phase_halo_stream,
        phase_halo_absorb,
    ),
    SCHEME_MIGRATION: (
        phase_migration_gather,
        phase_migration_collide,
        phase_migration_absorb,
    ),
}


# ---------------------------------------------------------------------------
# Serial oracle
# ---------------------------------------------------------------------------


def serial_collision_step(
    p: ParticleSet,
    params: SimParams,
    step: int,
    *,
    want_drift: bool = False,
    want_com: bool = False,
):
    """One full step on the whole system, single rank, no transport.

    The local grid covers the entire box with all axes wrapped and
    grid_min equal to the step's shift offset, so local flat cell
    indices coincide with global cell ids.
    """
    offset = sample_grid_shift(step, params.seed, params.cell_size).offset
    a = params.cell_size
    box = params.box_length
    lc = build_linked_cells(
        p.positions, a, offset, offset + box, wrap=(True, True, True)
    )
    moments = segment_moments(lc, p.velocities, p.masses)
    com = finalize_com(CellMomentField(moments))
    occupied = lc.bin_count > 0
    plan = build_rotation_plan(
        step,
        params.seed,
        params.alpha,
        np.arange(lc.n_cells, dtype=np.int64),
        occupied,
    )
    rotated = rotate_cell_velocities(lc, p.velocities, com, plan)
    drift = None
    if want_drift:
        post = segment_moments(lc, rotated, p.masses)
        drift = cell_momentum_drift(moments, post)
    com_capture = None
    if want_com:
        occ_ids = np.nonzero(occupied)[0].astype(np.int64)
        com_capture = (occ_ids, com[occupied])
    out = stream_and_wrap(ParticleSet(p.positions, rotated, p.masses), params.dt, box)
    return out, drift, com_capture


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConservationReport:
    """Global sums over owned particles, plus the latest cell drift."""

    total_momentum: np.ndarray
    kinetic_energy: float
    total_mass: float
    max_cell_drift: float
    n_particles: int

    def __post_init__(self):
        values = [*np.asarray(self.total_momentum).ravel(), self.kinetic_energy,
                  self.total_mass, self.max_cell_drift]
        if not all(math.isfinite(float(v)) for v in values):
            raise MpcdError("conservation report contains non-finite values")


def conservation_report(sim: "Simulation") -> ConservationReport:
    """Momentum, energy, and mass over all owned particles right now."""
    return sim.conservation_report()


# ---------------------------------------------------------------------------
# Simulation front end
# ---------------------------------------------------------------------------

BACKEND_SERIAL = "serial"
BACKEND_SEQUENTIAL = "sequential"
BACKEND_PROCESS = "process"


class Simulation:
    """A configured run: initialization, stepping, and collection.

    backend "serial" is the single-rank oracle path (requires
    rank_dims=(1,1,1)); "sequential" runs the parallel phase machinery
    in-process; "process" spawns one worker per rank.
    """

    def __init__(
        self,
        params: SimParams,
        *,
        backend: str = BACKEND_SEQUENTIAL,
        policy: str = POLICY_IMMEDIATE,
        capture_drift: bool = False,
        capture_com: bool = False,
        velocity_variance: float = 1.0,
    ):
        self.params = params
        self.backend_name = backend
        self.grid = build_decomposition(
            params.edge_length, params.cell_size, params.rank_dims
        )
        self.step_index = 0
        self.current_shift: GridShift | None = None
        self.diagnostics: list[dict] = []
        self.com_captures: list[tuple[np.ndarray, np.ndarray]] = []
        self.drift_history: list[float] = []
        self.capture_drift = capture_drift
        self.capture_com = capture_com
        if backend == BACKEND_SERIAL:
            if params.n_ranks != 1:
                raise ConfigError("serial backend requires rank_dims=(1,1,1)")
            self._particles = init_system(params, velocity_variance=velocity_variance)
            self._ids = np.arange(params.n_particles, dtype=np.int64)
            self._runner = None
        elif backend in (BACKEND_SEQUENTIAL, BACKEND_PROCESS):
            from .runners import ProcessRunner, SequentialRunner

            cls = SequentialRunner if backend == BACKEND_SEQUENTIAL else ProcessRunner
            self._runner = cls(
                params,
                policy=policy,
                capture_drift=capture_drift,
                capture_com=capture_com,
                velocity_variance=velocity_variance,
            )
        else:
            raise ConfigError(f"unknown backend {backend!r}")

    @property
    def runner(self):
        """Backing runner, or None for the serial backend."""
        return self._runner

    @property
    def comm_records(self):
        if self._runner is None:
            return []
        return self._runner.transport.records

    def step(self) -> dict:
        """Advance one full collision + streaming step."""
        k = self.step_index
        self.current_shift = sample_grid_shift(
            k, self.params.seed, self.params.cell_size
        )
        if self._runner is None:
            self._particles, drift, com = serial_collision_step(
                self._particles,
                self.params,
                k,
                want_drift=self.capture_drift,
                want_com=self.capture_com,
            )
            diag = {
                "step": k,
                "n": self._particles.n,
                "momentum": particles_mod.total_momentum(self._particles),
                "energy": particles_mod.kinetic_energy(self._particles),
                "mass": particles_mod.total_mass(self._particles),
                "crossings": 0,
            }
            if drift is not None:
                diag["max_cell_drift"] = drift
                self.drift_history.append(drift)
            if com is not None:
                self.com_captures.append(com)
        else:
            diag = self._runner.run_step(k)
            diag["step"] = k
            if self.capture_drift:
                self.drift_history.append(diag.get("max_cell_drift", 0.0))
            if self.capture_com:
                self.com_captures.append(diag.pop("com_capture"))
        self.diagnostics.append(diag)
        self.step_index += 1
        return diag

    def run(self, n_steps: int | None = None) -> "Simulation":
        count = self.params.n_steps if n_steps is None else n_steps
        for _ in range(count):
            self.step()
        return self

    def collect(self) -> tuple[np.ndarray, ParticleSet]:
        """Global state, canonically ordered by particle id."""
        if self._runner is None:
            order = np.argsort(self._ids, kind="stable")
            p = self._particles
            return self._ids[order], ParticleSet(
                p.positions[order], p.velocities[order], p.masses[order]
            )
        return self._runner.collect()

    def particle_sets(self) -> list[tuple[np.ndarray, ParticleSet]]:
        if self._runner is None:
            return [(self._ids, self._particles)]
        return self._runner.particle_sets()

    def conservation_report(self) -> ConservationReport:
        if self._runner is None:
            p = self._particles
            mom = particles_mod.total_momentum(p)
            en = particles_mod.kinetic_energy(p)
            mass = particles_mod.total_mass(p)
            n = p.n
        else:
            n, mom, en, mass = self._runner.reduce_conservation()
        drift = self.drift_history[-1] if self.drift_history else 0.0
        return ConservationReport(
            total_momentum=mom,
            kinetic_energy=en,
            total_mass=mass,
            max_cell_drift=drift,
            n_particles=n,
        )

    def close(self):
        if self._runner is not None:
            self._runner.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def step_serial(sim: Simulation) -> Simulation:
    """Advance the serial oracle one step."""
    if sim.backend_name != BACKEND_SERIAL:
        raise ConfigError("step_serial requires a serial-backend simulation")
    sim.step()
    return sim


def step_parallel(sim: Simulation, scheme: str | None = None) -> Simulation:
    """Advance a rank-parallel simulation one step."""
    if sim.backend_name == BACKEND_SERIAL:
        raise ConfigError("step_parallel requires a parallel backend")
    if scheme is not None and scheme != sim.params.scheme:
        raise ConfigError(
            f"simulation was built for scheme {sim.params.scheme!r}"
        )
    sim.step()
    return sim


# ---------------------------------------------------------------------------
# Equivalence checking
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    n_steps: int
    per_step_position: list[float] = field(default_factory=list)
    per_step_velocity: list[float] = field(default_factory=list)
    per_step_com: list[float] = field(default_factory=list)

    @property
    def max_position_dev(self) -> float:
        return max(self.per_step_position, default=0.0)

    @property
    def max_velocity_dev(self) -> float:
        return max(self.per_step_velocity, default=0.0)

    @property
    def max_com_dev(self) -> float:
        return max(self.per_step_com, default=0.0)


def _min_image_dev(pa: np.ndarray, pb: np.ndarray, box: float) -> float:
    d = np.abs(pa - pb)
    d = np.minimum(d, box - d)
    return float(d.max()) if d.size else 0.0


def _build_for_check(params, rank_dims, scheme, capture_com, backend):
    if scheme == "serial":
        p = replace(params, rank_dims=(1, 1, 1))
        return Simulation(p, backend=BACKEND_SERIAL, capture_com=capture_com)
    p = replace(params, rank_dims=tuple(rank_dims), scheme=scheme)
    return Simulation(p, backend=backend, capture_com=capture_com)


def equivalence_check(
    config: SimParams,
    ranks_a,
    ranks_b,
    scheme_a: str,
    scheme_b: str,
    n_steps: int,
    *,
    capture_com: bool = False,
    backend: str = BACKEND_SEQUENTIAL,
) -> EquivalenceReport:
    """Run two settings of one physical config in lockstep.

    Reports the max per-particle position deviation (periodic
    min-image, per component), velocity deviation, and, with
    capture_com, per-cell com deviation, step by step.  scheme may be
    "serial", "migration", or "halo".
    """
    box = config.box_length
    report = EquivalenceReport(n_steps=n_steps)
    sim_a = _build_for_check(config, ranks_a, scheme_a, capture_com, backend)
    sim_b = _build_for_check(config, ranks_b, scheme_b, capture_com, backend)
    try:
        for _ in range(n_steps):
            sim_a.step()
            sim_b.step()
            ids_a, pa = sim_a.collect()
            ids_b, pb = sim_b.collect()
            if not np.array_equal(ids_a, ids_b):
                raise MpcdError("particle id sets diverged between runs")
            report.per_step_position.append(
                _min_image_dev(pa.positions, pb.positions, box)
            )
            dv = np.abs(pa.velocities - pb.velocities)
            report.per_step_velocity.append(float(dv.max()) if dv.size else 0.0)
            if capture_com:
                ca_ids, ca = sim_a.com_captures[-1]
                cb_ids, cb = sim_b.com_captures[-1]
                if not np.array_equal(ca_ids, cb_ids):
                    raise MpcdError("occupied cell sets diverged between runs")
                dc = np.abs(ca - cb)
                report.per_step_com.append(float(dc.max()) if dc.size else 0.0)
    finally:
        sim_a.close()
        sim_b.close()
    return report
