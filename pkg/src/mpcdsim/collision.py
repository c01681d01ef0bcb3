"""Shifted collision grid: binning, cell moments, and velocity rotation.

One collision step works on a uniform cell grid that is randomly
translated each step.  Particles are sorted into cells, each cell's
center-of-mass velocity is computed from a 4-component moment
accumulator (3 momentum components plus total mass), and every
particle's velocity relative to its cell's com is rotated by a fixed
angle about a per-cell random unit axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import BinningError, ConfigError

# Rejection sampling on the unit disk accepts with probability pi/4;
# this many failures in a row cannot happen with a working generator.
_MAX_AXIS_TRIALS = 128


@dataclass(frozen=True)
class GridShift:
    """Per-step random translation of the collision grid."""

    offset: np.ndarray  # (3,) each in [-a/2, a/2)


def sample_grid_shift(step: int, seed: int, cell_size: float = 1.0) -> GridShift:
    """Draw the grid offset for a step, identical on every rank."""
    state = rng.key_state(seed, step, rng.Purpose.SHIFT, 0)
    u = rng.uniform_at(state, np.arange(3, dtype=np.uint64))
    return GridShift(offset=(u - 0.5) * cell_size)


@dataclass
class LinkedCellList:
    """Cell binning of a particle batch over a local grid.

    Attributes
    ----------
    grid_min, grid_max : (3,) float64
        Spatial bounds of the local grid (halo included).
    cell_size : float
        Cell edge length.
    dims : (3,) int64
        Cell counts per axis.
    wrap : (3,) bool
        Axes along which cell indices wrap periodically; on such an
        axis the grid spans the whole box and has no halo layer.
    bin_count : (n_cells,) int64
        Particles per cell.
    bin_offset : (n_cells,) int64
        Exclusive prefix sum of bin_count in row-major cell order.
    permutation : (n,) int64
        Stable particle ordering, cell by cell.
    cells : (n,) int64
        Flat local cell index per particle, in original order.
    """

    grid_min: np.ndarray
    grid_max: np.ndarray
    cell_size: float
    dims: np.ndarray
    wrap: np.ndarray
    bin_count: np.ndarray
    bin_offset: np.ndarray
    permutation: np.ndarray
    cells: np.ndarray

    @property
    def n_cells(self) -> int:
        return int(self.dims[0] * self.dims[1] * self.dims[2])

    @property
    def n(self) -> int:
        return self.cells.shape[0]


def _dims_from_bounds(grid_min, grid_max, cell_size) -> np.ndarray:
    span = (np.asarray(grid_max, dtype=np.float64) - grid_min) / cell_size
    dims = np.rint(span).astype(np.int64)
    if np.any(np.abs(span - dims) > 1e-9) or np.any(dims < 1):
        raise ConfigError(
            "grid bounds must span a positive whole number of cells"
        )
    return dims


def _structure_from_cells(flat, dims, grid_min, grid_max, cell_size, wrap):
    n_cells = int(np.prod(dims))
    bin_count = np.bincount(flat, minlength=n_cells).astype(np.int64)
    bin_offset = np.zeros(n_cells, dtype=np.int64)
    np.cumsum(bin_count[:-1], out=bin_offset[1:])
    permutation = np.argsort(flat, kind="stable")
    return LinkedCellList(
        grid_min=np.asarray(grid_min, dtype=np.float64),
        grid_max=np.asarray(grid_max, dtype=np.float64),
        cell_size=float(cell_size),
        dims=dims,
        wrap=np.asarray(wrap, dtype=bool),
        bin_count=bin_count,
        bin_offset=bin_offset,
        permutation=permutation,
        cells=flat,
    )


def build_linked_cells(
    positions: np.ndarray,
    cell_size: float,
    grid_min,
    grid_max,
    wrap=(False, False, False),
) -> LinkedCellList:
    """Bin particles into the local cell grid.

    The cell of a particle is ``floor((x - grid_min) / cell_size)`` per
    axis.  Along wrapped axes the index is taken modulo the axis cell
    count, so any real coordinate is valid there; along bounded axes a
    position outside [grid_min, grid_max) raises BinningError naming
    the particle and axis.
    """
    positions = np.asarray(positions, dtype=np.float64)
    grid_min = np.asarray(grid_min, dtype=np.float64)
    grid_max = np.asarray(grid_max, dtype=np.float64)
    wrap = np.asarray(wrap, dtype=bool)
    dims = _dims_from_bounds(grid_min, grid_max, cell_size)
    idx = np.floor((positions - grid_min) / cell_size).astype(np.int64)
    for d in range(3):
        if wrap[d]:
            idx[:, d] %= dims[d]
        else:
            bad = (idx[:, d] < 0) | (idx[:, d] >= dims[d])
            if bad.any():
                i = int(np.argmax(bad))
                raise BinningError(
                    f"particle {i} at {positions[i].tolist()} lies outside "
                    f"the grid along axis {d}",
                    particle_index=i,
                    dimension=d,
                )
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    return _structure_from_cells(flat, dims, grid_min, grid_max, cell_size, wrap)


def linked_cells_from_indices(
    flat: np.ndarray, dims, grid_min, grid_max, cell_size, wrap
) -> LinkedCellList:
    """Build the binning structure from precomputed flat cell indices.

    Used when cell assignment was already done in integer arithmetic
    (e.g. on a sending rank) and must not be re-derived from float
    positions.
    """
    dims = np.asarray(dims, dtype=np.int64)
    flat = np.asarray(flat, dtype=np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= int(np.prod(dims))):
        raise BinningError("flat cell index out of range")
    return _structure_from_cells(flat, dims, grid_min, grid_max, cell_size, wrap)


@dataclass
class CellMomentField:
    """Per-cell accumulator: columns 0-2 are momentum, column 3 is mass."""

    moments: np.ndarray  # (n_cells, 4)

    @property
    def momentum(self) -> np.ndarray:
        return self.moments[:, :3]

    @property
    def mass(self) -> np.ndarray:
        return self.moments[:, 3]


def accumulate_cell_moments(
    cells: LinkedCellList, velocities: np.ndarray, masses: np.ndarray
) -> CellMomentField:
    """Sum m*v and m over each cell, in permutation order."""
    return CellMomentField(
        segment_moments(cells, np.asarray(velocities), np.asarray(masses))
    )


def segment_moments(cells: LinkedCellList, velocities, masses) -> np.ndarray:
    n = cells.n
    n_cells = cells.n_cells
    if n == 0:
        return np.zeros((n_cells, 4))
    order = cells.permutation
    m = masses[order]
    data = np.empty((n, 4))
    data[:, :3] = m[:, None] * velocities[order]
    data[:, 3] = m
    # reduceat over nonempty bins only: their starts are strictly
    # increasing and < n, so every segment ends exactly where the next
    # nonempty bin begins (or at n for the last one)
    occupied = cells.bin_count > 0
    out = np.zeros((n_cells, 4))
    out[occupied] = np.add.reduceat(data, cells.bin_offset[occupied], axis=0)
    return out


def finalize_com(field: CellMomentField) -> np.ndarray:
    """Center-of-mass velocity per cell; (0,0,0) for empty cells."""
    mass = field.mass
    com = np.zeros((field.moments.shape[0], 3))
    np.divide(field.momentum, mass[:, None], out=com, where=mass[:, None] > 0)
    return com


def sample_rotation_axes(step: int, cell_ids: np.ndarray, seed: int) -> np.ndarray:
    """Uniform unit vectors, one per global cell id.

    Marsaglia rejection on the unit disk; each cell consumes its own
    keyed draw counter, so the result for a cell never depends on
    which other cells are sampled alongside it.
    """
    cell_ids = np.atleast_1d(np.asarray(cell_ids, dtype=np.int64))
    k = cell_ids.shape[0]
    states = rng.key_state(seed, step, rng.Purpose.AXIS, cell_ids)
    axes = np.empty((k, 3))
    pending = np.arange(k)
    trial = np.zeros(k, dtype=np.uint64)
    for _ in range(_MAX_AXIS_TRIALS):
        if pending.size == 0:
            break
        s = states[pending]
        t = trial[pending]
        u1 = rng.uniform_at(s, np.uint64(2) * t)
        u2 = rng.uniform_at(s, np.uint64(2) * t + np.uint64(1))
        x = 2.0 * u1 - 1.0
        y = 2.0 * u2 - 1.0
        rsq = x * x + y * y
        ok = rsq < 1.0
        hit = pending[ok]
        root = np.sqrt(1.0 - rsq[ok])
        axes[hit, 0] = 2.0 * x[ok] * root
        axes[hit, 1] = 2.0 * y[ok] * root
        axes[hit, 2] = 1.0 - 2.0 * rsq[ok]
        trial[pending] += np.uint64(1)
        pending = pending[~ok]
    else:
        raise RuntimeError("axis rejection sampling failed to terminate")
    return axes


def sample_rotation_axis(step: int, global_cell_id: int, seed: int) -> np.ndarray:
    return sample_rotation_axes(step, np.array([global_cell_id]), seed)[0]


@dataclass
class RotationPlan:
    """Dense per-cell rotation axes plus the shared angle.

    Rows for cells without local particles are never read; they are
    left as zeros rather than sampled.
    """

    axes: np.ndarray  # (n_cells, 3)
    alpha: float


def build_rotation_plan(
    step: int,
    seed: int,
    alpha: float,
    global_cell_ids: np.ndarray,
    occupied: np.ndarray,
) -> RotationPlan:
    """Sample axes for the occupied cells of a local grid.

    `global_cell_ids` maps every local cell to its global wrapped cell
    index (the RNG key), so all ranks sharing a cell agree on its axis.
    """
    axes = np.zeros((global_cell_ids.shape[0], 3))
    if occupied.any():
        axes[occupied] = sample_rotation_axes(
            step, global_cell_ids[occupied], seed
        )
    return RotationPlan(axes=axes, alpha=float(alpha))


def rotate_velocities(velocities, com_per_particle, axis_per_particle, alpha):
    """Rodrigues rotation of velocities about per-particle axes.

    u = v - com is split into components parallel and perpendicular to
    the axis; the perpendicular part turns by alpha:
    v' = com + u_par + u_perp*cos(alpha) + (axis x u_perp)*sin(alpha).
    """
    u = velocities - com_per_particle
    dot = np.sum(u * axis_per_particle, axis=1, keepdims=True)
    u_par = dot * axis_per_particle
    u_perp = u - u_par
    crossed = np.cross(axis_per_particle, u_perp)
    return (
        com_per_particle
        + u_par
        + u_perp * np.cos(alpha)
        + crossed * np.sin(alpha)
    )


def rotate_cell_velocities(
    cells: LinkedCellList,
    velocities: np.ndarray,
    com: np.ndarray,
    plan: RotationPlan,
) -> np.ndarray:
    """Apply each cell's rotation to its particles' velocities."""
    if cells.n == 0:
        return np.asarray(velocities, dtype=np.float64).copy()
    c = cells.cells
    return rotate_velocities(
        np.asarray(velocities, dtype=np.float64),
        com[c],
        plan.axes[c],
        plan.alpha,
    )


def cell_momentum_drift(before: np.ndarray, after: np.ndarray) -> float:
    """Worst per-cell momentum change, relative to the cell's momentum scale.

    `before` and `after` are (n_cells, 4) moment arrays for the same
    binning.  The scale of a cell is the sum of |m*v| magnitudes of its
    particles (column-wise |momentum| is no use: it can cancel to zero
    in a thermal cell), approximated here by the larger of the two
    momentum norms and the mass; exact zeros compare as zero drift.
    """
    dp = np.linalg.norm(after[:, :3] - before[:, :3], axis=1)
    scale = np.maximum(
        np.linalg.norm(before[:, :3], axis=1), np.linalg.norm(after[:, :3], axis=1)
    )
    scale = np.maximum(scale, before[:, 3])
    occupied = before[:, 3] > 0
    if not occupied.any():
        return 0.0
    return float(np.max(dp[occupied] / np.maximum(scale[occupied], 1e-300)))
