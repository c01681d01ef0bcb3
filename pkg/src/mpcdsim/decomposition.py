"""Uniform Cartesian domain decomposition and base-3 neighbor topology.

Ranks form a 3d grid; each owns an axis-aligned box of whole collision
cells.  A particle's relation to a rank's box is encoded as a base-3
code: per axis, digit 0 means below the lower border, 1 inside, and 2
at-or-above the upper border, combined x-most-significant as
digit_x*9 + digit_y*3 + digit_z.  Code 13 = (111) means "inside".
The 27-entry neighbor table maps each code to the rank on that side,
with periodic wrap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

CODE_STAY = 13


@dataclass(frozen=True)
class DomainGrid:
    """Immutable rank-grid geometry shared by all ranks."""

    edge_length: int
    cell_size: float
    rank_dims: tuple[int, int, int]
    own_cells: np.ndarray = field(init=False)  # (3,) cells per rank per axis
    neighbor_table: np.ndarray = field(init=False)  # (n_ranks, 27)

    def __post_init__(self):
        dims = np.asarray(self.rank_dims, dtype=np.int64)
        if dims.shape != (3,) or np.any(dims < 1):
            raise ConfigError("rank_dims must be three positive integers")
        for d in range(3):
            if self.edge_length % int(dims[d]) != 0:
                raise ConfigError(
                    f"rank_dims entry {int(dims[d])} does not divide "
                    f"edge_length {self.edge_length}"
                )
        object.__setattr__(
            self, "own_cells", np.full(3, self.edge_length, dtype=np.int64) // dims
        )
        object.__setattr__(self, "neighbor_table", _build_neighbor_table(dims))

    @property
    def n_ranks(self) -> int:
        return int(np.prod(self.rank_dims))

    @property
    def box_length(self) -> float:
        return self.edge_length * self.cell_size

    def rank_coords(self, rank: int) -> np.ndarray:
        ry, rz = self.rank_dims[1], self.rank_dims[2]
        return np.array(
            [rank // (ry * rz), (rank // rz) % ry, rank % rz], dtype=np.int64
        )

    def rank_of_coords(self, coords) -> int:
        dims = self.rank_dims
        c = np.mod(np.asarray(coords, dtype=np.int64), dims)
        return int((c[0] * dims[1] + c[1]) * dims[2] + c[2])

    def own_cell_lo(self, rank: int) -> np.ndarray:
        return self.rank_coords(rank) * self.own_cells

    def dom_borders(self, rank: int) -> np.ndarray:
        """Borders as [lo_x, hi_x, lo_y, hi_y, lo_z, hi_z]."""
        lo = self.own_cell_lo(rank) * self.cell_size
        hi = (self.own_cell_lo(rank) + self.own_cells) * self.cell_size
        out = np.empty(6)
        out[0::2] = lo
        out[1::2] = hi
        return out

    def lower(self, rank: int) -> np.ndarray:
        return self.dom_borders(rank)[0::2]

    def upper(self, rank: int) -> np.ndarray:
        return self.dom_borders(rank)[1::2]

    def global_flat_cells(self, gcoords: np.ndarray) -> np.ndarray:
        """Flatten global (wrapped) cell coordinates, x most significant."""
        L = self.edge_length
        g = np.mod(np.asarray(gcoords, dtype=np.int64), L)
        return (g[..., 0] * L + g[..., 1]) * L + g[..., 2]


def _build_neighbor_table(dims: np.ndarray) -> np.ndarray:
    n_ranks = int(np.prod(dims))
    codes = np.arange(27)
    disp = np.stack([codes // 9 - 1, (codes // 3) % 3 - 1, codes % 3 - 1], axis=1)
    table = np.empty((n_ranks, 27), dtype=np.int64)
    for rank in range(n_ranks):
        ry, rz = int(dims[1]), int(dims[2])
        coords = np.array([rank // (ry * rz), (rank // rz) % ry, rank % rz])
        neigh = np.mod(coords + disp, dims)
        table[rank] = (neigh[:, 0] * dims[1] + neigh[:, 1]) * dims[2] + neigh[:, 2]
    return table


def build_decomposition(L: int, a: float, rank_dims) -> DomainGrid:
    """Validate and build the rank grid for an L^3-cell box."""
    if int(L) != L or L < 1:
        raise ConfigError("edge_length must be a positive integer")
    if not a > 0:
        raise ConfigError("cell_size must be positive")
    return DomainGrid(
        edge_length=int(L), cell_size=float(a), rank_dims=tuple(int(d) for d in rank_dims)
    )


def classify_base3(positions: np.ndarray, dom_borders: np.ndarray) -> np.ndarray:
    """Base-3 side code of positions relative to a rank's borders.

    Branch-free: the two comparisons are cast to integers, giving
    digit = 1 - (x < lower) + (x >= upper) per axis.
    """
    pos = np.asarray(positions, dtype=np.float64)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    lo = dom_borders[0::2]
    hi = dom_borders[1::2]
    digit = 1 - (pos < lo).astype(np.int64) + (pos >= hi).astype(np.int64)
    code = digit[:, 0] * 9 + digit[:, 1] * 3 + digit[:, 2]
    return int(code[0]) if single else code


def code_digits(code) -> np.ndarray:
    """Per-axis digits (x, y, z) of base-3 codes."""
    c = np.asarray(code, dtype=np.int64)
    return np.stack([c // 9, (c // 3) % 3, c % 3], axis=-1)


def reflect_code(code):
    """Code of the opposite displacement (digit 0 <-> 2 per axis)."""
    return 26 - code


def neighbor_rank(code: int, grid: DomainGrid, self_rank: int) -> int:
    if not 0 <= code <= 26:
        raise ConfigError("base-3 code must lie in 0..26")
    return int(grid.neighbor_table[self_rank, code])
