"""Run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError

SCHEME_MIGRATION = "migration"
SCHEME_HALO = "halo"
SCHEMES = (SCHEME_MIGRATION, SCHEME_HALO)


@dataclass(frozen=True)
class SimParams:
    """Validated parameters for one simulation run.

    Attributes
    ----------
    edge_length : int
        Number of collision cells per box edge; the box is cubic.
    cell_size : float
        Collision cell edge length.
    mean_density : float
        Average particles per cell; the particle count is
        ``round(edge_length**3 * mean_density)``.
    dt : float
        Streaming time step.
    alpha : float
        Collision rotation angle in radians.
    halo_width : int
        Halo thickness in cells on each decomposed face.
    seed : int
        Master seed for every keyed random stream.
    n_steps : int
        Number of collision steps to run.
    scheme : str
        Parallel communication scheme, "migration" or "halo".
    rank_dims : tuple[int, int, int]
        Ranks per axis; each entry must divide ``edge_length``.
    """

    edge_length: int
    cell_size: float = 1.0
    mean_density: float = 10.0
    dt: float = 0.1
    alpha: float = math.radians(130.0)
    halo_width: int = 1
    seed: int = 0
    n_steps: int = 100
    scheme: str = SCHEME_HALO
    rank_dims: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if int(self.edge_length) != self.edge_length or self.edge_length < 1:
            raise ConfigError("edge_length must be a positive integer")
        object.__setattr__(self, "edge_length", int(self.edge_length))
        if not (self.cell_size > 0.0 and math.isfinite(self.cell_size)):
            raise ConfigError("cell_size must be positive and finite")
        if not (self.mean_density > 0.0 and math.isfinite(self.mean_density)):
            raise ConfigError("density must be positive and finite")
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive and finite")
        if not (0.0 <= self.alpha <= math.pi):
            raise ConfigError("alpha_degrees must lie in [0, 180]")
        if int(self.halo_width) != self.halo_width or self.halo_width < 0:
            raise ConfigError("halo_width must be a non-negative integer")
        object.__setattr__(self, "halo_width", int(self.halo_width))
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ConfigError("steps must be a non-negative integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if self.scheme not in SCHEMES:
            raise ConfigError(
                f"scheme must be one of {SCHEMES}, got {self.scheme!r}"
            )
        dims = tuple(int(d) for d in self.rank_dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ConfigError("rank_dims must be three positive integers")
        for d in dims:
            if self.edge_length % d != 0:
                raise ConfigError(
                    f"rank_dims entry {d} does not divide edge_length "
                    f"{self.edge_length}"
                )
        object.__setattr__(self, "rank_dims", dims)

    @property
    def box_length(self) -> float:
        return self.edge_length * self.cell_size

    @property
    def n_cells(self) -> int:
        return self.edge_length**3

    @property
    def n_particles(self) -> int:
        return round(self.n_cells * self.mean_density)

    @property
    def n_ranks(self) -> int:
        dx, dy, dz = self.rank_dims
        return dx * dy * dz
