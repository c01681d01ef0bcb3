"""Particle storage, initialization, streaming, and periodic wrapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError
from .params import SimParams

# Particles are generated in fixed-size chunks so that a rank can
# reconstruct any slice of the global system without holding all of it.
INIT_CHUNK = 1 << 18


@dataclass
class ParticleSet:
    """Positions, velocities, and masses of the particles on one rank."""

    positions: np.ndarray  # (n, 3) float64
    velocities: np.ndarray  # (n, 3) float64
    masses: np.ndarray  # (n,) float64

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError("positions and velocities must be (n, 3)")
        if self.masses.shape != (n,):
            raise ValueError("masses must be (n,)")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "ParticleSet":
        return ParticleSet(
            self.positions.copy(), self.velocities.copy(), self.masses.copy()
        )

    @staticmethod
    def empty() -> "ParticleSet":
        return ParticleSet(
            np.empty((0, 3)), np.empty((0, 3)), np.empty((0,))
        )


def wrap_coordinates(x: np.ndarray, box: float) -> np.ndarray:
    """Map coordinates into [0, box).

    np.mod(-tiny, box) can round up to exactly box; snap that back to
    0.0 so the wrap invariant holds for every representable input.
    """
    out = np.mod(x, box)
    return np.where(out == box, 0.0, out)


def stream_and_wrap(p: ParticleSet, dt: float, box: float) -> ParticleSet:
    """Advance positions by velocity*dt and wrap into the periodic box."""
    if box <= 0.0:
        raise ConfigError("box length must be positive")
    pos = wrap_coordinates(p.positions + p.velocities * dt, box)
    return ParticleSet(pos, p.velocities, p.masses)


def _position_chunk(state, lo: int, hi: int, box: float) -> np.ndarray:
    idx = np.arange(3 * lo, 3 * hi, dtype=np.uint64)
    u = rng.uniform_at(state, idx).reshape(hi - lo, 3)
    return u * box


def _velocity_chunk(state, ids: np.ndarray, n: int, sigma: float) -> np.ndarray:
    # gaussian counters start after the 3n position draws
    base = np.uint64(3 * n)
    cols = 3 * ids[:, None].astype(np.uint64) + np.arange(3, dtype=np.uint64)
    g = rng.gaussian_at(state, base + cols)
    return g * sigma


def mean_init_velocity(params: SimParams, velocity_variance: float = 1.0) -> np.ndarray:
    """Global mean of the raw initial velocities, before drift removal.

    Computed with a fixed chunk size so every rank derives the exact
    same value independently.
    """
    state = rng.key_state(params.seed, 0, rng.Purpose.INIT, 0)
    n = params.n_particles
    sigma = float(np.sqrt(velocity_variance))
    total = np.zeros(3)
    for lo in range(0, n, INIT_CHUNK):
        hi = min(lo + INIT_CHUNK, n)
        ids = np.arange(lo, hi, dtype=np.int64)
        total += np.sum(_velocity_chunk(state, ids, n, sigma), axis=0)
    return total / n if n else total


def init_system(
    params: SimParams,
    key: rng.RngKey | None = None,
    velocity_variance: float = 1.0,
) -> ParticleSet:
    """Build the full particle system for a run.

    Positions are uniform over the box, velocities are isotropic
    Gaussians with the given per-component variance, and the global
    mean velocity is subtracted so total momentum starts at zero.
    Masses are all 1.0.
    """
    if key is None:
        key = rng.RngKey(seed=params.seed)
    state = rng.key_state(key.seed, key.step, rng.Purpose.INIT, 0)
    n = params.n_particles
    box = params.box_length
    sigma = float(np.sqrt(velocity_variance))
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    for lo in range(0, n, INIT_CHUNK):
        hi = min(lo + INIT_CHUNK, n)
        pos[lo:hi] = _position_chunk(state, lo, hi, box)
        ids = np.arange(lo, hi, dtype=np.int64)
        vel[lo:hi] = _velocity_chunk(state, ids, n, sigma)
    vel -= mean_init_velocity(params, velocity_variance)
    return ParticleSet(pos, vel, np.ones(n))


def init_owned_slice(
    params: SimParams,
    lower: np.ndarray,
    upper: np.ndarray,
    velocity_variance: float = 1.0,
) -> tuple[np.ndarray, ParticleSet]:
    """Generate only the particles whose positions fall in [lower, upper).

    Returns (global particle ids, particles).  Every rank calling this
    over its own borders reproduces exactly its slice of init_system,
    bit for bit, without any rank ever holding the full system.
    """
    key_state = rng.key_state(params.seed, 0, rng.Purpose.INIT, 0)
    n = params.n_particles
    box = params.box_length
    sigma = float(np.sqrt(velocity_variance))
    drift = mean_init_velocity(params, velocity_variance)
    id_parts, pos_parts, vel_parts = [], [], []
    for lo in range(0, n, INIT_CHUNK):
        hi = min(lo + INIT_CHUNK, n)
        pos = _position_chunk(key_state, lo, hi, box)
        mask = np.all((pos >= lower) & (pos < upper), axis=1)
        if not mask.any():
            continue
        ids = np.arange(lo, hi, dtype=np.int64)[mask]
        id_parts.append(ids)
        pos_parts.append(pos[mask])
        vel_parts.append(_velocity_chunk(key_state, ids, n, sigma) - drift)
    if not id_parts:
        return np.empty(0, dtype=np.int64), ParticleSet.empty()
    particles = ParticleSet(
        np.concatenate(pos_parts),
        np.concatenate(vel_parts),
        np.ones(sum(len(i) for i in id_parts)),
    )
    return np.concatenate(id_parts), particles


def total_momentum(p: ParticleSet) -> np.ndarray:
    if p.n == 0:
        return np.zeros(3)
    return np.sum(p.masses[:, None] * p.velocities, axis=0)


def kinetic_energy(p: ParticleSet) -> float:
    if p.n == 0:
        return 0.0
    return float(0.5 * np.sum(p.masses * np.sum(p.velocities**2, axis=1)))


def total_mass(p: ParticleSet) -> float:
    return float(np.sum(p.masses)) if p.n else 0.0
