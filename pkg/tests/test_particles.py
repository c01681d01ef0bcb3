"""Particle storage, initialization, streaming, and wrapping."""

import numpy as np
import pytest

from mpcdsim.params import SimParams
from mpcdsim.particles import (
    ParticleSet,
    init_owned_slice,
    init_system,
    kinetic_energy,
    stream_and_wrap,
    total_mass,
    total_momentum,
    wrap_coordinates,
)


def test_wrap_identity_in_range():
    box = 8.0
    x = np.array([0.0, 1e-300, 4.0, 7.999, np.nextafter(box, 0.0)])
    assert np.array_equal(wrap_coordinates(x, box), x)


def test_wrap_negative_and_overflow():
    box = 8.0
    assert wrap_coordinates(np.array([-0.5]), box)[0] == 7.5
    assert wrap_coordinates(np.array([8.5]), box)[0] == 0.5
    assert wrap_coordinates(np.array([17.0]), box)[0] == 1.0
    assert wrap_coordinates(np.array([-16.25]), box)[0] == 7.75


def test_wrap_snaps_boundary_to_zero():
    box = 8.0
    # np.mod maps a tiny negative to exactly box; the result must stay
    # inside [0, box)
    assert np.mod(-1e-17, box) == box
    out = wrap_coordinates(np.array([-1e-17, 8.0]), box)
    assert np.all(out == 0.0)
    assert np.all(out >= 0.0) and np.all(out < box)


def test_stream_and_wrap():
    p = ParticleSet(
        np.array([[7.9, 0.1, 4.0]]),
        np.array([[2.0, -2.0, 0.0]]),
        np.ones(1),
    )
    out = stream_and_wrap(p, 0.1, 8.0)
    assert np.allclose(out.positions, [[0.1, 7.9, 4.0]])
    assert np.array_equal(out.velocities, p.velocities)


def test_particle_set_validation():
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((3, 3)), np.zeros((2, 3)), np.ones(3))
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((3, 2)), np.zeros((3, 2)), np.ones(3))


def test_init_counts_and_box():
    params = SimParams(edge_length=4, mean_density=7.0)
    p = init_system(params)
    assert p.n == params.n_particles == round(4**3 * 7.0)
    assert np.all(p.positions >= 0.0)
    assert np.all(p.positions < params.box_length)
    assert np.all(p.masses == 1.0)


def test_init_zero_total_momentum():
    params = SimParams(edge_length=6, mean_density=10.0)
    p = init_system(params)
    assert np.abs(total_momentum(p)).max() < 1e-10 * p.n


def test_init_velocity_variance():
    params = SimParams(edge_length=8, mean_density=10.0)
    p1 = init_system(params, velocity_variance=1.0)
    p4 = init_system(params, velocity_variance=4.0)
    assert np.allclose(p4.velocities, 2.0 * p1.velocities)
    assert abs(p1.velocities.var() - 1.0) < 0.02


def test_init_deterministic_and_seed_sensitive():
    a = init_system(SimParams(edge_length=4, seed=3))
    b = init_system(SimParams(edge_length=4, seed=3))
    c = init_system(SimParams(edge_length=4, seed=4))
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.velocities, b.velocities)
    assert not np.array_equal(a.positions, c.positions)


@pytest.mark.parametrize("rank_dims", [(2, 1, 1), (2, 2, 2), (4, 2, 1)])
def test_owned_slice_matches_full_init(rank_dims):
    """Per-rank init must reproduce the global init's slice bitwise."""
    params = SimParams(edge_length=4, mean_density=6.0, rank_dims=rank_dims)
    full = init_system(params)
    box = params.box_length
    n_seen = 0
    for rx in range(rank_dims[0]):
        for ry in range(rank_dims[1]):
            for rz in range(rank_dims[2]):
                lower = np.array([rx, ry, rz]) * box / np.array(rank_dims)
                upper = lower + box / np.array(rank_dims)
                ids, owned = init_owned_slice(params, lower, upper)
                mask = np.all(
                    (full.positions >= lower) & (full.positions < upper), axis=1
                )
                ref_ids = np.nonzero(mask)[0]
                assert np.array_equal(ids, ref_ids)
                assert np.array_equal(owned.positions, full.positions[mask])
                assert np.array_equal(owned.velocities, full.velocities[mask])
                n_seen += owned.n
    assert n_seen == full.n


def test_summaries_on_empty():
    empty = ParticleSet.empty()
    assert empty.n == 0
    assert np.array_equal(total_momentum(empty), np.zeros(3))
    assert kinetic_energy(empty) == 0.0
    assert total_mass(empty) == 0.0


def test_kinetic_energy_value():
    p = ParticleSet(
        np.zeros((2, 3)),
        np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]),
        np.array([1.0, 3.0]),
    )
    assert kinetic_energy(p) == pytest.approx(0.5 * 1 + 0.5 * 3 * 4)
    assert np.allclose(total_momentum(p), [1.0, 6.0, 0.0])
