"""Rank grid geometry and base-3 side classification."""

import numpy as np
import pytest

from mpcdsim.decomposition import (
    DomainGrid,
    build_decomposition,
    classify_base3,
    code_digits,
    neighbor_rank,
    reflect_code,
)
from mpcdsim.errors import ConfigError


def oracle_classify(pos, borders):
    """If/else reference for the branch-free classifier."""
    code = 0
    for d in range(3):
        lo, hi = borders[2 * d], borders[2 * d + 1]
        if pos[d] < lo:
            digit = 0
        elif pos[d] >= hi:
            digit = 2
        else:
            digit = 1
        code = code * 3 + digit
    return code


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def test_code_worked_example():
    # below in x (digit 0), inside in y (1), above in z (2): 0*9+1*3+2
    borders = np.array([2.0, 4.0, 2.0, 4.0, 2.0, 4.0])
    assert classify_base3(np.array([1.0, 3.0, 5.0]), borders) == 5
    # center cell
    assert classify_base3(np.array([3.0, 3.0, 3.0]), borders) == 13
    # above in all three axes
    assert classify_base3(np.array([9.0, 9.0, 9.0]), borders) == 26


def test_code_boundary_half_open():
    borders = np.array([2.0, 4.0, 2.0, 4.0, 2.0, 4.0])
    # lower border is inside, upper border is outside
    assert classify_base3(np.array([2.0, 2.0, 2.0]), borders) == 13
    assert classify_base3(np.array([4.0, 4.0, 4.0]), borders) == 26


def test_classify_matches_branching_oracle():
    rs = np.random.default_rng(7)
    borders = np.array([1.0, 3.0, 0.0, 8.0, 2.5, 5.5])
    pos = rs.uniform(-2.0, 10.0, size=(100000, 3))
    codes = classify_base3(pos, borders)
    sample = rs.choice(100000, size=500, replace=False)
    for i in sample:
        assert codes[i] == oracle_classify(pos[i], borders)
    assert np.all((codes >= 0) & (codes <= 26))


def test_classify_scalar_vs_array():
    borders = np.array([0.0, 4.0, 0.0, 4.0, 0.0, 4.0])
    pos = np.array([[1.0, -1.0, 5.0], [2.0, 2.0, 2.0]])
    codes = classify_base3(pos, borders)
    assert codes.shape == (2,)
    assert classify_base3(pos[0], borders) == codes[0]
    assert isinstance(classify_base3(pos[0], borders), int)


def test_digits_and_reflection():
    assert np.array_equal(code_digits(19), [2, 0, 1])
    assert np.array_equal(code_digits(13), [1, 1, 1])
    assert reflect_code(19) == 7
    assert np.array_equal(code_digits(7), [0, 2, 1])
    codes = np.arange(27)
    assert np.array_equal(reflect_code(reflect_code(codes)), codes)
    # reflection flips every non-center digit
    assert np.array_equal(code_digits(reflect_code(codes)), 2 - code_digits(codes))


# ---------------------------------------------------------------------------
# Rank grid
# ---------------------------------------------------------------------------


def test_grid_geometry():
    grid = build_decomposition(8, 1.0, (2, 2, 2))
    assert grid.n_ranks == 8
    assert grid.box_length == 8.0
    assert np.array_equal(grid.own_cells, [4, 4, 4])
    assert np.array_equal(grid.rank_coords(0), [0, 0, 0])
    assert np.array_equal(grid.rank_coords(7), [1, 1, 1])
    assert grid.rank_of_coords([1, 0, 1]) == 5
    for rank in range(8):
        assert grid.rank_of_coords(grid.rank_coords(rank)) == rank
    assert np.array_equal(grid.dom_borders(3), [0.0, 4.0, 4.0, 8.0, 4.0, 8.0])
    assert np.array_equal(grid.lower(3), [0.0, 4.0, 4.0])
    assert np.array_equal(grid.upper(3), [4.0, 8.0, 8.0])


def test_grid_rejects_bad_dims():
    with pytest.raises(ConfigError):
        build_decomposition(8, 1.0, (3, 1, 1))  # 3 does not divide 8
    with pytest.raises(ConfigError):
        build_decomposition(8, 1.0, (0, 1, 1))
    with pytest.raises(ConfigError):
        build_decomposition(0, 1.0, (1, 1, 1))
    with pytest.raises(ConfigError):
        build_decomposition(8, -1.0, (1, 1, 1))


def test_domains_tile_the_box():
    grid = build_decomposition(12, 0.5, (3, 2, 2))
    assert grid.n_ranks == 12
    covered = np.zeros((12, 12, 12), dtype=int)
    for rank in range(grid.n_ranks):
        lo = (grid.lower(rank) / grid.cell_size).astype(int)
        hi = (grid.upper(rank) / grid.cell_size).astype(int)
        covered[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += 1
    assert np.all(covered == 1)


def test_neighbor_table_wrapping():
    grid = build_decomposition(8, 1.0, (2, 2, 2))
    # code 13 is the rank itself
    assert neighbor_rank(13, grid, 0) == 0
    # +x from rank 0 is rank 4; -x wraps to rank 4 as well on a 2-wide axis
    assert neighbor_rank(22, grid, 0) == 4
    assert neighbor_rank(4, grid, 0) == 4
    # the (+1,+1,+1) corner of rank 0 is the opposite corner rank
    assert neighbor_rank(26, grid, 0) == 7
    # single-rank axis: every displacement returns the rank itself
    grid1 = build_decomposition(8, 1.0, (1, 1, 1))
    for code in range(27):
        assert neighbor_rank(code, grid1, 0) == 0


def test_neighbor_table_matches_coordinate_arithmetic():
    grid = build_decomposition(8, 1.0, (4, 2, 1))
    for rank in range(grid.n_ranks):
        for code in range(27):
            disp = code_digits(code) - 1
            expected = grid.rank_of_coords(grid.rank_coords(rank) + disp)
            assert neighbor_rank(code, grid, rank) == expected


def test_send_receive_codes_pair_up():
    """If rank A sends along code c, the receiver sees it arrive from
    the reflected code; the table must agree both ways."""
    grid = build_decomposition(8, 1.0, (2, 2, 1))
    for rank in range(grid.n_ranks):
        for code in range(27):
            peer = neighbor_rank(code, grid, rank)
            back = neighbor_rank(reflect_code(code), grid, peer)
            # on axes of size <= 2 the reflection may wrap onto a third
            # rank only if the axis is at least 3 wide; here it must
            # return home
            assert back == rank


def test_global_flat_cells():
    grid = build_decomposition(4, 1.0, (1, 1, 1))
    g = np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0], [3, 3, 3]])
    assert np.array_equal(grid.global_flat_cells(g), [0, 1, 4, 16, 63])
    # coordinates wrap modulo the edge length
    assert grid.global_flat_cells(np.array([4, -1, 5])) == grid.global_flat_cells(
        np.array([0, 3, 1])
    )
