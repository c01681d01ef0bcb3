"""Counter-based random number generation with explicit keys.

Every random quantity in the simulation is addressed by a key
(seed, step, purpose, cell) plus a draw index, so any rank can
reproduce any draw without sharing generator state.  Streams are
therefore identical regardless of how work is split across ranks.

The generator is a chain of splitmix64 finalizer rounds over the key
words.  It is not cryptographic; it only has to decorrelate nearby
keys, which the statistical tests check empirically.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MULT_A = np.uint64(0xBF58476D1CE4E5B9)
_MULT_B = np.uint64(0x94D049BB133111EB)
_SEQ = np.uint64(0x2545F4914F6CDD1D)
_INV_2_53 = 1.0 / (1 << 53)


class Purpose(IntEnum):
    """Independent stream families drawn during a run."""

    SHIFT = 0
    AXIS = 1
    INIT = 2


@dataclass(frozen=True)
class RngKey:
    seed: int
    step: int = 0
    purpose: int = Purpose.INIT
    cell_id: int = 0

    def __post_init__(self):
        for name in ("seed", "step", "purpose", "cell_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 1 << 64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit word")


def _mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    # splitmix64 finalizer; uint64 wraparound is intended
    x = (x ^ (x >> np.uint64(30))) * _MULT_A
    x = (x ^ (x >> np.uint64(27))) * _MULT_B
    return x ^ (x >> np.uint64(31))


def _absorb(state, word):
    return _mix64(state ^ (word * _SEQ + _GOLDEN))


def _as_u64(value) -> np.uint64 | np.ndarray:
    if isinstance(value, np.ndarray):
        return value.astype(np.uint64)
    return np.uint64(int(value) & _MASK)


def key_state(seed, step, purpose, cell_id):
    """Collapse key words into one uint64 state (scalar or array).

    `cell_id` may be an integer array; the result then has its shape.
    """
    with np.errstate(over="ignore"):
        s = _mix64(_as_u64(seed) * _SEQ + _GOLDEN)
        s = _absorb(s, _as_u64(step))
        s = _absorb(s, _as_u64(purpose))
        s = _absorb(s, _as_u64(cell_id))
    return s


def state_of(key: RngKey):
    return key_state(key.seed, key.step, key.purpose, key.cell_id)


def uniform_at(state, index):
    """Uniform float64 in [0, 1) at the given draw index.

    `state` and `index` broadcast against each other, so one call can
    service many cells or many counters at once.
    """
    with np.errstate(over="ignore"):
        h = _mix64(state ^ ((_as_u64(index) + np.uint64(1)) * _SEQ))
    return (h >> np.uint64(11)) * _INV_2_53


def gaussian_at(state, index):
    """Standard normal draw(s) via Box-Muller on counters 2i and 2i+1."""
    idx = _as_u64(index)
    with np.errstate(over="ignore"):
        two_i = idx * np.uint64(2)
    u1 = uniform_at(state, two_i)
    u2 = uniform_at(state, two_i + np.uint64(1))
    # 1 - u1 lies in (0, 1], so the log is finite
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    return r * np.cos(2.0 * np.pi * u2)


def sample_uniform(key: RngKey, count: int) -> np.ndarray:
    """First `count` uniforms of the keyed stream."""
    state = state_of(key)
    return np.atleast_1d(uniform_at(state, np.arange(count, dtype=np.uint64)))
