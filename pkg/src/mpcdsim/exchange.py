"""Rank-to-rank communication: transport, halo reduction, migration.

Two schemes move collision data between ranks:

* migration (scheme A): whole particles travel to the rank owning
  their shifted collision cell; the pattern depends on the data and is
  rebuilt every step.
* halo reduction (scheme B): each rank bins only its own particles,
  then partial 4-component cell moments flow over a static halo plan:
  first reduced onto cell owners, then the completed sums are sent
  back.  No particle ever moves for the collision itself.

The Transport here is an in-process stand-in for a network: per-pair
FIFO queues with per-step message/byte/pair accounting, split by
payload channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .decomposition import (
    CODE_STAY,
    DomainGrid,
    classify_base3,
    code_digits,
    neighbor_rank,
)
from .errors import ConfigError, MpcdError, TopologyError
from .particles import ParticleSet, wrap_coordinates

PARTICLE_CHANNEL = "particles"
MOMENT_CHANNEL = "moments"
DIAG_CHANNEL = "diagnostic"

# Serialized particle: 3 position + 3 velocity + 1 mass float64 words.
PARTICLE_RECORD_BYTES = 7 * 8
MOMENT_RECORD_BYTES = 4 * 8
# Channels whose traffic counts as algorithm traffic (diagnostics are
# harness instrumentation and excluded from per-step byte totals).
ALGORITHM_CHANNELS = (PARTICLE_CHANNEL, MOMENT_CHANNEL)


class Message(NamedTuple):
    src: int
    channel: str
    code: int
    payload: np.ndarray


@dataclass
class ChannelStats:
    messages: int = 0
    bytes: int = 0
    pairs: int = 0


@dataclass
class CommRecord:
    """Traffic of one step, per channel."""

    step: int
    tag: str
    channels: dict[str, ChannelStats] = field(default_factory=dict)

    def totals(self, channels=ALGORITHM_CHANNELS) -> ChannelStats:
        out = ChannelStats()
        for name in channels:
            st = self.channels.get(name)
            if st is not None:
                out.messages += st.messages
                out.bytes += st.bytes
                out.pairs += st.pairs
        return out


def _accounted_bytes(channel: str, payload: np.ndarray) -> int:
    if channel == PARTICLE_CHANNEL:
        return payload.shape[0] * PARTICLE_RECORD_BYTES
    if channel == MOMENT_CHANNEL:
        return payload.shape[0] * MOMENT_RECORD_BYTES
    return payload.nbytes


class Transport:
    """Deterministic in-process message passing between ranks.

    Messages between an ordered rank pair are delivered in send order;
    draining sorts across senders by (channel, code, src) so receivers
    process their inbox in a fixed order regardless of send timing.
    """

    def __init__(self, n_ranks: int):
        self.n_ranks = n_ranks
        self._queues: dict[tuple[int, int], list[Message]] = {}
        self._pairs: dict[str, set[tuple[int, int]]] = {}
        self._record: CommRecord | None = None
        self.records: list[CommRecord] = []

    def begin_step(self, step: int, tag: str):
        if self._record is not None:
            self.end_step()
        self._record = CommRecord(step=step, tag=tag)
        self._pairs = {}

    def send(self, src: int, dst: int, channel: str, code: int, payload: np.ndarray):
        if src == dst:
            raise TopologyError("transport does not carry self-sends")
        if not (0 <= src < self.n_ranks and 0 <= dst < self.n_ranks):
            raise TopologyError(f"rank out of range: {src}->{dst}")
        if self._record is None:
            self.begin_step(len(self.records), "untagged")
        stats = self._record.channels.setdefault(channel, ChannelStats())
        stats.messages += 1
        stats.bytes += _accounted_bytes(channel, payload)
        self._pairs.setdefault(channel, set()).add((src, dst))
        self._queues.setdefault((src, dst), []).append(
            Message(src, channel, code, payload)
        )

    def drain(self, dst: int) -> list[Message]:
        """All pending messages for dst, in deterministic order."""
        collected: list[Message] = []
        for src in range(self.n_ranks):
            q = self._queues.get((src, dst))
            if q:
                collected.extend(q)
                q.clear()
        collected.sort(key=lambda m: (m.channel, m.code, m.src))
        return collected

    def end_step(self) -> CommRecord:
        pending = sum(len(q) for q in self._queues.values())
        if pending:
            raise MpcdError(f"{pending} undelivered messages at end of step")
        record = self._record
        if record is None:
            record = CommRecord(step=len(self.records), tag="idle")
        for channel, pairs in self._pairs.items():
            record.channels[channel].pairs = len(pairs)
        self.records.append(record)
        self._record = None
        self._pairs = {}
        return record


def comm_stats(transport: Transport, step: int | None = None) -> CommRecord:
    """Traffic record of the given (default: latest) completed step."""
    if not transport.records:
        return CommRecord(step=-1, tag="idle")
    if step is None:
        return transport.records[-1]
    for rec in transport.records:
        if rec.step == step:
            return rec
    raise MpcdError(f"no traffic record for step {step}")


# ---------------------------------------------------------------------------
# Static halo plan (scheme B)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HaloPlanEntry:
    """Cell index lists exchanged with one neighbor in one direction.

    send_cells are my halo cells lying in the region displaced by
    `code`; the peer owns them.  recv_cells are my owned cells that sit
    in the peer's mirrored halo.  Pass 1 (reduction) sends partials
    from send_cells and adds arriving partials into recv_cells; pass 2
    (redistribution) sends the reduced recv_cells values back and
    overwrites send_cells with the sums arriving from the owner.
    """

    code: int
    peer: int
    send_cells: np.ndarray
    recv_cells: np.ndarray


@dataclass(frozen=True)
class HaloPlan:
    """All halo traffic of one rank; depends only on topology."""

    rank: int
    dims: np.ndarray  # (3,) local grid dims including halo layers
    halo: np.ndarray  # (3,) halo layers per axis (0 on wrapped axes)
    entries: tuple[HaloPlanEntry, ...]

    def entry_for(self, code: int) -> HaloPlanEntry:
        for e in self.entries:
            if e.code == code:
                return e
        raise TopologyError(f"no halo plan entry for code {code}")

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))


def flat_cell_box(ranges, dims) -> np.ndarray:
    """Row-major flat indices of an axis-aligned index box."""
    ix, iy, iz = (np.asarray(r, dtype=np.int64) for r in ranges)
    flat = (
        (ix[:, None, None] * dims[1] + iy[None, :, None]) * dims[2]
        + iz[None, None, :]
    )
    return flat.ravel()


def build_halo_plan(grid: DomainGrid, rank: int, halo_width: int) -> HaloPlan:
    """Build the static exchange plan for one rank.

    Axes with a single rank carry no halo layer (binning wraps there
    instead), so a 1x1x1 decomposition yields an empty plan.
    """
    own = grid.own_cells
    decomposed = np.asarray(grid.rank_dims) > 1
    if decomposed.any() and halo_width < 1:
        raise ConfigError("halo scheme requires halo_width >= 1")
    halo = np.where(decomposed, halo_width, 0).astype(np.int64)
    if np.any(halo > own):
        raise ConfigError(
            "halo_width exceeds the cells per rank; halo cells would "
            "belong to non-adjacent ranks"
        )
    dims = own + 2 * halo
    entries = []
    for code in range(27):
        if code == CODE_STAY:
            continue
        digits = code_digits(code)
        if np.any((digits != 1) & ~decomposed):
            continue  # wrapped axis: periodic binning covers it
        send_ranges, recv_ranges = [], []
        for d in range(3):
            h, o = int(halo[d]), int(own[d])
            if digits[d] == 0:
                send_ranges.append(range(0, h))
                recv_ranges.append(range(h, 2 * h))
            elif digits[d] == 2:
                send_ranges.append(range(h + o, h + o + h))
                recv_ranges.append(range(o, h + o))
            else:
                send_ranges.append(range(h, h + o))
                recv_ranges.append(range(h, h + o))
        entries.append(
            HaloPlanEntry(
                code=code,
                peer=neighbor_rank(code, grid, rank),
                send_cells=flat_cell_box(send_ranges, dims),
                recv_cells=flat_cell_box(recv_ranges, dims),
            )
        )
    return HaloPlan(rank=rank, dims=dims, halo=halo, entries=tuple(entries))


def _check_field(plan: HaloPlan, moments: np.ndarray):
    if moments.shape != (plan.n_cells, 4):
        raise ConfigError(
            f"moment field shape {moments.shape} does not match plan "
            f"cells {plan.n_cells}"
        )


def reduce_outbox(plan: HaloPlan, moments: np.ndarray):
    """Pass-1 sends: partial moments of my halo cells, to their owners."""
    _check_field(plan, moments)
    return [
        (e.peer, MOMENT_CHANNEL, e.code, moments[e.send_cells])
        for e in plan.entries
    ]


def apply_reduce(plan: HaloPlan, moments: np.ndarray, inbox):
    """Pass-1 receives: add neighbor partials into my owned cells."""
    _check_field(plan, moments)
    for msg in inbox:
        entry = plan.entry_for(26 - msg.code)
        if msg.payload.shape[0] != entry.recv_cells.shape[0]:
            raise TopologyError(
                f"halo reduce payload from rank {msg.src} has "
                f"{msg.payload.shape[0]} cells, expected "
                f"{entry.recv_cells.shape[0]}"
            )
        moments[entry.recv_cells] += msg.payload


def scatter_outbox(plan: HaloPlan, moments: np.ndarray):
    """Pass-2 sends: reduced owned-cell moments back to each neighbor."""
    _check_field(plan, moments)
    return [
        (e.peer, MOMENT_CHANNEL, e.code, moments[e.recv_cells])
        for e in plan.entries
    ]


def apply_scatter(plan: HaloPlan, moments: np.ndarray, inbox):
    """Pass-2 receives: overwrite my halo cells with the reduced sums."""
    _check_field(plan, moments)
    for msg in inbox:
        entry = plan.entry_for(26 - msg.code)
        if msg.payload.shape[0] != entry.send_cells.shape[0]:
            raise TopologyError(
                f"halo scatter payload from rank {msg.src} has "
                f"{msg.payload.shape[0]} cells, expected "
                f"{entry.send_cells.shape[0]}"
            )
        moments[entry.send_cells] = msg.payload


def halo_reduce_scatter_moments(
    fields: list[np.ndarray], plans: list[HaloPlan], transport: Transport
) -> list[np.ndarray]:
    """Run both halo passes over all ranks (in-process collective).

    Mutates and returns `fields`; afterwards every rank holds the
    complete sum for every cell it touches.
    """
    for rank, plan in enumerate(plans):
        for dst, channel, code, payload in reduce_outbox(plan, fields[rank]):
            transport.send(rank, dst, channel, code, payload)
    for rank, plan in enumerate(plans):
        apply_reduce(plan, fields[rank], transport.drain(rank))
    for rank, plan in enumerate(plans):
        for dst, channel, code, payload in scatter_outbox(plan, fields[rank]):
            transport.send(rank, dst, channel, code, payload)
    for rank, plan in enumerate(plans):
        apply_scatter(plan, fields[rank], transport.drain(rank))
    return fields


# ---------------------------------------------------------------------------
# Particle packing and migration (scheme A and ownership upkeep)
# ---------------------------------------------------------------------------


@dataclass
class MigrationTag:
    """Per-particle routing: base-3 side code and destination rank."""

    base3_code: np.ndarray
    export_rank: np.ndarray


def classify_for_migration(
    positions: np.ndarray, grid: DomainGrid, rank: int, borders=None
) -> MigrationTag:
    codes = classify_base3(positions, grid.dom_borders(rank) if borders is None else borders)
    codes = np.atleast_1d(codes)
    return MigrationTag(
        base3_code=codes, export_rank=grid.neighbor_table[rank][codes]
    )


def pack_particles(ids: np.ndarray, p: ParticleSet, extra: np.ndarray | None = None):
    """Serialize rows as [pos, vel, mass, id(, extra...)] float64 columns.

    Only the 7 physics words count toward traffic accounting; id (and
    any extra integer columns) are exact in float64 below 2**53.
    """
    cols = [p.positions, p.velocities, p.masses[:, None], ids[:, None].astype(np.float64)]
    if extra is not None:
        cols.append(extra.astype(np.float64).reshape(len(ids), -1))
    return np.concatenate(cols, axis=1)


def unpack_particles(payload: np.ndarray):
    ids = payload[:, 7].astype(np.int64)
    p = ParticleSet(
        payload[:, 0:3].copy(), payload[:, 3:6].copy(), payload[:, 6].copy()
    )
    extra = payload[:, 8:] if payload.shape[1] > 8 else None
    return ids, p, extra


def frame_adjusted(
    positions: np.ndarray, code: int, rank_coords, rank_dims, box: float
) -> np.ndarray:
    """Translate positions into the destination rank's coordinate frame.

    Crossing the periodic boundary shifts the coordinate by one box
    length.  x - box is exact here (Sterbenz: box <= x < 2*box).  On
    the other side x + box rounds up to exactly box when x is a tiny
    negative, which would land on the destination's upper border, so
    that one value is nudged just below.  Coordinates legitimately
    above box (shifted-cell overhang during the gather) pass through.
    """
    digits = code_digits(code)
    pos = positions.copy()
    for d in range(3):
        disp = int(digits[d]) - 1
        if disp == 0:
            continue
        nc = int(rank_coords[d]) + disp
        if nc < 0:
            pos[:, d] += box
            pos[:, d] = np.where(
                pos[:, d] == box, np.nextafter(box, 0.0), pos[:, d]
            )
        elif nc >= int(rank_dims[d]):
            pos[:, d] -= box
    return pos


def migration_outbox(
    rank: int,
    grid: DomainGrid,
    ids: np.ndarray,
    p: ParticleSet,
    codes: np.ndarray,
    extra: np.ndarray | None = None,
):
    """Split leavers off a rank's particle arrays.

    Particles whose destination is this rank itself (coordinate wrap on
    an axis with a single rank) stay in place with wrapped coordinates,
    preserving their array order.  Returns (kept_ids, kept_particles,
    kept_extra, messages).
    """
    n = p.n
    coords = grid.rank_coords(rank)
    box = grid.box_length
    out_mask = np.zeros(n, dtype=bool)
    msgs = []
    positions = p.positions.copy()
    leaver_codes = np.unique(codes[codes != CODE_STAY])
    for code in leaver_codes:
        rows = np.nonzero(codes == code)[0]
        dst = neighbor_rank(int(code), grid, rank)
        if dst == rank:
            # Self-neighbor along single-rank axes: a plain periodic
            # wrap of the crossed axes only (untouched axes may sit
            # legitimately outside [0, box) under lazy routing).
            # frame_adjusted is wrong here: it undoes one box crossing,
            # not the multiple laps a large dt allows.
            digits = code_digits(int(code))
            for d in np.nonzero(digits != 1)[0]:
                positions[rows, d] = wrap_coordinates(positions[rows, d], box)
            continue
        positions[rows] = frame_adjusted(
            positions[rows], int(code), coords, grid.rank_dims, box
        )
        out_mask[rows] = True
        sub = ParticleSet(
            positions[rows], p.velocities[rows], p.masses[rows]
        )
        payload = pack_particles(
            ids[rows], sub, None if extra is None else extra[rows]
        )
        msgs.append((dst, PARTICLE_CHANNEL, int(code), payload))
    keep = ~out_mask
    kept = ParticleSet(positions[keep], p.velocities[keep], p.masses[keep])
    kept_extra = None if extra is None else extra[keep]
    return ids[keep], kept, kept_extra, msgs


def absorb_migration(
    ids: np.ndarray,
    p: ParticleSet,
    inbox,
    validate_borders: np.ndarray | None = None,
    base_extra: np.ndarray | None = None,
):
    """Append received particles (inbox already in deterministic order).

    With validate_borders given, every arrival must classify as inside
    them; anything else is a topology violation (usually dt*|v|
    exceeding one domain extent).  base_extra carries the kept rows'
    extra columns so they stay aligned with arriving ones.
    """
    if not inbox:
        return ids, p, base_extra
    id_parts, pos_parts, vel_parts, mass_parts = (
        [ids], [p.positions], [p.velocities], [p.masses]
    )
    extra_parts = [] if base_extra is None else [base_extra]
    for msg in inbox:
        got_ids, got, extra = unpack_particles(msg.payload)
        if validate_borders is not None and got.n:
            codes = np.atleast_1d(classify_base3(got.positions, validate_borders))
            if np.any(codes != CODE_STAY):
                bad = int(np.argmax(codes != CODE_STAY))
                raise TopologyError(
                    f"particle {int(got_ids[bad])} from rank {msg.src} at "
                    f"{got.positions[bad].tolist()} is not owned by the "
                    "receiving rank; particles must not travel farther "
                    "than one domain extent per step"
                )
        id_parts.append(got_ids)
        pos_parts.append(got.positions)
        vel_parts.append(got.velocities)
        mass_parts.append(got.masses)
        if extra is not None:
            extra_parts.append(extra)
    merged = ParticleSet(
        np.concatenate(pos_parts),
        np.concatenate(vel_parts),
        np.concatenate(mass_parts),
    )
    merged_extra = np.concatenate(extra_parts) if extra_parts else None
    return np.concatenate(id_parts), merged, merged_extra


def migrate_particles(
    grid: DomainGrid,
    sets: list[tuple[np.ndarray, ParticleSet]],
    transport: Transport,
    borders_of=None,
) -> list[tuple[np.ndarray, ParticleSet]]:
    """One full migration round over all ranks (in-process collective).

    Classifies against each rank's own borders, routes leavers, wraps
    self-destined leavers in place, and validates ownership on arrival.
    Global particle count is conserved by construction; the (src, dst)
    pattern is data-dependent and rebuilt on every call.
    """
    if borders_of is None:
        borders_of = grid.dom_borders
    staged = []
    for rank, (ids, p) in enumerate(sets):
        tag = classify_for_migration(p.positions, grid, rank, borders_of(rank))
        kept_ids, kept, _, msgs = migration_outbox(
            rank, grid, ids, p, tag.base3_code
        )
        for dst, channel, code, payload in msgs:
            transport.send(rank, dst, channel, code, payload)
        staged.append((kept_ids, kept))
    out = []
    for rank, (ids, p) in enumerate(staged):
        got_ids, merged, _ = absorb_migration(
            ids, p, transport.drain(rank), borders_of(rank)
        )
        out.append((got_ids, merged))
    return out


# ---------------------------------------------------------------------------
# Halo particle copies
# ---------------------------------------------------------------------------


def halo_copy_outbox(
    rank: int,
    grid: DomainGrid,
    ids: np.ndarray,
    p: ParticleSet,
    halo_width: int,
):
    """Read-only copies of border particles for each neighbor.

    A particle within halo_width*a of a face/edge/corner is copied once
    per overlapping region; copies crossing the periodic boundary are
    translated so they land in the receiver's halo frame.  Returns
    (messages, self_copies) where self_copies are periodic self-images
    (single-rank axes) that never touch the transport.
    """
    h = halo_width * grid.cell_size
    lo = grid.lower(rank)
    hi = grid.upper(rank)
    near_lo = p.positions < lo + h
    near_hi = p.positions >= hi - h
    coords = grid.rank_coords(rank)
    msgs = []
    self_parts = []
    for code in range(27):
        if code == CODE_STAY:
            continue
        digits = code_digits(code)
        mask = np.ones(p.n, dtype=bool)
        for d in range(3):
            if digits[d] == 0:
                mask &= near_lo[:, d]
            elif digits[d] == 2:
                mask &= near_hi[:, d]
        if not mask.any():
            continue
        rows = np.nonzero(mask)[0]
        pos = frame_adjusted(
            p.positions[rows], code, coords, grid.rank_dims, grid.box_length
        )
        sub = ParticleSet(pos, p.velocities[rows], p.masses[rows])
        dst = neighbor_rank(code, grid, rank)
        payload = pack_particles(ids[rows], sub)
        if dst == rank:
            self_parts.append(payload)
        else:
            msgs.append((dst, PARTICLE_CHANNEL, code, payload))
    return msgs, self_parts


def halo_exchange_particles(
    grid: DomainGrid,
    sets: list[tuple[np.ndarray, ParticleSet]],
    halo_width: int,
    transport: Transport,
) -> list[tuple[np.ndarray, ParticleSet]]:
    """Collect each rank's halo copies (in-process collective).

    Returns per rank the received copies as (source ids, particles);
    positions lie in the receiver's halo frame, possibly outside the
    box for wrapped images.
    """
    staged_self = []
    for rank, (ids, p) in enumerate(sets):
        msgs, self_parts = halo_copy_outbox(rank, grid, ids, p, halo_width)
        for dst, channel, code, payload in msgs:
            transport.send(rank, dst, channel, code, payload)
        staged_self.append(self_parts)
    out = []
    for rank in range(len(sets)):
        payloads = staged_self[rank] + [m.payload for m in transport.drain(rank)]
        if payloads:
            stacked = np.concatenate(payloads)
        else:
            stacked = np.empty((0, 8))
        got_ids, copies, _ = unpack_particles(stacked)
        out.append((got_ids, copies))
    return out
