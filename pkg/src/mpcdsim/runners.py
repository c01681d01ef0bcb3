"""Backends that drive the per-rank phase functions.

SequentialRunner executes every rank's phases in-process, which keeps
oracle comparisons cheap and fully deterministic.  ProcessRunner puts
each rank in its own worker process; the parent only routes messages
and aggregates diagnostics, so the physics code path is identical.
Each worker initializes its own particle slice from the keyed RNG, so
no process ever holds the whole system.
"""

from __future__ import annotations

import multiprocessing as mp
import traceback

import numpy as np

from . import particles as particles_mod
from .decomposition import build_decomposition
from .engine import PHASES, build_rank_state
from .errors import MpcdError
from .exchange import Transport
from .params import SimParams
from .particles import ParticleSet, init_system, wrap_coordinates


def _merge_rank_diags(rank_diags: list[dict]) -> dict:
    """Combine per-rank step diagnostics in fixed rank order."""
    out: dict = {
        "n": 0,
        "momentum": np.zeros(3),
        "energy": 0.0,
        "mass": 0.0,
        "crossings": 0,
    }
    drifts = []
    com_ids, com_vals = [], []
    for diag in rank_diags:
        out["n"] += diag.get("n", 0)
        out["momentum"] = out["momentum"] + diag.get("momentum", 0.0)
        out["energy"] += diag.get("energy", 0.0)
        out["mass"] += diag.get("mass", 0.0)
        out["crossings"] += diag.get("crossings", 0) + diag.get("gathered_out", 0)
        if "max_cell_drift" in diag:
            drifts.append(diag["max_cell_drift"])
        if "com_ids" in diag:
            com_ids.append(diag["com_ids"])
            com_vals.append(diag["com"])
    if drifts:
        out["max_cell_drift"] = max(drifts)
    if com_ids:
        ids = np.concatenate(com_ids)
        vals = np.concatenate(com_vals)
        order = np.argsort(ids, kind="stable")
        out["com_capture"] = (ids[order], vals[order])
    return out


def _sorted_by_id(ids: np.ndarray, p: ParticleSet, box: float):
    """Canonical global view: id-ordered, coordinates wrapped into the box.

    Wrapping is an exact identity for in-range coordinates; it only
    moves lazy-policy holdings that sit outside their rank's domain.
    """
    order = np.argsort(ids, kind="stable")
    return ids[order], ParticleSet(
        wrap_coordinates(p.positions[order], box),
        p.velocities[order],
        p.masses[order],
    )


class SequentialRunner:
    """All ranks stepped in-process, one phase at a time."""

    def __init__(
        self,
        params: SimParams,
        *,
        policy: str,
        capture_drift: bool,
        capture_com: bool,
        velocity_variance: float = 1.0,
    ):
        self.params = params
        self.grid = build_decomposition(
            params.edge_length, params.cell_size, params.rank_dims
        )
        self.transport = Transport(params.n_ranks)
        self.phases = PHASES[params.scheme]
        full = init_system(params, velocity_variance=velocity_variance)
        all_ids = np.arange(params.n_particles, dtype=np.int64)
        self.states = []
        for rank in range(params.n_ranks):
            lo = self.grid.lower(rank)
            hi = self.grid.upper(rank)
            mask = np.all((full.positions >= lo) & (full.positions < hi), axis=1)
            sub = ParticleSet(
                full.positions[mask], full.velocities[mask], full.masses[mask]
            )
            self.states.append(
                build_rank_state(
                    params,
                    rank,
                    policy=policy,
                    capture_drift=capture_drift,
                    capture_com=capture_com,
                    velocity_variance=velocity_variance,
                    preinit=(all_ids[mask], sub),
                )
            )

    def run_step(self, step: int) -> dict:
        t = self.transport
        t.begin_step(step, self.params.scheme)
        n_ranks = len(self.states)
        inboxes: dict[int, list] = {r: [] for r in range(n_ranks)}
        rank_diags = [dict() for _ in range(n_ranks)]
        for phase in self.phases:
            outboxes = []
            for rank, state in enumerate(self.states):
                out, diag = phase(state, step, inboxes[rank])
                outboxes.append(out)
                if diag:
                    rank_diags[rank].update(diag)
            for rank, out in enumerate(outboxes):
                for dst, channel, code, payload in out:
                    t.send(rank, dst, channel, code, payload)
            inboxes = {r: t.drain(r) for r in range(n_ranks)}
        t.end_step()
        return _merge_rank_diags(rank_diags)

    def collect(self):
        ids = np.concatenate([s.ids for s in self.states])
        p = ParticleSet(
            np.concatenate([s.particles.positions for s in self.states]),
            np.concatenate([s.particles.velocities for s in self.states]),
            np.concatenate([s.particles.masses for s in self.states]),
        )
        return _sorted_by_id(ids, p, self.params.box_length)

    def particle_sets(self):
        return [(s.ids, s.particles) for s in self.states]

    def reduce_conservation(self):
        n = 0
        momentum = np.zeros(3)
        energy = 0.0
        mass = 0.0
        for s in self.states:
            n += s.particles.n
            momentum = momentum + particles_mod.total_momentum(s.particles)
            energy += particles_mod.kinetic_energy(s.particles)
            mass += particles_mod.total_mass(s.particles)
        return n, momentum, energy, mass

    def close(self):
        pass


def _worker_main(
    conn,
    params: SimParams,
    rank: int,
    policy: str,
    capture_drift: bool,
    capture_com: bool,
    velocity_variance: float,
):
    try:
        state = build_rank_state(
            params,
            rank,
            policy=policy,
            capture_drift=capture_drift,
            capture_com=capture_com,
            velocity_variance=velocity_variance,
        )
        phases = PHASES[params.scheme]
        conn.send(("ready", rank))
    except BaseException as exc:  # startup failure must reach the parent
        conn.send(("err", repr(exc), traceback.format_exc()))
        return
    while True:
        try:
            msg = conn.recv()
        except EOFError:
            return
        try:
            cmd = msg[0]
            if cmd == "phase":
                _, idx, step, inbox = msg
                out, diag = phases[idx](state, step, inbox)
                conn.send(("ok", out, diag))
            elif cmd == "collect":
                p = state.particles
                conn.send(
                    ("ok", (state.ids, p.positions, p.velocities, p.masses))
                )
            elif cmd == "report":
                p = state.particles
                conn.send(
                    (
                        "ok",
                        (
                            p.n,
                            particles_mod.total_momentum(p),
                            particles_mod.kinetic_energy(p),
                            particles_mod.total_mass(p),
                        ),
                    )
                )
            elif cmd == "stop":
                conn.send(("ok", None))
                return
            else:
                conn.send(("err", f"unknown command {cmd!r}", ""))
        except BaseException as exc:
            conn.send(("err", repr(exc), traceback.format_exc()))


class ProcessRunner:
    """One OS process per rank; the parent routes and accounts traffic."""

    def __init__(
        self,
        params: SimParams,
        *,
        policy: str,
        capture_drift: bool,
        capture_com: bool,
        velocity_variance: float = 1.0,
    ):
        self.params = params
        self.grid = build_decomposition(
            params.edge_length, params.cell_size, params.rank_dims
        )
        self.transport = Transport(params.n_ranks)
        self.phases = PHASES[params.scheme]
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        ctx = mp.get_context(method)
        self._conns = []
        self._procs = []
        for rank in range(params.n_ranks):
            parent, child = ctx.Pipe()
            proc = ctx.Process(
                target=_worker_main,
                args=(
                    child,
                    params,
                    rank,
                    policy,
                    capture_drift,
                    capture_com,
                    velocity_variance,
                ),
                daemon=True,
            )
            proc.start()
            child.close()
            self._conns.append(parent)
            self._procs.append(proc)
        for rank, conn in enumerate(self._conns):
            self._expect(conn.recv(), rank)

    @staticmethod
    def _expect(reply, rank):
        if reply[0] == "err":
            raise MpcdError(
                f"worker rank {rank} failed: {reply[1]}\n{reply[2]}"
            )
        return reply

    def _phase_all(self, idx: int, step: int, inboxes):
        for rank, conn in enumerate(self._conns):
            conn.send(("phase", idx, step, inboxes[rank]))
        replies = []
        for rank, conn in enumerate(self._conns):
            replies.append(self._expect(conn.recv(), rank))
        return replies

    def run_step(self, step: int) -> dict:
        t = self.transport
        t.begin_step(step, self.params.scheme)
        n_ranks = len(self._conns)
        inboxes: dict[int, list] = {r: [] for r in range(n_ranks)}
        rank_diags = [dict() for _ in range(n_ranks)]
        for idx in range(len(self.phases)):
            replies = self._phase_all(idx, step, inboxes)
            for rank, (_, out, diag) in enumerate(replies):
                if diag:
                    rank_diags[rank].update(diag)
                for dst, channel, code, payload in out:
                    t.send(rank, dst, channel, code, payload)
            inboxes = {r: t.drain(r) for r in range(n_ranks)}
        t.end_step()
        return _merge_rank_diags(rank_diags)

    def _command_all(self, command: str):
        for conn in self._conns:
            conn.send((command,))
        return [
            self._expect(conn.recv(), rank)[1]
            for rank, conn in enumerate(self._conns)
        ]

    def collect(self):
        parts = self._command_all("collect")
        ids = np.concatenate([part[0] for part in parts])
        p = ParticleSet(
            np.concatenate([part[1] for part in parts]),
            np.concatenate([part[2] for part in parts]),
            np.concatenate([part[3] for part in parts]),
        )
        return _sorted_by_id(ids, p, self.params.box_length)

    def particle_sets(self):
        parts = self._command_all("collect")
        return [
            (part[0], ParticleSet(part[1], part[2], part[3])) for part in parts
        ]

    def reduce_conservation(self):
        parts = self._command_all("report")
        n = 0
        momentum = np.zeros(3)
        energy = 0.0
        mass = 0.0
        for part in parts:
            n += part[0]
            momentum = momentum + part[1]
            energy += part[2]
            mass += part[3]
        return n, momentum, energy, mass

    def close(self):
        for conn, proc in zip(self._conns, self._procs):
            try:
                conn.send(("stop",))
                conn.recv()
            except (BrokenPipeError, EOFError, OSError):
                pass
            conn.close()
        for proc in self._procs:
            proc.join(timeout=10)
            if proc.is_alive():
                proc.terminate()
                proc.join(timeout=5)
