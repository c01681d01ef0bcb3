"""Scaling benchmark: timing and traffic over a (size, ranks) matrix.

Produces one CSV row per combination.  Timing covers the measured
steps only; warmup steps run first and are discarded.  Traffic columns
count algorithm channels only, so instrumentation never inflates them.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields

import numpy as np

from .engine import BACKEND_PROCESS, BACKEND_SERIAL, Simulation
from .errors import ConfigError, MpcdError
from .params import SCHEME_HALO, SimParams

DEFAULT_SIZES = (16, 32, 64)
DEFAULT_RANK_COUNTS = (1, 2, 4, 8)
DEFAULT_WARMUP = 5

CSV_COLUMNS = (
    "L",
    "ranks",
    "scheme",
    "steps",
    "seconds",
    "particles",
    "bytes_per_step",
    "msgs_per_step",
    "max_drift",
    "error",
)


@dataclass
class BenchRecord:
    L: int
    ranks: int
    scheme: str
    steps: int
    seconds: float
    particles: int
    bytes_per_step: float
    msgs_per_step: float
    max_drift: float
    error: str = ""


def rank_dims_for(n_ranks: int) -> tuple[int, int, int]:
    """Near-cubic 3d factorization of a rank count.

    Greedy: feed prime factors (largest first) to the currently
    smallest dimension.  1 -> (1,1,1), 8 -> (2,2,2), 12 -> (3,2,2).
    """
    if n_ranks < 1:
        raise ConfigError("rank count must be positive")
    factors = []
    n = n_ranks
    d = 2
    while d * d <= n:
        while n % d == 0:
            factors.append(d)
            n //= d
        d += 1
    if n > 1:
        factors.append(n)
    dims = [1, 1, 1]
    for f in sorted(factors, reverse=True):
        dims[int(np.argmin(dims))] *= f
    dims.sort(reverse=True)
    return (dims[0], dims[1], dims[2])


def run_benchmark_case(
    params: SimParams,
    *,
    steps: int,
    warmup: int = DEFAULT_WARMUP,
    backend: str = BACKEND_PROCESS,
) -> BenchRecord:
    """Time `steps` steps after `warmup` unmeasured ones."""
    if steps < 1:
        raise ConfigError("bench needs at least one measured step")
    if params.n_ranks == 1 and backend != BACKEND_PROCESS:
        backend = BACKEND_SERIAL
    sim = Simulation(params, backend=backend)
    try:
        sim.run(warmup)
        p_ref = sim.conservation_report().total_momentum
        max_drift = 0.0
        seconds = 0.0
        for _ in range(steps):
            t0 = time.perf_counter()
            sim.step()
            seconds += time.perf_counter() - t0
            mom = sim.conservation_report().total_momentum
            max_drift = max(max_drift, float(np.max(np.abs(mom - p_ref))))
        transport = getattr(sim.runner, "transport", None) if sim.runner else None
        if transport is not None and transport.records:
            recs = transport.records[-steps:]
            tot = [rec.totals() for rec in recs]
            bytes_per_step = sum(t.bytes for t in tot) / steps
            msgs_per_step = sum(t.messages for t in tot) / steps
        else:
            bytes_per_step = 0.0
            msgs_per_step = 0.0
        return BenchRecord(
            L=params.edge_length,
            ranks=params.n_ranks,
            scheme=params.scheme,
            steps=steps,
            seconds=seconds,
            particles=params.n_particles,
            bytes_per_step=bytes_per_step,
            msgs_per_step=msgs_per_step,
            max_drift=max_drift,
        )
    finally:
        sim.close()


def run_benchmark_matrix(
    sizes=DEFAULT_SIZES,
    rank_counts=DEFAULT_RANK_COUNTS,
    schemes=(SCHEME_HALO,),
    *,
    steps: int = 20,
    warmup: int = DEFAULT_WARMUP,
    density: float = 10.0,
    cell_size: float = 1.0,
    dt: float = 0.1,
    alpha_degrees: float = 130.0,
    halo_width: int = 1,
    seed: int = 0,
    backend: str = BACKEND_PROCESS,
    progress=None,
) -> list[BenchRecord]:
    records = []
    for L in sizes:
        for scheme in schemes:
            for ranks in rank_counts:
                if progress is not None:
                    progress(L, scheme, ranks)
                try:
                    params = SimParams(
                        edge_length=L,
                        cell_size=cell_size,
                        mean_density=density,
                        dt=dt,
                        alpha=np.radians(alpha_degrees),
                        halo_width=halo_width,
                        seed=seed,
                        n_steps=steps,
                        scheme=scheme,
                        rank_dims=rank_dims_for(ranks),
                    )
                    records.append(
                        run_benchmark_case(
                            params, steps=steps, warmup=warmup, backend=backend
                        )
                    )
                except Exception as exc:  # keep the matrix going
                    records.append(
                        BenchRecord(
                            L=L,
                            ranks=ranks,
                            scheme=scheme,
                            steps=steps,
                            seconds=0.0,
                            particles=0,
                            bytes_per_step=0.0,
                            msgs_per_step=0.0,
                            max_drift=0.0,
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )
    return records


def _cell_text(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(records: list[BenchRecord], path: str) -> None:
    """Write the CSV plus a small human-readable speedup summary."""
    if not records:
        raise MpcdError("benchmark produced no records")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(
                [_cell_text(getattr(rec, name)) for name in CSV_COLUMNS]
            )
    with open(path + ".summary.txt", "w") as fh:
        base: dict[tuple[int, str], float] = {}
        for rec in records:
            if rec.ranks == 1 and not rec.error and rec.seconds > 0:
                base[(rec.L, rec.scheme)] = rec.seconds
        for rec in records:
            if rec.error:
                fh.write(
                    f"L={rec.L} scheme={rec.scheme} ranks={rec.ranks}"
                    f" FAILED: {rec.error}\n"
                )
                continue
            line = (
                f"L={rec.L} scheme={rec.scheme} ranks={rec.ranks}"
                f" seconds={rec.seconds:.3f}"
                f" bytes/step={rec.bytes_per_step:.0f}"
                f" msgs/step={rec.msgs_per_step:.1f}"
            )
            ref = base.get((rec.L, rec.scheme))
            if ref is not None and rec.seconds > 0:
                line += f" speedup={ref / rec.seconds:.2f}"
            fh.write(line + "\n")


def read_report(path: str) -> list[BenchRecord]:
    field_types = {f.name: f.type for f in fields(BenchRecord)}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise MpcdError(f"unexpected benchmark columns in {path}")
        for row in reader:
            kwargs = {}
            for name in CSV_COLUMNS:
                typ = field_types[name]
                raw = row[name]
                if typ in (int, "int"):
                    kwargs[name] = int(raw)
                elif typ in (float, "float"):
                    kwargs[name] = float(raw)
                else:
                    kwargs[name] = raw
            out.append(BenchRecord(**kwargs))
    return out
