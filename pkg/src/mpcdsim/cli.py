"""Command line front end: run, bench, verify, stats.

Config files are JSON with a closed key set; anything unrecognized is
rejected by name so typos cannot silently fall back to defaults.
Exit codes: 0 ok, 1 failed verification, 2 bad config/usage, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import bench as bench_mod
from .engine import (
    BACKEND_PROCESS,
    BACKEND_SERIAL,
    Simulation,
    equivalence_check,
)
from .errors import ConfigError, MpcdError
from .params import SCHEME_HALO, SCHEME_MIGRATION, SimParams

# key -> (expected python types, default); None default means required
_CONFIG_KEYS = {
    "edge_length": (int, None),
    "cell_size": ((int, float), 1.0),
    "density": ((int, float), 10.0),
    "dt": ((int, float), 0.1),
    "alpha_degrees": ((int, float), 130.0),
    "halo_width": (int, 1),
    "seed": (int, 0),
    "steps": (int, 100),
    "scheme": (str, SCHEME_HALO),
    "rank_dims": ((list, tuple), (1, 1, 1)),
    "out": (str, None),
}


def _typed(raw: dict, key: str):
    types, default = _CONFIG_KEYS[key]
    if key not in raw:
        if key == "edge_length":
            raise ConfigError("config key 'edge_length' is required (int)")
        return default
    val = raw[key]
    if isinstance(val, bool) or not isinstance(val, types):
        want = types[0].__name__ if isinstance(types, tuple) else types.__name__
        raise ConfigError(f"config key {key!r} must be of type {want}")
    return val


def parse_config(path: str) -> tuple[SimParams, dict]:
    """Read a JSON config into SimParams plus non-physics run options."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    rank_dims = _typed(raw, "rank_dims")
    if len(rank_dims) != 3 or not all(
        isinstance(v, int) and not isinstance(v, bool) and v >= 1
        for v in rank_dims
    ):
        raise ConfigError("config key 'rank_dims' must be three positive ints")
    params = SimParams(
        edge_length=_typed(raw, "edge_length"),
        cell_size=float(_typed(raw, "cell_size")),
        mean_density=float(_typed(raw, "density")),
        dt=float(_typed(raw, "dt")),
        alpha=float(np.radians(_typed(raw, "alpha_degrees"))),
        halo_width=_typed(raw, "halo_width"),
        seed=_typed(raw, "seed"),
        n_steps=_typed(raw, "steps"),
        scheme=_typed(raw, "scheme"),
        rank_dims=tuple(rank_dims),
    )
    options = {"out": _typed(raw, "out")}
    return params, options


def _default_params() -> SimParams:
    return SimParams(edge_length=16)


def _apply_overrides(params: SimParams, args) -> SimParams:
    from dataclasses import replace

    if args.seed is not None:
        params = replace(params, seed=args.seed)
    if args.ranks is not None:
        parts = args.ranks.split(",")
        if len(parts) != 3:
            raise ConfigError("--ranks expects x,y,z (three comma-separated ints)")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError("--ranks expects integer components")
        params = replace(params, rank_dims=dims)
    return params


def _backend_for(params: SimParams) -> str:
    return BACKEND_SERIAL if params.n_ranks == 1 else BACKEND_PROCESS


def _echo_config(params: SimParams, backend: str, out) -> None:
    print("run configuration:", file=out)
    print(f"  edge_length   = {params.edge_length}", file=out)
    print(f"  cell_size     = {params.cell_size}", file=out)
    print(f"  density       = {params.mean_density}", file=out)
    print(f"  dt            = {params.dt}", file=out)
    print(f"  alpha_degrees = {np.degrees(params.alpha):g}", file=out)
    print(f"  halo_width    = {params.halo_width}", file=out)
    print(f"  seed          = {params.seed}", file=out)
    print(f"  steps         = {params.n_steps}", file=out)
    print(f"  scheme        = {params.scheme}", file=out)
    print(f"  rank_dims     = {params.rank_dims}", file=out)
    print(f"  particles     = {params.n_particles}", file=out)
    print(f"  backend       = {backend}", file=out)


def cmd_run(params: SimParams, options: dict, args, out=None) -> int:
    out = sys.stdout if out is None else out
    backend = _backend_for(params)
    _echo_config(params, backend, out)
    sim = Simulation(params, backend=backend, capture_drift=True)
    try:
        start = sim.conservation_report()
        t0 = time.perf_counter()
        sim.run()
        seconds = time.perf_counter() - t0
        end = sim.conservation_report()
        max_drift = max(sim.drift_history, default=0.0)
        crossings = sum(d.get("crossings", 0) for d in sim.diagnostics)
        records = sim.comm_records
        tot_bytes = sum(r.totals().bytes for r in records)
        tot_msgs = sum(r.totals().messages for r in records)
    finally:
        sim.close()
    mom = end.total_momentum
    dmom = np.abs(mom - start.total_momentum)
    de = abs(end.kinetic_energy - start.kinetic_energy)
    rel_de = de / abs(start.kinetic_energy) if start.kinetic_energy else 0.0
    print(f"completed {params.n_steps} steps in {seconds:.3f} s", file=out)
    print(
        "  final momentum      = "
        f"({mom[0]:+.3e}, {mom[1]:+.3e}, {mom[2]:+.3e})",
        file=out,
    )
    print(f"  momentum drift      = {float(dmom.max()):.3e} (abs, max component)", file=out)
    print(f"  kinetic energy      = {end.kinetic_energy:.12e}", file=out)
    print(f"  energy drift        = {rel_de:.3e} (relative)", file=out)
    print(f"  max cell drift      = {max_drift:.3e} (relative)", file=out)
    print(f"  border crossings    = {crossings}", file=out)
    print(f"  traffic             = {tot_msgs} msgs, {tot_bytes} bytes", file=out)
    out_path = args.out or options.get("out")
    if out_path:
        payload = {
            "config": {
                "edge_length": params.edge_length,
                "cell_size": params.cell_size,
                "density": params.mean_density,
                "dt": params.dt,
                "alpha_degrees": float(np.degrees(params.alpha)),
                "halo_width": params.halo_width,
                "seed": params.seed,
                "steps": params.n_steps,
                "scheme": params.scheme,
                "rank_dims": list(params.rank_dims),
            },
            "backend": backend,
            "seconds": seconds,
            "particles": end.n_particles,
            "final_momentum": [float(v) for v in mom],
            "momentum_drift": float(dmom.max()),
            "kinetic_energy": end.kinetic_energy,
            "energy_drift_rel": rel_de,
            "max_cell_drift": max_drift,
            "crossings": int(crossings),
            "bytes_total": int(tot_bytes),
            "msgs_total": int(tot_msgs),
        }
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"wrote report to {out_path}", file=out)
    return 0


def cmd_stats(params: SimParams, options: dict, args, out=None) -> int:
    out = sys.stdout if out is None else out
    backend = _backend_for(params)
    _echo_config(params, backend, out)
    if params.n_ranks == 1:
        print("single rank: no inter-rank traffic", file=out)
        return 0
    sim = Simulation(params, backend=backend)
    try:
        sim.run()
        records = sim.comm_records
        print("step  scheme     msgs      bytes  channels", file=out)
        lines = []
        for rec in records:
            tot = rec.totals()
            per_chan = ", ".join(
                f"{name}: {st.messages} msgs/{st.bytes} B"
                for name, st in sorted(rec.channels.items())
            )
            lines.append((rec.step, rec.tag, tot.messages, tot.bytes, per_chan))
            print(
                f"{rec.step:4d}  {rec.tag:9s}  {tot.messages:5d}  {tot.bytes:9d}  {per_chan}",
                file=out,
            )
        tot_msgs = sum(x[2] for x in lines)
        tot_bytes = sum(x[3] for x in lines)
        n = max(len(lines), 1)
        print(
            f"mean per step: {tot_msgs / n:.1f} msgs, {tot_bytes / n:.1f} bytes",
            file=out,
        )
        out_path = args.out or options.get("out")
        if out_path:
            with open(out_path, "w") as fh:
                fh.write("step,scheme,msgs,bytes\n")
                for step, tag, msgs, nbytes, _ in lines:
                    fh.write(f"{step},{tag},{msgs},{nbytes}\n")
            print(f"wrote traffic table to {out_path}", file=out)
    finally:
        sim.close()
    return 0


def cmd_bench(params: SimParams, options: dict, args, out=None) -> int:
    out = sys.stdout if out is None else out

    def progress(L, scheme, ranks):
        print(f"bench: L={L} scheme={scheme} ranks={ranks}", file=sys.stderr)

    records = bench_mod.run_benchmark_matrix(
        sizes=bench_mod.DEFAULT_SIZES,
        rank_counts=bench_mod.DEFAULT_RANK_COUNTS,
        schemes=(params.scheme,),
        steps=params.n_steps,
        warmup=bench_mod.DEFAULT_WARMUP,
        density=params.mean_density,
        cell_size=params.cell_size,
        dt=params.dt,
        alpha_degrees=float(np.degrees(params.alpha)),
        halo_width=params.halo_width,
        seed=params.seed,
        backend=BACKEND_PROCESS,
        progress=progress,
    )
    out_path = args.out or options.get("out") or "bench.csv"
    bench_mod.emit_report(records, out_path)
    print(f"wrote {len(records)} rows to {out_path}", file=out)
    failures = [r for r in records if r.error]
    for rec in failures:
        print(
            f"  failed: L={rec.L} ranks={rec.ranks} scheme={rec.scheme}: {rec.error}",
            file=out,
        )
    return 3 if failures else 0


def _verify_suites(params: SimParams):
    """Compact conservation + equivalence checks, desk-sized."""
    from dataclasses import replace

    suites = []

    def conservation():
        p = replace(
            params,
            edge_length=16,
            rank_dims=(1, 1, 1),
            scheme=SCHEME_HALO,
            n_steps=50,
        )
        sim = Simulation(p, backend=BACKEND_SERIAL, capture_drift=True)
        try:
            ref = sim.conservation_report()
            sim.run()
            end = sim.conservation_report()
        finally:
            sim.close()
        dmom = float(np.abs(end.total_momentum - ref.total_momentum).max())
        de = abs(end.kinetic_energy - ref.kinetic_energy) / ref.kinetic_energy
        drift = max(sim.drift_history, default=0.0)
        ok = dmom < 1e-10 and de < 1e-9 and drift < 1e-10
        return ok, f"momentum {dmom:.2e}, energy {de:.2e}, cell {drift:.2e}"

    def equivalence(scheme):
        p = replace(params, edge_length=8, n_steps=10)
        rep = equivalence_check(p, (2, 2, 2), None, scheme, "serial", 10)
        ok = rep.max_position_dev < 1e-8 and rep.max_velocity_dev < 1e-8
        return ok, (
            f"pos {rep.max_position_dev:.2e}, vel {rep.max_velocity_dev:.2e}"
        )

    def schemes_agree():
        p = replace(params, edge_length=8, n_steps=10)
        rep = equivalence_check(
            p,
            (2, 2, 2),
            (2, 2, 2),
            SCHEME_MIGRATION,
            SCHEME_HALO,
            10,
            capture_com=True,
        )
        ok = rep.max_com_dev < 1e-10 and rep.max_position_dev < 1e-8
        return ok, f"com {rep.max_com_dev:.2e}, pos {rep.max_position_dev:.2e}"

    def static_traffic():
        from .exchange import MOMENT_CHANNEL

        p = replace(
            params, edge_length=8, rank_dims=(2, 2, 2), scheme=SCHEME_HALO,
        )
        sim = Simulation(p)
        try:
            sim.run(10)
            sizes = {
                rec.totals((MOMENT_CHANNEL,)).bytes for rec in sim.comm_records
            }
        finally:
            sim.close()
        ok = len(sizes) == 1 and next(iter(sizes)) > 0
        return ok, f"distinct per-step moment byte totals: {sorted(sizes)}"

    suites.append(("conservation-serial", conservation))
    suites.append(("equivalence-halo", lambda: equivalence(SCHEME_HALO)))
    suites.append(
        ("equivalence-migration", lambda: equivalence(SCHEME_MIGRATION))
    )
    suites.append(("schemes-agree", schemes_agree))
    suites.append(("static-traffic", static_traffic))
    return suites


def cmd_verify(params: SimParams, options: dict, args, out=None) -> int:
    out = sys.stdout if out is None else out
    failures = 0
    for name, fn in _verify_suites(params):
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        line = "PASS" if ok else "FAIL"
        print(f"{line} {name} ({detail})", file=out)
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} verification suite(s) failed", file=out)
        return 1
    print("all verification suites passed", file=out)
    return 0


_COMMANDS = {
    "run": cmd_run,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "stats": cmd_stats,
}


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpcdsim",
        description="Particle-based mesoscale fluid simulator.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--command",
        choices=sorted(_COMMANDS),
        default="run",
        help="what to do (default: run)",
    )
    parser.add_argument("--out", help="output path (overrides config 'out')")
    parser.add_argument(
        "--seed", type=int, default=None, help="override config seed"
    )
    parser.add_argument(
        "--ranks", default=None, help="override rank grid, e.g. 2,2,2"
    )
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        if args.config:
            params, options = parse_config(args.config)
        else:
            params, options = _default_params(), {"out": None}
        params = _apply_overrides(params, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](params, options, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MpcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
