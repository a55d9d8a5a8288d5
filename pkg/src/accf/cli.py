"""Command-line entry point: config validation, runs, sweeps, trace checking.

All commands are pure functions of their files, flags and seed; the only
environment hook is ``ACCF_SEED``, which overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field

from . import experiments, runner
from .checker import check_trace
from .client import Get, Put, Sleep, scripted
from .grouping import ConfigError, SystemConfig, load_config, validate
from .simnet import MalformedTraceError, read_trace, render_trace


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, plus hashes of its artifacts."""

    config_path: str
    workload: str
    seed: int
    out_dir: str
    duration_ms: int
    hashes: dict[str, str] = field(default_factory=dict)


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-accf-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _seed_from(args: argparse.Namespace) -> int:
    env = os.environ.get("ACCF_SEED")
    if env is not None:
        return int(env)
    return args.seed


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    violations = validate(config.group)
    if violations:
        for violation in violations:
            print(f"violation: {violation}")
        return 1
    print("ok")
    return 0


def _custom_specs(workload_data: dict) -> tuple[list[runner.ClientSpec], int]:
    clients = []
    for entry in workload_data.get("clients", []):
        ops = []
        for op in entry["ops"]:
            if op[0] == "put":
                ops.append(Put(op[1], str(op[2])))
            elif op[0] == "get":
                ops.append(Get(op[1], op[2] if len(op) > 2 else None))
            elif op[0] == "sleep":
                ops.append(Sleep(int(op[1])))
            else:
                raise ConfigError(f"unknown op {op[0]!r} in workload")
        clients.append(
            runner.ClientSpec(
                id=entry["id"],
                pins=dict(entry["server_pins"]),
                default_cg=entry["default_cg"],
                workload=lambda ops=tuple(ops): scripted(ops),
                start_ms=int(entry.get("start_ms", 0)),
            )
        )
    return clients, int(workload_data.get("duration_ms", 5000))


def _workload_specs(
    name: str, config: SystemConfig, duration_ms: int | None
) -> tuple[list[runner.ClientSpec], int, str]:
    """Client specs, duration, and the completed-unit kind for measurement."""
    if name == "app1":
        specs = experiments.app1_specs(config.group, poll_ms=5)
        return specs, duration_ms or experiments.DEFAULT_DURATION_MS, "app1"
    if name == "app2":
        specs = experiments.app2_specs(
            config.group,
            experiments.APP2_PACE_MS,
            experiments.APP2_THINK_MS,
            with_writer=True,
        )
        return specs, duration_ms or experiments.DEFAULT_DURATION_MS, "app2"
    if name.endswith(".json"):
        with open(name) as fh:
            data = json.load(fh)
        specs, default_duration = _custom_specs(data)
        return specs, duration_ms or default_duration, "custom"
    raise ConfigError(f"unknown workload {name!r} (expected app1, app2 or a .json file)")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.heartbeat_ms or args.gossip_ms:
        from dataclasses import replace

        config = replace(
            config,
            heartbeat_ms=args.heartbeat_ms or config.heartbeat_ms,
            gossip_ms=args.gossip_ms or config.gossip_ms,
        )
    if args.delay_ms and args.delay_server:
        config = config.with_extra_delay({args.delay_server: args.delay_ms})
    seed = _seed_from(args)
    try:
        specs, duration_ms, kind = _workload_specs(args.workload, config, args.duration_ms)
    except (ConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        os.makedirs(args.out, exist_ok=True)
        probe = os.path.join(args.out, ".probe")
        with open(probe, "w"):
            pass
        os.unlink(probe)
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 2

    result = runner.run_system(config, specs, duration_ms=duration_ms, seed=seed)
    trace_path = os.path.join(args.out, "trace.txt")
    _atomic_write(trace_path, render_trace(result.trace))

    report = check_trace(result.trace, config.group.tracking_of)
    _atomic_write(os.path.join(args.out, "check_report.txt"), report.render())

    if kind == "app1":
        unit = experiments._is_put_ack(experiments.APP1_KEY)
    elif kind == "app2":
        unit = experiments._is_read_by("C3")
    else:
        unit = lambda r: r.kind in ("PUT_ACK", "GET_REPLY")
    measurement = experiments.measure(
        result.trace, (int(duration_ms * 0.1), duration_ms), unit
    )
    results = {
        "workload": args.workload,
        "seed": seed,
        "duration_ms": duration_ms,
        "throughput": measurement.throughput,
        "units": measurement.units,
        "mean_park_ms": measurement.mean_park_ms,
        "mean_staleness_ms": measurement.mean_staleness_ms,
        "violations": len(report.violations),
    }
    results_path = os.path.join(args.out, "results.json")
    _atomic_write(results_path, json.dumps(results, indent=2, sort_keys=True) + "\n")

    manifest = RunManifest(
        config_path=os.path.abspath(args.config),
        workload=args.workload,
        seed=seed,
        out_dir=os.path.abspath(args.out),
        duration_ms=duration_ms,
        hashes={
            "config": _sha256_file(args.config),
            "trace": _sha256_file(trace_path),
            "results": _sha256_file(results_path),
        },
    )
    _atomic_write(
        os.path.join(args.out, "manifest.json"),
        json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n",
    )

    if not report.ok:
        print(report.render(), file=sys.stderr)
        print(f"consistency violations: {len(report.violations)}", file=sys.stderr)
        return 1
    print(f"trace {manifest.hashes['trace']}")
    print(f"throughput {measurement.throughput:.4f} ops/s, no violations")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    delays = [int(d) for d in args.delays.split(",") if d != ""] if args.delays else []
    seeds = [int(s) for s in args.seeds.split(",") if s != ""] if args.seeds else []
    groupings = [g for g in args.groupings.split(",") if g]
    if not delays:
        print("error: empty delay list", file=sys.stderr)
        return 2
    if not seeds:
        print("error: empty seed list", file=sys.stderr)
        return 2
    try:
        os.makedirs(args.out, exist_ok=True)
        trace_dir = None
        if args.keep_traces:
            trace_dir = os.path.join(args.out, "traces")
            os.makedirs(trace_dir, exist_ok=True)
        result = experiments.sweep(
            args.app,
            groupings,
            delays,
            seeds,
            duration_ms=args.duration_ms or experiments.DEFAULT_DURATION_MS,
            trace_dir=trace_dir,
            progress=(lambda msg: print(msg, file=sys.stderr)) if args.verbose else None,
        )
    except (ValueError, experiments.ConsistencyFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    csv_path = os.path.join(args.out, f"{args.app}_results.csv")
    experiments.write_csv(csv_path, result.rows)
    paths = experiments.write_plot_data(result, args.out, args.app)
    print(csv_path)
    for path in paths:
        print(path)
    return 0


def cmd_check_trace(args: argparse.Namespace) -> int:
    try:
        records = read_trace(args.trace)
    except (MalformedTraceError, OSError) as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return 2
    tracking_of = None
    if args.config:
        try:
            tracking_of = load_config(args.config).group.tracking_of
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    try:
        report = check_trace(records, tracking_of)
    except MalformedTraceError as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return 2
    if args.out:
        _atomic_write(args.out, report.render())
    print(report.render(), end="")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="accf",
        description="Causally-consistent replicated KV store: simulate, sweep, check.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute one run: trace, results, check report")
    p.add_argument("--config", required=True)
    p.add_argument("--workload", required=True, help="app1, app2, or a workload .json")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--duration-ms", type=int, default=None)
    p.add_argument("--delay-ms", type=int, default=0, help="extra egress delay to inject")
    p.add_argument("--delay-server", default="", help="server receiving the extra delay")
    p.add_argument("--heartbeat-ms", type=int, default=0)
    p.add_argument("--gossip-ms", type=int, default=0)
    p.add_argument("--keep-traces", action="store_true", default=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grouping x delay x seed sweep with CSV output")
    p.add_argument("--app", required=True, choices=["app1", "app2"])
    p.add_argument("--groupings", default="two-by-two,four-by-one")
    p.add_argument("--delays", default=",".join(str(d) for d in experiments.DEFAULT_DELAYS))
    p.add_argument("--seeds", default=",".join(str(s) for s in experiments.DEFAULT_SEEDS))
    p.add_argument("--out", required=True)
    p.add_argument("--duration-ms", type=int, default=None)
    p.add_argument("--keep-traces", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-trace", help="verify causal consistency of a trace file")
    p.add_argument("trace")
    p.add_argument("--config", default="")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_check_trace)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
