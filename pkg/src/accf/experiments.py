"""Grouping experiments: the collaborative counter and cross-partition
reader workloads, delay sweeps over replica organisations, and throughput
measurement with CSV emission.

The first workload ("app1") is two clients incrementing a shared counter in
lockstep through different hosts of one partition: each client polls until it
sees the other's latest value, then writes the next one.  Its throughput is
gated by update visibility latency.  The second ("app2") is one client
alternately reading two partitions that a remote writer keeps updating; its
throughput is gated by read blocking.  Slowing one unrelated (resp. related)
server shows how the full-replica and partial-replica organisations penalise
one workload each.

Throughput is normalised against a declared best-case baseline: for app1 the
same counter ping-pong on a two-server system holding only the counter's
partition, for app2 the same read loop with the writer disabled.
"""

from __future__ import annotations

import csv
import math
import os
import statistics
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import runner
from .checker import Report, check_trace
from .client import Get, Put, Sleep, Workload
from .grouping import GroupConfig, SystemConfig, preset
from .simnet import DelayModel, TraceRecord

CSV_HEADER = "app,grouping,delay_ms,seed,throughput,normalized,mean_park_ms,mean_staleness_ms"

DEFAULT_DELAYS = (0, 50, 100, 250, 500, 1000)
DEFAULT_SEEDS = (1, 2, 3)
DEFAULT_DURATION_MS = 12_000
WARMUP_FRACTION = 0.1

# Base one-way latencies.  The reader think time in app2 deliberately exceeds
# the gossip lag (server transit + gossip period): a client alternating
# between members of one checking group then only ever carries dependencies
# that every member's cached view already covers, so its reads stay on the
# stable branch instead of chasing the visibility boundary.
SERVER_SERVER_MS = 5
CLIENT_SERVER_MS = 1
APP2_THINK_MS = 20
APP2_PACE_MS = 10

APP1_KEY = "A:counter"
APP2_KEY_A = "A:item"
APP2_KEY_B = "B:item"


class ConsistencyFailure(RuntimeError):
    """An experiment run produced causal violations; the sweep must abort."""


@dataclass(frozen=True)
class WorkloadSpec:
    """Workload shape: who talks to which servers, at what pace, how long."""

    name: str
    duration_ms: int = DEFAULT_DURATION_MS
    poll_ms: int = 5
    pace_ms: int = APP2_PACE_MS
    think_ms: int = APP2_THINK_MS
    bindings: dict[str, dict[str, str]] = field(default_factory=dict)


@dataclass(frozen=True)
class Measurement:
    throughput: float  # completed units per simulated second
    units: int
    window_ms: tuple[int, int]
    mean_park_ms: float
    max_park_ms: float
    parked: int
    mean_staleness_ms: float
    max_staleness_ms: float


@dataclass(frozen=True)
class ExperimentResult:
    app: str
    grouping: str
    delay_ms: int
    seed: int
    throughput: float
    normalized: float
    measurement: Measurement
    check: Report | None


# -- workload generators -----------------------------------------------------


def counter_incrementer(key: str, cg: str, first_value: int, poll_ms: int) -> Workload:
    """Ping-pong one integer counter: write ``first_value``, then alternate
    waiting for the peer's value and writing the next one."""
    mine = first_value
    if mine == 0:
        yield Put(key, "0")
        mine = 2
    while True:
        result = yield Get(key, cg)
        if result.found and int(result.value) == mine - 1:
            yield Put(key, str(mine))
            mine += 2
        else:
            yield Sleep(poll_ms)


def alternating_writer(key_a: str, key_b: str, pace_ms: int) -> Workload:
    """Keep two keys fresh, carrying the dependency of each write into the
    next through the session's dependency set."""
    n = 0
    while True:
        yield Put(key_a, str(n))
        yield Sleep(pace_ms)
        yield Put(key_b, str(n))
        yield Sleep(pace_ms)
        n += 1


def alternating_reader(
    key_a: str, key_b: str, cg_a: str, cg_b: str, think_ms: int
) -> Workload:
    while True:
        yield Get(key_a, cg_a)
        yield Sleep(think_ms)
        yield Get(key_b, cg_b)
        yield Sleep(think_ms)


# -- topologies ---------------------------------------------------------------


def four_server_config(
    grouping: str,
    *,
    extra_ms: dict[str, int] | None = None,
    jitter_ms: int = 0,
    heartbeat_ms: int = 10,
    gossip_ms: int = 10,
) -> SystemConfig:
    group = preset(grouping)
    delays = DelayModel(
        servers=frozenset(group.servers),
        server_server_ms=SERVER_SERVER_MS,
        client_server_ms=CLIENT_SERVER_MS,
        extra_ms=dict(extra_ms or {}),
        jitter_ms=jitter_ms,
    )
    return SystemConfig(
        group=group, delays=delays, heartbeat_ms=heartbeat_ms, gossip_ms=gossip_ms
    )


def two_server_baseline_config(
    *, heartbeat_ms: int = 10, gossip_ms: int = 10
) -> SystemConfig:
    """Best-case system for the counter workload: just the two hosts of the
    counter's partition, each checking only itself."""
    group = GroupConfig(
        servers=("A1", "A2"),
        tracking_members={"rA1": ("A1",), "rA2": ("A2",)},
        checking_members={"cgA1": ("A1",), "cgA2": ("A2",)},
        key_classes={"A": ("A1", "A2")},
    )
    delays = DelayModel(
        servers=frozenset(group.servers),
        server_server_ms=SERVER_SERVER_MS,
        client_server_ms=CLIENT_SERVER_MS,
    )
    return SystemConfig(
        group=group, delays=delays, heartbeat_ms=heartbeat_ms, gossip_ms=gossip_ms
    )


def _client_cg(group: GroupConfig, server: str) -> str:
    return sorted(group.checking_of[server])[0]


# -- measurement ---------------------------------------------------------------


def measure(
    records: Sequence[TraceRecord],
    window: tuple[int, int],
    unit: Callable[[TraceRecord], bool],
) -> Measurement:
    """Count workload-completed units inside the window and derive park and
    staleness statistics from the same slice of the trace."""
    t0, t1 = window
    if t1 <= t0:
        raise ValueError(f"empty measurement window {window}")
    units = 0
    staleness: list[int] = []
    parks: list[int] = []
    open_parks: list[tuple[str, str, int]] = []  # (client, key, t)
    for record in records:
        in_window = t0 <= record.t < t1
        if in_window and unit(record):
            units += 1
        if record.kind == "GET_PARK" and in_window:
            open_parks.append((record.origin, record.key, record.t))
        elif record.kind == "GET_REPLY":
            for i, (client, key, t_park) in enumerate(open_parks):
                if record.actor == client and record.key == key and record.t >= t_park:
                    parks.append(record.t - t_park)
                    open_parks.pop(i)
                    break
            if in_window and record.wt is not None:
                staleness.append(max(0, record.t - record.wt.l))
    return Measurement(
        throughput=units * 1000.0 / (t1 - t0),
        units=units,
        window_ms=window,
        mean_park_ms=statistics.fmean(parks) if parks else 0.0,
        max_park_ms=max(parks) if parks else 0.0,
        parked=len(parks),
        mean_staleness_ms=statistics.fmean(staleness) if staleness else 0.0,
        max_staleness_ms=max(staleness) if staleness else 0.0,
    )


def _window(duration_ms: int) -> tuple[int, int]:
    return (int(duration_ms * WARMUP_FRACTION), duration_ms)


def _run_and_measure(
    config: SystemConfig,
    specs: list[runner.ClientSpec],
    *,
    seed: int,
    duration_ms: int,
    unit: Callable[[TraceRecord], bool],
    check: bool,
    trace_path: str | None = None,
) -> tuple[Measurement, Report | None, list[TraceRecord]]:
    result = runner.run_system(config, specs, duration_ms=duration_ms, seed=seed)
    report = None
    if check:
        report = check_trace(result.trace, config.group.tracking_of)
        if not report.ok:
            raise ConsistencyFailure(report.render())
    if trace_path is not None:
        from .simnet import write_trace

        write_trace(trace_path, result.trace)
    return measure(result.trace, _window(duration_ms), unit), report, result.trace


def _is_put_ack(key: str) -> Callable[[TraceRecord], bool]:
    return lambda r: r.kind == "PUT_ACK" and r.key == key


def _is_read_by(client: str) -> Callable[[TraceRecord], bool]:
    return lambda r: r.kind == "GET_REPLY" and r.actor == client


# -- app1: collaborative counter ------------------------------------------------


def app1_specs(group: GroupConfig, poll_ms: int) -> list[runner.ClientSpec]:
    return [
        runner.ClientSpec(
            id="C1",
            pins={"A": "A1"},
            default_cg=_client_cg(group, "A1"),
            workload=lambda: counter_incrementer(
                APP1_KEY, _client_cg(group, "A1"), 0, poll_ms
            ),
        ),
        runner.ClientSpec(
            id="C2",
            pins={"A": "A2"},
            default_cg=_client_cg(group, "A2"),
            workload=lambda: counter_incrementer(
                APP1_KEY, _client_cg(group, "A2"), 1, poll_ms
            ),
        ),
    ]


def app1_baseline_throughput(
    seed: int, *, duration_ms: int = DEFAULT_DURATION_MS, poll_ms: int = 5
) -> float:
    config = two_server_baseline_config()
    specs = app1_specs(config.group, poll_ms)
    measurement, _, _ = _run_and_measure(
        config,
        specs,
        seed=seed,
        duration_ms=duration_ms,
        unit=_is_put_ack(APP1_KEY),
        check=True,
    )
    return measurement.throughput


def run_app1(
    grouping: str,
    delay_b1: int,
    seed: int,
    *,
    duration_ms: int = DEFAULT_DURATION_MS,
    poll_ms: int = 5,
    baseline: float | None = None,
    check: bool = True,
    trace_path: str | None = None,
) -> ExperimentResult:
    config = four_server_config(grouping, extra_ms={"B1": delay_b1})
    specs = app1_specs(config.group, poll_ms)
    measurement, report, _ = _run_and_measure(
        config,
        specs,
        seed=seed,
        duration_ms=duration_ms,
        unit=_is_put_ack(APP1_KEY),
        check=check,
        trace_path=trace_path,
    )
    if baseline is None:
        baseline = app1_baseline_throughput(seed, duration_ms=duration_ms, poll_ms=poll_ms)
    return ExperimentResult(
        app="app1",
        grouping=grouping,
        delay_ms=delay_b1,
        seed=seed,
        throughput=measurement.throughput,
        normalized=measurement.throughput / baseline if baseline else math.inf,
        measurement=measurement,
        check=report,
    )


# -- app2: cross-partition reader -------------------------------------------------


def app2_specs(
    group: GroupConfig, pace_ms: int, think_ms: int, *, with_writer: bool
) -> list[runner.ClientSpec]:
    cg_a = _client_cg(group, "A1")
    cg_b = _client_cg(group, "B1")
    specs = [
        runner.ClientSpec(
            id="C3",
            pins={"A": "A1", "B": "B1"},
            default_cg=cg_a,
            workload=lambda: alternating_reader(
                APP2_KEY_A, APP2_KEY_B, cg_a, cg_b, think_ms
            ),
        )
    ]
    if with_writer:
        specs.append(
            runner.ClientSpec(
                id="W1",
                pins={"A": "A2", "B": "B2"},
                default_cg=_client_cg(group, "A2"),
                workload=lambda: alternating_writer(APP2_KEY_A, APP2_KEY_B, pace_ms),
            )
        )
    return specs


def app2_baseline_throughput(
    grouping: str,
    seed: int,
    *,
    duration_ms: int = DEFAULT_DURATION_MS,
    pace_ms: int = APP2_PACE_MS,
    think_ms: int = APP2_THINK_MS,
) -> float:
    config = four_server_config(grouping)
    specs = app2_specs(config.group, pace_ms, think_ms, with_writer=False)
    measurement, _, _ = _run_and_measure(
        config,
        specs,
        seed=seed,
        duration_ms=duration_ms,
        unit=_is_read_by("C3"),
        check=True,
    )
    return measurement.throughput


def run_app2(
    grouping: str,
    delay_b2: int,
    seed: int,
    *,
    duration_ms: int = DEFAULT_DURATION_MS,
    pace_ms: int = APP2_PACE_MS,
    think_ms: int = APP2_THINK_MS,
    baseline: float | None = None,
    check: bool = True,
    trace_path: str | None = None,
) -> ExperimentResult:
    config = four_server_config(grouping, extra_ms={"B2": delay_b2})
    specs = app2_specs(config.group, pace_ms, think_ms, with_writer=True)
    measurement, report, _ = _run_and_measure(
        config,
        specs,
        seed=seed,
        duration_ms=duration_ms,
        unit=_is_read_by("C3"),
        check=check,
        trace_path=trace_path,
    )
    if baseline is None:
        baseline = app2_baseline_throughput(
            grouping, seed, duration_ms=duration_ms, pace_ms=pace_ms, think_ms=think_ms
        )
    return ExperimentResult(
        app="app2",
        grouping=grouping,
        delay_ms=delay_b2,
        seed=seed,
        throughput=measurement.throughput,
        normalized=measurement.throughput / baseline if baseline else math.inf,
        measurement=measurement,
        check=report,
    )


# -- sweeps ----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    app: str
    grouping: str
    delay_ms: int
    seed: int
    throughput: float
    normalized: float
    mean_park_ms: float
    mean_staleness_ms: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    baselines: dict[str, float]  # grouping -> baseline throughput

    def cells(self) -> dict[tuple[str, int], list[float]]:
        table: dict[tuple[str, int], list[float]] = {}
        for row in self.rows:
            table.setdefault((row.grouping, row.delay_ms), []).append(row.normalized)
        return table

    def mean_normalized(self) -> dict[tuple[str, int], float]:
        return {cell: statistics.fmean(vals) for cell, vals in self.cells().items()}


def sweep(
    app: str,
    groupings: Sequence[str] = ("two-by-two", "four-by-one"),
    delays: Sequence[int] = DEFAULT_DELAYS,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    *,
    duration_ms: int = DEFAULT_DURATION_MS,
    trace_dir: str | None = None,
    progress: Callable[[str], None] | None = None,
) -> SweepResult:
    """Cartesian product of grouping x delay x seed runs, each checked for
    consistency before its throughput is admitted.  One baseline run per
    grouping (at the first seed) anchors normalisation.  With ``trace_dir``
    every cell's trace is retained on disk."""
    if app not in ("app1", "app2"):
        raise ValueError(f"unknown app {app!r}")
    if not delays:
        raise ValueError("empty delay list")
    if not seeds:
        raise ValueError("empty seed list")
    rows: list[SweepRow] = []
    baselines: dict[str, float] = {}
    for grouping in groupings:
        if app == "app1":
            baseline = app1_baseline_throughput(seeds[0], duration_ms=duration_ms)
        else:
            baseline = app2_baseline_throughput(grouping, seeds[0], duration_ms=duration_ms)
        baselines[grouping] = baseline
        rows.append(
            SweepRow(app, f"{grouping}/baseline", 0, seeds[0], baseline, 1.0, 0.0, 0.0)
        )
        for delay in delays:
            for seed in seeds:
                if progress:
                    progress(f"{app} {grouping} delay={delay} seed={seed}")
                trace_path = None
                if trace_dir is not None:
                    trace_path = os.path.join(
                        trace_dir, f"{app}_{grouping}_d{delay}_s{seed}.trace.gz"
                    )
                if app == "app1":
                    result = run_app1(
                        grouping, delay, seed, duration_ms=duration_ms,
                        baseline=baseline, trace_path=trace_path,
                    )
                else:
                    result = run_app2(
                        grouping, delay, seed, duration_ms=duration_ms,
                        baseline=baseline, trace_path=trace_path,
                    )
                rows.append(
                    SweepRow(
                        app=app,
                        grouping=grouping,
                        delay_ms=delay,
                        seed=seed,
                        throughput=result.throughput,
                        normalized=result.normalized,
                        mean_park_ms=result.measurement.mean_park_ms,
                        mean_staleness_ms=result.measurement.mean_staleness_ms,
                    )
                )
    return SweepResult(rows=rows, baselines=baselines)


def write_csv(path: str, rows: Iterable[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER.split(","))
        for row in rows:
            writer.writerow(
                [
                    row.app,
                    row.grouping,
                    row.delay_ms,
                    row.seed,
                    f"{row.throughput:.4f}",
                    f"{row.normalized:.4f}",
                    f"{row.mean_park_ms:.3f}",
                    f"{row.mean_staleness_ms:.3f}",
                ]
            )


def write_plot_data(result: SweepResult, out_dir: str, app: str) -> list[str]:
    """One two-column file per grouping: delay and mean normalised throughput."""
    means = result.mean_normalized()
    groupings = sorted({g for g, _ in means})
    paths = []
    for grouping in groupings:
        safe = grouping.replace("/", "_")
        path = os.path.join(out_dir, f"{app}_{safe}.dat")
        series = sorted(
            (delay, value) for (g, delay), value in means.items() if g == grouping
        )
        with open(path, "w") as fh:
            for delay, value in series:
                fh.write(f"{delay} {value:.4f}\n")
        paths.append(path)
    return paths
