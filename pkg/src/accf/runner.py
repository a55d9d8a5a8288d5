"""Glue for assembling and running a complete simulated system."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable

from .client import ClientActor, ClientSession, Workload, make_lb
from .grouping import SystemConfig, add_checking_group, remove_checking_group
from .server import ServerNode
from .simnet import Simulation, SimStats, TraceRecord


@dataclass
class ClientSpec:
    """How to wire one client: key-class pins for its load balancer, its
    default checking group, and the workload generator factory."""

    id: str
    pins: dict[str, str]
    default_cg: str
    workload: Callable[[], Workload]
    start_ms: int = 0


@dataclass
class RunResult:
    trace: list[TraceRecord]
    servers: dict[str, ServerNode]
    clients: dict[str, ClientActor]
    stats: SimStats
    sim: Simulation


@dataclass
class Reconfiguration:
    """A scripted checking-group change applied at a point in simulated time."""

    at: int
    action: str  # "add" | "remove"
    cg: str
    members: tuple[str, ...] = ()


def build_simulation(
    config: SystemConfig,
    client_specs: Iterable[ClientSpec],
    *,
    seed: int = 0,
    park_timeout_ms: int | None = None,
    duplicate_prob: float = 0.0,
) -> tuple[Simulation, dict[str, ServerNode], dict[str, ClientActor]]:
    sim = Simulation(
        delays=config.delays,
        clocks=config.clocks,
        seed=seed,
        duplicate_prob=duplicate_prob,
    )
    servers: dict[str, ServerNode] = {}
    for server_id in config.group.servers:
        node = ServerNode(server_id, config, park_timeout_ms=park_timeout_ms)
        servers[server_id] = node
        sim.register(server_id, node)
        sim.schedule_timer(server_id, config.heartbeat_ms, "heartbeat")
        sim.schedule_timer(server_id, config.gossip_ms, "gossip")
    clients: dict[str, ClientActor] = {}
    for spec in sorted(client_specs, key=lambda s: s.id):
        session = ClientSession(
            id=spec.id, lb=make_lb(spec.pins), default_cg=spec.default_cg
        )
        actor = ClientActor(session, spec.workload(), start_ms=spec.start_ms)
        actor.bind_tracking(config.group.tracking_of)
        clients[spec.id] = actor
        sim.register(spec.id, actor)
        sim.schedule_start(spec.id, spec.start_ms)
    return sim, servers, clients


def apply_reconfigurations(
    sim: Simulation, config: SystemConfig, reconfigurations: Iterable[Reconfiguration]
) -> SystemConfig:
    """Validate and schedule scripted checking-group changes.

    Changes are validated against the evolving config up front; each change
    is then delivered as a control event to the servers it affects.
    """
    group = config.group
    for change in sorted(reconfigurations, key=lambda r: r.at):
        if change.action == "add":
            group, directive = add_checking_group(group, change.cg, change.members)
            targets = directive.members
        elif change.action == "remove":
            targets = group.checking_members[change.cg]
            group, directive = remove_checking_group(group, change.cg)
        else:
            raise ValueError(f"unknown reconfiguration action {change.action!r}")
        sim.schedule_control(change.at, targets, directive)
    return replace(config, group=group)


def run_system(
    config: SystemConfig,
    client_specs: Iterable[ClientSpec],
    *,
    duration_ms: int,
    seed: int = 0,
    park_timeout_ms: int | None = None,
    reconfigurations: Iterable[Reconfiguration] = (),
    duplicate_prob: float = 0.0,
) -> RunResult:
    sim, servers, clients = build_simulation(
        config,
        client_specs,
        seed=seed,
        park_timeout_ms=park_timeout_ms,
        duplicate_prob=duplicate_prob,
    )
    if reconfigurations:
        apply_reconfigurations(sim, config, reconfigurations)
    stats = sim.run_until(duration_ms)
    return RunResult(
        trace=sim.trace, servers=servers, clients=clients, stats=stats, sim=sim
    )
