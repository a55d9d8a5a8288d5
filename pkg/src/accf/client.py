"""Client sessions: dependency-set maintenance and GET/PUT issuing.

A session is a single logical actor with one outstanding request at a time.
Workloads are plain generators that yield :class:`Get`, :class:`Put` and
:class:`Sleep` commands and receive the operation results back, which keeps
experiment logic readable and the event loop generic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable

from .model import (
    EMPTY_DS,
    DependencySet,
    GetReply,
    GetReq,
    HlcTimestamp,
    PutReply,
    PutReq,
)
from .simnet import Simulation, SimulationError, TraceRecord


@dataclass(frozen=True)
class Get:
    key: str
    cg: str | None = None  # None uses the session default


@dataclass(frozen=True)
class Put:
    key: str
    value: str


@dataclass(frozen=True)
class Sleep:
    ms: int


Command = Get | Put | Sleep


@dataclass(frozen=True)
class GetResult:
    key: str
    value: str | None
    wt: HlcTimestamp | None
    origin: str | None
    ds: DependencySet | None
    error: str | None = None

    @property
    def found(self) -> bool:
        return self.wt is not None


@dataclass(frozen=True)
class PutResult:
    key: str
    tg: str | None
    ut: HlcTimestamp | None
    error: str | None = None


Workload = Generator[Command, object, None]


@dataclass
class ClientSession:
    """Per-session causal context: the dependency set only ever grows."""

    id: str
    lb: Callable[[str], str]
    default_cg: str
    ds: DependencySet = field(default_factory=lambda: EMPTY_DS)


class ClientActor:
    """Drives one workload generator through the simulator."""

    def __init__(self, session: ClientSession, workload: Workload, start_ms: int = 0):
        self.session = session
        self.id = session.id
        self.workload = workload
        self.start_ms = start_ms
        self.done = False
        self._awaiting: GetReq | PutReq | None = None
        self._tracking_of: dict[str, str] | None = None

    def bind_tracking(self, tracking_of: dict[str, str]) -> None:
        # used to extract write timestamps from returned versions
        self._tracking_of = tracking_of

    def on_start(self, sim: Simulation) -> None:
        self._advance(sim, None)

    def on_timer(self, sim: Simulation, kind: str) -> None:
        if kind != "wake":
            raise SimulationError(f"{self.id}: unknown timer {kind}")
        self._advance(sim, None)

    def on_message(self, sim: Simulation, msg) -> None:
        if isinstance(msg, GetReply):
            self._complete_get(sim, msg)
        elif isinstance(msg, PutReply):
            self._complete_put(sim, msg)
        else:
            raise SimulationError(f"{self.id}: unexpected message {msg!r}")

    # -- command dispatch ---------------------------------------------------

    def _advance(self, sim: Simulation, result) -> None:
        if self.done:
            return
        try:
            command = self.workload.send(result)
        except StopIteration:
            self.done = True
            return
        if isinstance(command, Get):
            cg = command.cg or self.session.default_cg
            server = self.session.lb(command.key)
            req = GetReq(self.id, server, command.key, cg, self.session.ds)
            self._awaiting = req
            sim.record(
                TraceRecord(
                    t=sim.now,
                    actor=self.id,
                    kind="GET_REQ",
                    key=command.key,
                    ds=dict(self.session.ds.entries),
                    cg=cg,
                    origin=server,
                )
            )
            sim.send(self.id, server, req)
        elif isinstance(command, Put):
            server = self.session.lb(command.key)
            req = PutReq(self.id, server, command.key, command.value, self.session.ds)
            self._awaiting = req
            sim.record(
                TraceRecord(
                    t=sim.now,
                    actor=self.id,
                    kind="PUT_REQ",
                    key=command.key,
                    ds=dict(self.session.ds.entries),
                    origin=server,
                )
            )
            sim.send(self.id, server, req)
        elif isinstance(command, Sleep):
            sim.schedule_wake(self.id, command.ms)
        else:
            raise SimulationError(f"{self.id}: unknown command {command!r}")

    # -- completions ----------------------------------------------------------

    def _complete_get(self, sim: Simulation, msg: GetReply) -> None:
        self._awaiting = None
        version = msg.version
        if version is not None:
            self.session.ds = self.session.ds.merge(version.ds)
            wt = (
                version.write_timestamp(self._tracking_of)
                if self._tracking_of is not None
                else None
            )
            result = GetResult(
                key=msg.key,
                value=version.value,
                wt=wt,
                origin=version.origin,
                ds=version.ds,
            )
            sim.record(
                TraceRecord(
                    t=sim.now,
                    actor=self.id,
                    kind="GET_REPLY",
                    key=msg.key,
                    wt=wt,
                    ds=dict(version.ds.entries),
                    cg=msg.cg,
                    origin=version.origin,
                )
            )
        else:
            result = GetResult(
                key=msg.key, value=None, wt=None, origin=None, ds=None, error=msg.error
            )
            sim.record(
                TraceRecord(
                    t=sim.now,
                    actor=self.id,
                    kind="GET_REPLY",
                    key=msg.key,
                    cg=msg.cg,
                    origin=msg.error or "",
                )
            )
        self._advance(sim, result)

    def _complete_put(self, sim: Simulation, msg: PutReply) -> None:
        self._awaiting = None
        if msg.error is None and msg.tg is not None and msg.ut is not None:
            self.session.ds = self.session.ds.with_entry(msg.tg, msg.ut)
            sim.record(
                TraceRecord(
                    t=sim.now,
                    actor=self.id,
                    kind="PUT_ACK",
                    key=msg.key,
                    wt=msg.ut,
                    ds={msg.tg: msg.ut},
                    origin=msg.sender,
                )
            )
            result = PutResult(key=msg.key, tg=msg.tg, ut=msg.ut)
        else:
            result = PutResult(key=msg.key, tg=None, ut=None, error=msg.error)
        self._advance(sim, result)


def scripted(commands: Iterable[Command]) -> Workload:
    """Workload that replays a fixed command list, ignoring results."""
    def run() -> Workload:
        for command in commands:
            yield command
    return run()


def make_lb(pins: dict[str, str], fallback: Callable[[str], str] | None = None):
    """Load balancer from explicit key-class pins (class name -> server)."""
    from .grouping import class_of_key

    def lb(key: str) -> str:
        key_class = class_of_key(key)
        if key_class in pins:
            return pins[key_class]
        if fallback is not None:
            return fallback(key)
        raise KeyError(f"no binding for key class {key_class!r}")

    return lb
