"""Deterministic discrete-event network simulator.

Virtual time advances in integer milliseconds.  Events fire in (time,
sequence) order; identical inputs and seed always produce an identical event
stream and therefore a byte-identical trace.  Links are FIFO by default
(delivery times on a link are clamped to never overtake an earlier send); a
non-FIFO mode with optional duplicate delivery exists for robustness testing.
"""

from __future__ import annotations

import gzip
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Iterable

from .model import HlcTimestamp, Message, parse_ts_map, render_ts_map

TRACE_KINDS = frozenset(
    {
        "PUT_REQ",
        "PUT_ACK",
        "GET_REQ",
        "GET_PARK",
        "GET_REPLY",
        "REPLICATE",
        "HEARTBEAT",
        "GOSSIP",
        "RECONFIG",
    }
)

_FIELD_COUNT = 8
_EMPTY = "-"


class SimulationError(RuntimeError):
    """Fatal simulator misuse: scheduling into the past, zero timer period."""


class MalformedTraceError(ValueError):
    """A trace line does not follow the record format."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"{message}{where}")


@dataclass(frozen=True)
class TraceRecord:
    """One simulator event in the persisted execution history.

    ``origin`` names the server that created the version a record refers to
    (GET_REPLY, PUT_ACK, REPLICATE), the remote endpoint for handshake and
    gossip records, or — for error GET replies, which carry no version — the
    error code.
    """

    t: int
    actor: str
    kind: str
    key: str = ""
    wt: HlcTimestamp | None = None
    ds: dict[str, HlcTimestamp] | None = None
    cg: str = ""
    origin: str = ""

    def render(self) -> str:
        fields = [
            str(self.t),
            self.actor or _EMPTY,
            self.kind,
            self.key or _EMPTY,
            self.wt.render() if self.wt is not None else _EMPTY,
            render_ts_map(self.ds) if self.ds else _EMPTY,
            self.cg or _EMPTY,
            self.origin or _EMPTY,
        ]
        return " ".join(fields)

    @classmethod
    def parse(cls, line: str, lineno: int | None = None) -> TraceRecord:
        parts = line.split(" ")
        if len(parts) != _FIELD_COUNT:
            raise MalformedTraceError(
                f"expected {_FIELD_COUNT} fields, got {len(parts)}", lineno
            )
        t_text, actor, kind, key, wt_text, ds_text, cg, origin = parts
        if kind not in TRACE_KINDS:
            raise MalformedTraceError(f"unknown record kind {kind!r}", lineno)
        try:
            t = int(t_text)
            wt = None if wt_text == _EMPTY else HlcTimestamp.parse(wt_text)
            ds = None if ds_text == _EMPTY else parse_ts_map(ds_text)
        except ValueError as exc:
            raise MalformedTraceError(str(exc), lineno) from exc
        return cls(
            t=t,
            actor="" if actor == _EMPTY else actor,
            kind=kind,
            key="" if key == _EMPTY else key,
            wt=wt,
            ds=ds,
            cg="" if cg == _EMPTY else cg,
            origin="" if origin == _EMPTY else origin,
        )


def render_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(record.render() + "\n" for record in records)


def write_trace(path: str, records: Iterable[TraceRecord]) -> None:
    text = render_trace(records).encode()
    if str(path).endswith(".gz"):
        # mtime pinned so identical traces give identical compressed bytes
        with gzip.GzipFile(filename="", mode="wb", fileobj=open(path, "wb"), mtime=0) as fh:
            fh.write(text)
    else:
        with open(path, "wb") as fh:
            fh.write(text)


def read_trace(path: str) -> list[TraceRecord]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as fh:
        return parse_trace(fh)


def parse_trace(lines: Iterable[str]) -> list[TraceRecord]:
    records = []
    last_t = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        record = TraceRecord.parse(line, lineno)
        if record.t < last_t:
            raise MalformedTraceError("simulated time went backwards", lineno)
        last_t = record.t
        records.append(record)
    return records


@dataclass(frozen=True)
class DelayModel:
    """Message delay configuration.

    Delay for a send is ``base(src, dst) + extra + jitter`` where the base is
    a per-link override when present, else the server-server or client-server
    default depending on both endpoints being servers.  ``extra_ms`` is the
    per-server delay knob used by the sweeps: it models a server whose egress
    toward its peers (replication, heartbeats, gossip) has slowed down, so it
    applies to messages that server sends to other servers.
    """

    servers: frozenset[str]
    server_server_ms: int = 50
    client_server_ms: int = 1
    link_overrides: dict[tuple[str, str], int] = field(default_factory=dict)
    extra_ms: dict[str, int] = field(default_factory=dict)
    jitter_ms: int = 0
    fifo: bool = True

    def base(self, src: str, dst: str) -> int:
        override = self.link_overrides.get((src, dst))
        if override is not None:
            return override
        if src in self.servers and dst in self.servers:
            return self.server_server_ms
        return self.client_server_ms

    def sample(self, src: str, dst: str, rng: random.Random) -> int:
        delay = self.base(src, dst)
        if src in self.servers and dst in self.servers:
            delay += self.extra_ms.get(src, 0)
        if self.jitter_ms > 0:
            delay += rng.randrange(self.jitter_ms)
        if delay < 0:
            raise SimulationError(f"negative delay on link {src}->{dst}")
        return delay

    def with_extra(self, extra: dict[str, int]) -> DelayModel:
        merged = dict(self.extra_ms)
        merged.update(extra)
        return DelayModel(
            servers=self.servers,
            server_server_ms=self.server_server_ms,
            client_server_ms=self.client_server_ms,
            link_overrides=dict(self.link_overrides),
            extra_ms=merged,
            jitter_ms=self.jitter_ms,
            fifo=self.fifo,
        )


@dataclass(frozen=True)
class ClockModel:
    """Per-server skewed physical clocks: pc(t) = t * (1 + drift) + offset."""

    offsets_ms: dict[str, int] = field(default_factory=dict)
    drifts: dict[str, float] = field(default_factory=dict)

    def pc(self, server: str, now: int) -> int:
        drift = self.drifts.get(server, 0.0)
        value = int(now * (1.0 + drift)) + self.offsets_ms.get(server, 0)
        return max(value, 0)


@dataclass(frozen=True)
class SimStats:
    messages_sent: int
    messages_delivered: int
    messages_pending: int
    events_processed: int


class Simulation:
    """Single-threaded event loop over registered actors.

    Actors are duck-typed: servers implement ``on_message``, ``on_timer`` and
    ``on_control``; clients implement ``on_start``, ``on_message`` and
    ``on_timer``.  All state changes happen inside exactly one event at a
    time.
    """

    def __init__(
        self,
        *,
        delays: DelayModel,
        clocks: ClockModel | None = None,
        seed: int = 0,
        duplicate_prob: float = 0.0,
    ):
        self.delays = delays
        self.clocks = clocks or ClockModel()
        self.rng = random.Random(seed)
        self.seed = seed
        self.duplicate_prob = duplicate_prob
        self.now = 0
        self.trace: list[TraceRecord] = []
        self.actors: dict[str, Any] = {}
        self._heap: list[tuple[int, int, str, tuple]] = []
        self._seq = 0
        self._last_delivery: dict[tuple[str, str], int] = {}
        self._sent = 0
        self._delivered = 0
        self._processed = 0

    # -- setup -----------------------------------------------------------

    def register(self, actor_id: str, actor: Any) -> None:
        if actor_id in self.actors:
            raise SimulationError(f"duplicate actor id {actor_id}")
        self.actors[actor_id] = actor

    def schedule_timer(self, actor_id: str, period: int, kind: str) -> None:
        """Arm a recurring timer firing at now+period, now+2*period, ..."""
        if period <= 0:
            raise SimulationError(f"timer period must be positive, got {period}")
        self._push(self.now + period, actor_id, ("timer", kind, period))

    def schedule_start(self, actor_id: str, at: int = 0) -> None:
        self._push(at, actor_id, ("start",))

    def schedule_control(self, at: int, actor_ids: Iterable[str], directive: Any) -> None:
        for actor_id in actor_ids:
            self._push(at, actor_id, ("control", directive))

    def schedule_wake(self, actor_id: str, delay: int) -> None:
        self._push(self.now + delay, actor_id, ("timer", "wake", 0))

    # -- runtime services ------------------------------------------------

    def pc(self, server_id: str) -> int:
        return self.clocks.pc(server_id, self.now)

    def send(self, src: str, dst: str, msg: Message) -> None:
        delay = self.delays.sample(src, dst, self.rng)
        deliver_at = self.now + delay
        if self.delays.fifo:
            link = (src, dst)
            deliver_at = max(deliver_at, self._last_delivery.get(link, 0))
            self._last_delivery[link] = deliver_at
        self._sent += 1
        self._push(deliver_at, dst, ("msg", msg))
        # duplicate only inter-server traffic: clients have one request in
        # flight, so their links never see the protocol-level redundancy this
        # robustness mode is meant to exercise
        if (
            not self.delays.fifo
            and self.duplicate_prob > 0
            and src in self.delays.servers
            and dst in self.delays.servers
            and self.rng.random() < self.duplicate_prob
        ):
            self._sent += 1
            self._push(deliver_at + self.rng.randrange(1, 20), dst, ("msg", msg))

    def record(self, record: TraceRecord) -> None:
        self.trace.append(record)

    # -- event loop ------------------------------------------------------

    def _push(self, at: int, target: str, payload: tuple) -> None:
        if at < self.now:
            raise SimulationError(
                f"event for {target} scheduled at {at} before current time {self.now}"
            )
        heapq.heappush(self._heap, (at, self._seq, target, payload))
        self._seq += 1

    def run_until(self, t_end: int) -> SimStats:
        while self._heap and self._heap[0][0] <= t_end:
            at, _, target, payload = heapq.heappop(self._heap)
            self.now = at
            self._processed += 1
            actor = self.actors.get(target)
            if actor is None:
                raise SimulationError(f"event for unknown actor {target}")
            kind = payload[0]
            if kind == "msg":
                self._delivered += 1
                actor.on_message(self, payload[1])
            elif kind == "timer":
                _, timer_kind, period = payload
                if period:
                    self._push(at + period, target, payload)
                actor.on_timer(self, timer_kind)
            elif kind == "start":
                actor.on_start(self)
            elif kind == "control":
                actor.on_control(self, payload[1])
        self.now = t_end
        return self.stats()

    def stats(self) -> SimStats:
        pending = sum(1 for _, _, _, payload in self._heap if payload[0] == "msg")
        return SimStats(
            messages_sent=self._sent,
            messages_delivered=self._delivered,
            messages_pending=pending,
            events_processed=self._processed,
        )
