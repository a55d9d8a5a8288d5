"""Offline ground-truth consistency checker.

The checker rebuilds exact causality from a trace, deliberately using
whole-history precision that the protocol itself cannot afford: every write
gets the exact set of writes in its causal past (session order plus
reads-from, transitively closed), so later reads can be judged against true
happened-before rather than the protocol's group-coarsened metadata.

Version identity is (origin server, write timestamp); per-server timestamps
are strictly monotone, which makes the pair unique.  Causal cuts and
per-write dependency sets are bitmasks over write indices, so membership
tests and joins stay cheap even for long histories.

Checks per completed read, each reported with the offending record's line:

* ``causal_stale_read`` — the session already causally knows a write to the
  key that strictly supersedes the returned version (or got "not found"
  while knowing some write to the key).
* ``monotonic_read`` — the returned write timestamp regressed for this
  session and key.
* ``read_your_writes`` — the returned version is older, under the
  last-writer-wins order, than the session's own latest write to the key.
* ``hlc_order`` — a write's timestamp fails to exceed the timestamp of some
  write in its causal past.
* ``unknown_version`` — a read returned a version no traced write produced.

A reply can legitimately be traced before its writer's ack (the reader sits
closer to the server than the writer); writes are therefore resolved from
the writer's session state at first reference, which is identical at any
point between the write's request and its ack because sessions are serial.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .model import HlcTimestamp
from .simnet import MalformedTraceError, TraceRecord

VersionId = tuple[str, HlcTimestamp]


@dataclass(frozen=True)
class Violation:
    kind: str
    line: int
    session: str
    key: str
    detail: str

    def render(self) -> str:
        return (
            f"line {self.line}: {self.kind} session={self.session} "
            f"key={self.key}: {self.detail}"
        )


@dataclass
class WriteInfo:
    index: int
    vid: VersionId
    key: str
    session: str
    line: int
    dep_mask: int
    max_dep: tuple[HlcTimestamp, VersionId] | None


@dataclass
class History:
    writes: list[WriteInfo] = field(default_factory=list)
    by_vid: dict[VersionId, WriteInfo] = field(default_factory=dict)
    writes_by_key: dict[str, list[int]] = field(default_factory=dict)
    reads: int = 0
    sessions: set[str] = field(default_factory=set)


@dataclass
class Report:
    violations: list[Violation]
    writes_checked: int = 0
    reads_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def render(self) -> str:
        lines = [f"writes={self.writes_checked} reads={self.reads_checked}"]
        if self.ok:
            lines.append("no violations")
        else:
            lines.append(f"{len(self.violations)} violation(s)")
            lines.extend(v.render() for v in self.violations)
        return "\n".join(lines) + "\n"


def _vid_text(vid: VersionId) -> str:
    return f"{vid[0]}@{vid[1].render()}"


def check_trace(
    records: Sequence[TraceRecord],
    tracking_of: Mapping[str, str] | None = None,
) -> Report:
    """Replay a trace and verify causal consistency and session guarantees.

    ``tracking_of`` (server -> tracking group) sharpens the last-writer-wins
    comparison used by the read-your-writes check; without it, equal-timestamp
    ties across different origins are treated conservatively as fresh.
    """
    violations: list[Violation] = []
    history = History()
    writes = history.writes

    # who acked each version, learned up front so early replies resolve exactly
    ack_writer: dict[VersionId, str] = {}
    for line_index, record in enumerate(records, start=1):
        if record.kind == "PUT_ACK":
            if record.wt is None or not record.origin:
                raise MalformedTraceError(
                    "write ack without version identity", line_index
                )
            ack_writer[(record.origin, record.wt)] = record.actor

    cut: dict[str, int] = {}  # session -> bitmask of writes in its causal past
    cut_max: dict[str, tuple[HlcTimestamp, VersionId] | None] = {}
    last_read_wt: dict[tuple[str, str], tuple[HlcTimestamp, int]] = {}
    own_latest: dict[tuple[str, str], WriteInfo] = {}
    pending_req: dict[str, tuple[str, str]] = {}  # session -> (key, server)

    def lww_key(vid: VersionId):
        origin, wt = vid
        if tracking_of is not None and origin in tracking_of:
            return (wt, tracking_of[origin], origin)
        return (wt, "", origin)

    def resolve_write(vid: VersionId, key: str, session: str, line: int) -> WriteInfo:
        info = WriteInfo(
            index=len(writes),
            vid=vid,
            key=key,
            session=session,
            line=line,
            dep_mask=cut.get(session, 0),
            max_dep=cut_max.get(session),
        )
        writes.append(info)
        history.by_vid[vid] = info
        history.writes_by_key.setdefault(key, []).append(info.index)
        if info.max_dep is not None and vid[1] <= info.max_dep[0]:
            violations.append(
                Violation(
                    "hlc_order",
                    line,
                    session,
                    key,
                    f"write {_vid_text(vid)} not above causal dependency "
                    f"{_vid_text(info.max_dep[1])}",
                )
            )
        return info

    def join_cut(session: str, info: WriteInfo) -> None:
        cut[session] = cut.get(session, 0) | info.dep_mask | (1 << info.index)
        current = cut_max.get(session)
        if current is None or info.vid[1] > current[0]:
            cut_max[session] = (info.vid[1], info.vid)
        if info.max_dep is not None and info.max_dep[0] > cut_max[session][0]:
            cut_max[session] = info.max_dep

    def resolve_version(vid: VersionId, key: str, line: int) -> WriteInfo | None:
        info = history.by_vid.get(vid)
        if info is not None:
            return info
        writer = ack_writer.get(vid)
        if writer is None:
            # the ack may still be in flight at the end of the run; attribute
            # through a uniquely matching outstanding request
            candidates = sorted(
                s for s, (k, srv) in pending_req.items() if k == key and srv == vid[0]
            )
            if not candidates:
                return None
            writer = candidates[0]
        return resolve_write(vid, key, writer, line)

    for line_index, record in enumerate(records, start=1):
        kind = record.kind
        session = record.actor
        if kind == "PUT_REQ":
            history.sessions.add(session)
            pending_req[session] = (record.key, record.origin)
        elif kind == "PUT_ACK":
            history.sessions.add(session)
            pending_req.pop(session, None)
            vid = (record.origin, record.wt)
            info = history.by_vid.get(vid)
            if info is None:
                info = resolve_write(vid, record.key, session, line_index)
            join_cut(session, info)
            own_latest[(session, record.key)] = info
        elif kind == "GET_REPLY":
            history.sessions.add(session)
            history.reads += 1
            session_cut = cut.get(session, 0)
            key = record.key
            if record.wt is None:
                # origin column carries the error code for exceptional replies;
                # a plain not-found is a read of "nothing"
                if not record.origin:
                    known = [
                        i
                        for i in history.writes_by_key.get(key, [])
                        if session_cut >> i & 1
                    ]
                    if known:
                        w = writes[known[-1]]
                        violations.append(
                            Violation(
                                "causal_stale_read",
                                line_index,
                                session,
                                key,
                                "read nothing while causally knowing "
                                f"{_vid_text(w.vid)}",
                            )
                        )
                continue
            if not record.origin:
                raise MalformedTraceError("versioned reply without origin", line_index)
            vid = (record.origin, record.wt)
            info = resolve_version(vid, key, line_index)
            if info is None:
                violations.append(
                    Violation(
                        "unknown_version",
                        line_index,
                        session,
                        key,
                        f"read version {_vid_text(vid)} with no traced write",
                    )
                )
                continue
            # (a) staleness against everything the session causally knows
            for index in history.writes_by_key.get(key, []):
                if not (session_cut >> index & 1):
                    continue
                w = writes[index]
                if w.vid != vid and (w.dep_mask >> info.index & 1):
                    violations.append(
                        Violation(
                            "causal_stale_read",
                            line_index,
                            session,
                            key,
                            f"returned {_vid_text(vid)} but session already "
                            f"knows {_vid_text(w.vid)} which causally "
                            f"supersedes it",
                        )
                    )
                    break
            # (b) per-key monotonic reads by write timestamp
            prev = last_read_wt.get((session, key))
            if prev is not None and vid[1] < prev[0]:
                violations.append(
                    Violation(
                        "monotonic_read",
                        line_index,
                        session,
                        key,
                        f"wt regressed from {prev[0].render()} (line {prev[1]}) "
                        f"to {vid[1].render()}",
                    )
                )
            if prev is None or vid[1] > prev[0]:
                last_read_wt[(session, key)] = (vid[1], line_index)
            # (c) read-your-writes under the last-writer-wins order
            own = own_latest.get((session, key))
            if own is not None and lww_key(vid) < lww_key(own.vid):
                violations.append(
                    Violation(
                        "read_your_writes",
                        line_index,
                        session,
                        key,
                        f"returned {_vid_text(vid)} older than own write "
                        f"{_vid_text(own.vid)}",
                    )
                )
            join_cut(session, info)

    return Report(
        violations=violations,
        writes_checked=len(writes),
        reads_checked=history.reads,
    )
