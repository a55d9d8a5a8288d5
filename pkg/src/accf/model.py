"""Core value types: hybrid timestamps, dependency sets, versions, messages.

All types in this module are immutable values; they are safe to copy between
simulated actors and never shared as mutable state.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

ServerId = str
ClientId = str
TrackingGroupId = str
CheckingGroupId = str
Key = str
Value = str

# Distinguished GET error codes, surfaced to clients in GetReply.error.
ERR_UNKNOWN_CHECKING_GROUP = "unknown_checking_group"
ERR_NOT_HOSTED = "not_hosted"
ERR_TIMEOUT = "timeout"


class MalformedVersionError(ValueError):
    """A version lacks the dependency entry for its origin's tracking group."""


@dataclass(frozen=True, order=True)
class HlcTimestamp:
    """Hybrid logical clock value.

    ``l`` is the physical component in simulated milliseconds, ``c`` a logical
    counter.  Ordering is lexicographic on ``(l, c)``, which totally orders
    all timestamps.
    """

    l: int = 0
    c: int = 0

    def __post_init__(self) -> None:
        if self.l < 0 or self.c < 0:
            raise ValueError(f"negative timestamp component: ({self.l}, {self.c})")

    def render(self) -> str:
        if self == INFINITY:
            return "inf"
        return f"{self.l}.{self.c}"

    @classmethod
    def parse(cls, text: str) -> HlcTimestamp:
        if text == "inf":
            return INFINITY
        l_text, _, c_text = text.partition(".")
        try:
            return cls(int(l_text), int(c_text))
        except ValueError as exc:
            raise ValueError(f"bad timestamp {text!r}") from exc

    def __repr__(self) -> str:
        return f"({self.l},{self.c})"


ZERO = HlcTimestamp(0, 0)

# Marker for version-vector entries with no key-sharing peer in a tracking
# group.  Real timestamps carry simulated-millisecond l values, so this never
# collides with one.
INFINITY = HlcTimestamp(sys.maxsize, sys.maxsize)


def render_ts_map(entries: Mapping[str, HlcTimestamp]) -> str:
    """Canonical text for a group->timestamp map: sorted ``tg=l.c`` pairs."""
    return ",".join(f"{tg}={ts.render()}" for tg, ts in sorted(entries.items()))


def parse_ts_map(text: str) -> dict[str, HlcTimestamp]:
    entries: dict[str, HlcTimestamp] = {}
    if not text:
        return entries
    for part in text.split(","):
        tg, sep, ts_text = part.partition("=")
        if not sep or not tg:
            raise ValueError(f"bad timestamp map entry {part!r}")
        entries[tg] = HlcTimestamp.parse(ts_text)
    return entries


@dataclass(frozen=True)
class DependencySet:
    """Per-tracking-group map of the highest causally observed timestamps.

    Merging is the join of the obvious semilattice: union of groups,
    entry-wise maximum where both sides have an entry.
    """

    entries: Mapping[TrackingGroupId, HlcTimestamp] = field(default_factory=dict)

    def merge(self, other: DependencySet) -> DependencySet:
        merged = dict(self.entries)
        for tg, ts in other.entries.items():
            cur = merged.get(tg)
            if cur is None or ts > cur:
                merged[tg] = ts
        return DependencySet(merged)

    def with_entry(self, tg: TrackingGroupId, ts: HlcTimestamp) -> DependencySet:
        return self.merge(DependencySet({tg: ts}))

    def max_timestamp(self) -> HlcTimestamp:
        """Largest timestamp across entries; (0,0) for an empty set."""
        if not self.entries:
            return ZERO
        return max(self.entries.values())

    def get(self, tg: TrackingGroupId, default: HlcTimestamp = ZERO) -> HlcTimestamp:
        return self.entries.get(tg, default)

    def dominates(self, other: DependencySet) -> bool:
        """True iff self has an entry >= every entry of other."""
        return all(self.get(tg) >= ts for tg, ts in other.entries.items())

    def items(self) -> Iterator[tuple[TrackingGroupId, HlcTimestamp]]:
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, tg: object) -> bool:
        return tg in self.entries

    def render(self) -> str:
        return render_ts_map(self.entries)

    @classmethod
    def parse(cls, text: str) -> DependencySet:
        return cls(parse_ts_map(text))


EMPTY_DS = DependencySet()


@dataclass(frozen=True)
class Version:
    """Immutable write record stored in per-key version chains.

    ``origin`` is the server that executed the PUT; the version's write
    timestamp is its dependency entry for the origin's tracking group.
    """

    key: Key
    value: Value
    ds: DependencySet
    origin: ServerId

    def write_timestamp(
        self, tracking_of: Mapping[ServerId, TrackingGroupId]
    ) -> HlcTimestamp:
        tg = tracking_of[self.origin]
        ts = self.ds.entries.get(tg)
        if ts is None:
            raise MalformedVersionError(
                f"version of {self.key!r} from {self.origin} lacks its "
                f"origin-group entry {tg}"
            )
        return ts


def version_sort_key(
    version: Version, tracking_of: Mapping[ServerId, TrackingGroupId]
) -> tuple[HlcTimestamp, TrackingGroupId, ServerId]:
    """Sort key realising the last-writer-wins total order on versions.

    Compares write timestamps, breaking ties by the origin's tracking group
    id and then the origin id, so that every chain converges to the same
    order at every host.
    """
    return (
        version.write_timestamp(tracking_of),
        tracking_of[version.origin],
        version.origin,
    )


def version_order(
    a: Version, b: Version, tracking_of: Mapping[ServerId, TrackingGroupId]
) -> int:
    """Three-way comparison under the last-writer-wins order; requires a.key == b.key."""
    if a.key != b.key:
        raise ValueError(f"cannot order versions of different keys {a.key!r}, {b.key!r}")
    ka, kb = version_sort_key(a, tracking_of), version_sort_key(b, tracking_of)
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0


@dataclass(frozen=True)
class GetReq:
    sender: ClientId
    receiver: ServerId
    key: Key
    cg: CheckingGroupId
    ds: DependencySet


@dataclass(frozen=True)
class GetReply:
    sender: ServerId
    receiver: ClientId
    key: Key
    cg: CheckingGroupId
    version: Version | None
    error: str | None = None


@dataclass(frozen=True)
class PutReq:
    sender: ClientId
    receiver: ServerId
    key: Key
    value: Value
    ds: DependencySet


@dataclass(frozen=True)
class PutReply:
    sender: ServerId
    receiver: ClientId
    key: Key
    tg: TrackingGroupId | None
    ut: HlcTimestamp | None
    error: str | None = None


@dataclass(frozen=True)
class Replicate:
    sender: ServerId
    receiver: ServerId
    key: Key
    version: Version


@dataclass(frozen=True)
class Heartbeat:
    sender: ServerId
    receiver: ServerId
    ts: HlcTimestamp


@dataclass(frozen=True)
class VVGossip:
    sender: ServerId
    receiver: ServerId
    vv: Mapping[TrackingGroupId, HlcTimestamp]


Message = Union[GetReq, GetReply, PutReq, PutReply, Replicate, Heartbeat, VVGossip]
