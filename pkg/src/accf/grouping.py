"""Tracking/checking grouping, data placement, and configuration files.

A :class:`GroupConfig` fixes three orthogonal choices: the tracking grouping
(every server belongs to exactly one tracking group, which sets the
granularity of dependency metadata), the checking grouping (every server
belongs to a non-empty set of checking groups, whose members gossip version
vectors and jointly compute stable snapshots), and the data placement
(key-classes partition the key space; each class names its host servers).

Configs are immutable snapshots; reconfiguration produces a new epoch
snapshot plus a directive that the simulator delivers to the affected
servers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Sequence

from .model import CheckingGroupId, Key, ServerId, TrackingGroupId
from .simnet import ClockModel, DelayModel

CONFIG_VERSION = 1

PRESET_NAMES = (
    "per-server-tracking/per-replica-checking",
    "per-system-tracking/per-replica-checking",
    "per-replica-tracking/per-replica-checking",
    "per-replica-tracking/per-system-checking",
    "two-by-two",
    "four-by-one",
)


class ConfigError(ValueError):
    """Invalid grouping configuration or config file."""


def class_of_key(key: Key) -> str:
    """Key-class of a key: the prefix before the first ':' (whole key if none)."""
    return key.split(":", 1)[0]


@dataclass(frozen=True)
class AddCheckingGroup:
    """Directive telling each member server to initialise state for a new group."""

    cg: CheckingGroupId
    members: tuple[ServerId, ...]
    epoch: int


@dataclass(frozen=True)
class RemoveCheckingGroup:
    """Directive telling each former member server to drop the group's state."""

    cg: CheckingGroupId
    epoch: int


@dataclass(frozen=True)
class GroupConfig:
    """Immutable grouping snapshot: servers, T, C and data placement H."""

    servers: tuple[ServerId, ...]
    tracking_members: Mapping[TrackingGroupId, tuple[ServerId, ...]]
    checking_members: Mapping[CheckingGroupId, tuple[ServerId, ...]]
    key_classes: Mapping[str, tuple[ServerId, ...]]
    epoch: int = 0

    @cached_property
    def tracking_of(self) -> dict[ServerId, TrackingGroupId]:
        mapping: dict[ServerId, TrackingGroupId] = {}
        for tg, members in self.tracking_members.items():
            for server in members:
                mapping[server] = tg
        return mapping

    @cached_property
    def checking_of(self) -> dict[ServerId, frozenset[CheckingGroupId]]:
        mapping: dict[ServerId, set[CheckingGroupId]] = {s: set() for s in self.servers}
        for cg, members in self.checking_members.items():
            for server in members:
                mapping.setdefault(server, set()).add(cg)
        return {server: frozenset(cgs) for server, cgs in mapping.items()}

    @cached_property
    def tracking_groups(self) -> tuple[TrackingGroupId, ...]:
        return tuple(sorted(self.tracking_members))

    def hosts_for_class(self, key_class: str) -> tuple[ServerId, ...]:
        hosts = self.key_classes.get(key_class)
        if hosts is None:
            raise ConfigError(f"unknown key class {key_class!r}")
        return hosts

    def hosts_for_key(self, key: Key) -> tuple[ServerId, ...]:
        return self.hosts_for_class(class_of_key(key))

    def hosted_here(self, key: Key, server: ServerId) -> bool:
        hosts = self.key_classes.get(class_of_key(key))
        return hosts is not None and server in hosts

    def shares_key(self, i: ServerId, j: ServerId) -> bool:
        """True iff some key-class is hosted by both i and j."""
        return any(i in hosts and j in hosts for hosts in self.key_classes.values())

    def key_sharing_peers(self, server: ServerId) -> tuple[ServerId, ...]:
        """All servers sharing at least one key-class with ``server``, self
        included when it hosts anything."""
        peers = sorted(
            {s for hosts in self.key_classes.values() if server in hosts for s in hosts}
        )
        return tuple(peers)


def validate(config: GroupConfig) -> list[str]:
    """Collect every constraint violation; an empty list means the config is ok."""
    violations: list[str] = []
    servers = set(config.servers)
    if len(config.servers) != len(servers):
        violations.append("duplicate server ids")

    seen: dict[ServerId, TrackingGroupId] = {}
    for tg, members in sorted(config.tracking_members.items()):
        for server in members:
            if server not in servers:
                violations.append(f"tracking group {tg} references unknown server {server}")
            if server in seen:
                violations.append(
                    f"server {server} in tracking groups {seen[server]} and {tg}"
                )
            seen[server] = tg
    for server in sorted(servers - set(seen)):
        violations.append(f"server {server} missing from tracking assignment")

    for cg, members in sorted(config.checking_members.items()):
        if not members:
            violations.append(f"checking group {cg} has no members")
        for server in members:
            if server not in servers:
                violations.append(f"checking group {cg} references unknown server {server}")
    for server, cgs in sorted(config.checking_of.items()):
        if server in servers and not cgs:
            violations.append(f"server {server} has an empty checking set")

    for key_class, hosts in sorted(config.key_classes.items()):
        if not hosts:
            violations.append(f"key class {key_class} has an empty host set")
        for server in hosts:
            if server not in servers:
                violations.append(f"key class {key_class} hosted on unknown server {server}")

    return violations


def _checked(config: GroupConfig) -> GroupConfig:
    violations = validate(config)
    if violations:
        raise ConfigError("; ".join(violations))
    return config


def add_checking_group(
    config: GroupConfig, cg: CheckingGroupId, members: Sequence[ServerId]
) -> tuple[GroupConfig, AddCheckingGroup]:
    """Register a new checking group and emit the directive that instructs
    each member server to initialise a stable-version-vector for it."""
    if cg in config.checking_members:
        raise ConfigError(f"checking group {cg} already exists")
    members = tuple(sorted(members))
    if not members:
        raise ConfigError("checking group needs at least one member")
    unknown = [s for s in members if s not in config.servers]
    if unknown:
        raise ConfigError(f"unknown members {unknown} for checking group {cg}")
    checking = dict(config.checking_members)
    checking[cg] = members
    updated = _checked(
        replace(config, checking_members=checking, epoch=config.epoch + 1)
    )
    return updated, AddCheckingGroup(cg=cg, members=members, epoch=updated.epoch)


def remove_checking_group(
    config: GroupConfig, cg: CheckingGroupId
) -> tuple[GroupConfig, RemoveCheckingGroup]:
    """Drop a checking group; refused when a member would be left with none."""
    members = config.checking_members.get(cg)
    if members is None:
        raise ConfigError(f"checking group {cg} does not exist")
    for server in members:
        if config.checking_of[server] == frozenset({cg}):
            raise ConfigError(
                f"removing {cg} would leave server {server} with no checking group"
            )
    checking = {k: v for k, v in config.checking_members.items() if k != cg}
    updated = _checked(
        replace(config, checking_members=checking, epoch=config.epoch + 1)
    )
    return updated, RemoveCheckingGroup(cg=cg, epoch=updated.epoch)


# -- presets ---------------------------------------------------------------

FIG1_SERVERS = ("A1", "A2", "B1", "B2")
FIG1_REPLICAS: Mapping[str, tuple[str, ...]] = {"1": ("A1", "B1"), "2": ("A2", "B2")}
FIG1_KEY_CLASSES: Mapping[str, tuple[str, ...]] = {
    "A": ("A1", "A2"),
    "B": ("B1", "B2"),
}


def preset(
    name: str,
    servers: Sequence[ServerId] = FIG1_SERVERS,
    replicas: Mapping[str, Sequence[ServerId]] = FIG1_REPLICAS,
    key_classes: Mapping[str, Sequence[ServerId]] = FIG1_KEY_CLASSES,
) -> GroupConfig:
    """Instantiate one of the named grouping styles over a topology.

    ``two-by-two`` and ``four-by-one`` are the canonical full-replica and
    partial-replica organisations of the default four-server topology; the
    remaining presets emulate the grouping styles of well-known causal
    stores.  Placement is identical across presets: grouping and placement
    are orthogonal.
    """
    servers = tuple(sorted(servers))
    classes = {name_: tuple(sorted(hosts)) for name_, hosts in sorted(key_classes.items())}

    def per_server_groups(prefix: str) -> dict[str, tuple[ServerId, ...]]:
        return {f"{prefix}{s}": (s,) for s in servers}

    def per_replica_groups(prefix: str) -> dict[str, tuple[ServerId, ...]]:
        return {
            f"{prefix}{rid}": tuple(sorted(members))
            for rid, members in sorted(replicas.items())
        }

    if name == "two-by-two":
        name = "per-replica-tracking/per-replica-checking"
    elif name == "four-by-one":
        tracking = per_server_groups("r")
        checking = per_server_groups("cg")
        return _checked(GroupConfig(servers, tracking, checking, classes))

    if name == "per-server-tracking/per-replica-checking":
        tracking = per_server_groups("r")
        checking = per_replica_groups("cg")
    elif name == "per-system-tracking/per-replica-checking":
        tracking = {"sys": servers}
        checking = per_replica_groups("cg")
    elif name == "per-replica-tracking/per-replica-checking":
        tracking = per_replica_groups("r")
        checking = per_replica_groups("cg")
    elif name == "per-replica-tracking/per-system-checking":
        tracking = per_replica_groups("r")
        checking = {"cgsys": servers}
    else:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    return _checked(GroupConfig(servers, tracking, checking, classes))


# -- system configuration and the config file format ------------------------

@dataclass(frozen=True)
class SystemConfig:
    """Everything a run needs besides the workload: grouping, clock skews,
    the delay model and the protocol timer periods."""

    group: GroupConfig
    clocks: ClockModel = field(default_factory=ClockModel)
    delays: DelayModel | None = None
    heartbeat_ms: int = 10
    gossip_ms: int = 10
    regions: Mapping[ServerId, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.delays is None:
            object.__setattr__(
                self, "delays", DelayModel(servers=frozenset(self.group.servers))
            )

    def with_extra_delay(self, extra: dict[str, int]) -> SystemConfig:
        return replace(self, delays=self.delays.with_extra(extra))


_SERVER_FIELDS = {"region", "clock_offset_ms", "clock_drift"}
_DELAY_FIELDS = {
    "server_server_ms",
    "client_server_ms",
    "link_overrides",
    "extra_ms",
    "jitter_ms",
    "fifo",
}
_TOP_FIELDS = {
    "version",
    "servers",
    "tracking_groups",
    "checking_groups",
    "key_classes",
    "delays",
    "heartbeat_ms",
    "gossip_ms",
}


def _reject_unknown(mapping: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown} in {where}")


def parse_config(text: str) -> SystemConfig:
    """Parse the versioned config file format; unknown fields are rejected."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(data, _TOP_FIELDS, "config")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')!r}")
    for section in ("servers", "tracking_groups", "checking_groups", "key_classes"):
        if section not in data or not isinstance(data[section], dict):
            raise ConfigError(f"missing or malformed section {section!r}")

    offsets: dict[str, int] = {}
    drifts: dict[str, float] = {}
    regions: dict[str, str] = {}
    for server, info in sorted(data["servers"].items()):
        if not isinstance(info, dict):
            raise ConfigError(f"server entry {server!r} must be an object")
        _reject_unknown(info, _SERVER_FIELDS, f"server {server}")
        # zero skews are normalised away so dump/parse round-trips exactly
        if int(info.get("clock_offset_ms", 0)) != 0:
            offsets[server] = int(info["clock_offset_ms"])
        if float(info.get("clock_drift", 0.0)) != 0.0:
            drifts[server] = float(info["clock_drift"])
        if "region" in info:
            regions[server] = str(info["region"])

    group = GroupConfig(
        servers=tuple(sorted(data["servers"])),
        tracking_members={
            tg: tuple(sorted(members))
            for tg, members in sorted(data["tracking_groups"].items())
        },
        checking_members={
            cg: tuple(sorted(members))
            for cg, members in sorted(data["checking_groups"].items())
        },
        key_classes={
            name: tuple(sorted(hosts))
            for name, hosts in sorted(data["key_classes"].items())
        },
    )

    delays_data = data.get("delays", {})
    if not isinstance(delays_data, dict):
        raise ConfigError("delays section must be an object")
    _reject_unknown(delays_data, _DELAY_FIELDS, "delays")
    overrides: dict[tuple[str, str], int] = {}
    for link, ms in sorted(delays_data.get("link_overrides", {}).items()):
        src, sep, dst = link.partition("->")
        if not sep or not src or not dst:
            raise ConfigError(f"bad link name {link!r}; expected 'src->dst'")
        overrides[(src, dst)] = int(ms)
    delays = DelayModel(
        servers=frozenset(group.servers),
        server_server_ms=int(delays_data.get("server_server_ms", 50)),
        client_server_ms=int(delays_data.get("client_server_ms", 1)),
        link_overrides=overrides,
        extra_ms={k: int(v) for k, v in sorted(delays_data.get("extra_ms", {}).items())},
        jitter_ms=int(delays_data.get("jitter_ms", 0)),
        fifo=bool(delays_data.get("fifo", True)),
    )

    return SystemConfig(
        group=group,
        clocks=ClockModel(offsets_ms=offsets, drifts=drifts),
        delays=delays,
        heartbeat_ms=int(data.get("heartbeat_ms", 10)),
        gossip_ms=int(data.get("gossip_ms", 10)),
        regions=regions,
    )


def dump_config(config: SystemConfig) -> str:
    """Serialise to the canonical text form; parse(dump(c)) == c."""
    servers_section = {}
    for server in config.group.servers:
        entry: dict[str, object] = {}
        if server in config.regions:
            entry["region"] = config.regions[server]
        if config.clocks.offsets_ms.get(server):
            entry["clock_offset_ms"] = config.clocks.offsets_ms[server]
        if config.clocks.drifts.get(server):
            entry["clock_drift"] = config.clocks.drifts[server]
        servers_section[server] = entry
    delays = config.delays
    data = {
        "version": CONFIG_VERSION,
        "servers": servers_section,
        "tracking_groups": {
            tg: sorted(members) for tg, members in config.group.tracking_members.items()
        },
        "checking_groups": {
            cg: sorted(members) for cg, members in config.group.checking_members.items()
        },
        "key_classes": {
            name: sorted(hosts) for name, hosts in config.group.key_classes.items()
        },
        "delays": {
            "server_server_ms": delays.server_server_ms,
            "client_server_ms": delays.client_server_ms,
            "link_overrides": {
                f"{src}->{dst}": ms for (src, dst), ms in sorted(delays.link_overrides.items())
            },
            "extra_ms": dict(sorted(delays.extra_ms.items())),
            "jitter_ms": delays.jitter_ms,
            "fifo": delays.fifo,
        },
        "heartbeat_ms": config.heartbeat_ms,
        "gossip_ms": config.gossip_ms,
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def load_config(path: str) -> SystemConfig:
    with open(path, "r") as fh:
        return parse_config(fh.read())


def save_config(path: str, config: SystemConfig) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(config))
