"""Server state machine: version storage, VV/SVV maintenance, and handlers
for client requests, replication, heartbeats, gossip and timers.

Every server keeps, per tracking group, the minimum of the latest timestamps
received from its key-sharing peers (its version vector, VV); groups with no
key-sharing peer sit at infinity.  Members of a checking group periodically
gossip their VVs and keep, per group, the entry-wise minimum as the stable
version vector (SVV): versions whose dependencies fall below a group's SVV
are stably visible to every reader of that group.

A read first waits until the server's VV covers the client's dependency set
(parked requests are re-evaluated on every VV change).  If the dependency set
is also covered by the named group's SVV, the newest version whose own
dependencies are covered by that SVV is returned; otherwise the stable filter
is abandoned and the newest version in the chain is returned, which is still
consistent with the client's past because of the VV wait.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

from .grouping import AddCheckingGroup, RemoveCheckingGroup, SystemConfig
from .hlc import HlcClock
from .model import (
    ERR_NOT_HOSTED,
    ERR_UNKNOWN_CHECKING_GROUP,
    ERR_TIMEOUT,
    GetReply,
    GetReq,
    Heartbeat,
    HlcTimestamp,
    INFINITY,
    PutReply,
    PutReq,
    Replicate,
    Version,
    VVGossip,
    ZERO,
    version_sort_key,
)
from .simnet import Simulation, SimulationError, TraceRecord


class InvariantViolation(SimulationError):
    """A runtime protocol invariant broke (monotonicity, SVV <= VV)."""


@dataclass
class ParkedGet:
    req: GetReq
    parked_at: int


class ServerNode:
    """Single-threaded state machine for one server; driven by the simulator."""

    def __init__(
        self,
        server_id: str,
        config: SystemConfig,
        *,
        park_timeout_ms: int | None = None,
    ):
        group = config.group
        self.id = server_id
        self.config = config
        self.group = group
        self.tracking_of = group.tracking_of
        self.my_tg = group.tracking_of[server_id]
        self.park_timeout_ms = park_timeout_ms

        self.peers = group.key_sharing_peers(server_id)  # self included
        self.peers_by_tg: dict[str, tuple[str, ...]] = {}
        for tg in group.tracking_groups:
            self.peers_by_tg[tg] = tuple(
                j for j in self.peers if self.tracking_of[j] == tg
            )

        self.hlc = HlcClock()
        self.store: dict[str, list[Version]] = {}
        self._chain_ids: dict[str, set[tuple[str, HlcTimestamp]]] = {}
        self.peer_latest: dict[str, HlcTimestamp] = {j: ZERO for j in self.peers}
        self.vv: dict[str, HlcTimestamp] = {
            tg: (ZERO if self.peers_by_tg[tg] else INFINITY)
            for tg in group.tracking_groups
        }
        # per checking group this server belongs to: members and the SVV
        self.cg_members: dict[str, tuple[str, ...]] = {
            cg: members
            for cg, members in group.checking_members.items()
            if server_id in members
        }
        self.peer_vv_cache: dict[str, dict[str, HlcTimestamp]] = {}
        self.svv: dict[str, dict[str, HlcTimestamp]] = {}
        for cg in self.cg_members:
            self.svv[cg] = self._computed_svv(cg)
        self.pending: list[ParkedGet] = []
        self.last_send: dict[str, int] = {j: 0 for j in self.peers if j != server_id}
        self.epoch = group.epoch
        self.invariant_checks = 0
        self.parked_total = 0

    # -- version vector plumbing ------------------------------------------

    def _raise_peer_latest(self, sim: Simulation, peer: str, ts: HlcTimestamp) -> bool:
        if peer not in self.peer_latest or ts <= self.peer_latest[peer]:
            return False
        self.peer_latest[peer] = ts
        self._recompute_vv(sim, self.tracking_of[peer])
        return True

    def _recompute_vv(self, sim: Simulation, tg: str) -> None:
        peers = self.peers_by_tg[tg]
        new = min(self.peer_latest[j] for j in peers) if peers else INFINITY
        old = self.vv[tg]
        if new < old:
            raise InvariantViolation(
                f"{self.id}: VV[{tg}] would regress from {old} to {new}"
            )
        self.invariant_checks += 1
        self.vv[tg] = new
        self._recompute_all_svv()

    def _computed_svv(self, cg: str) -> dict[str, HlcTimestamp]:
        zero_vector = {tg: ZERO for tg in self.group.tracking_groups}
        vectors = [self.vv]
        for member in self.cg_members[cg]:
            if member == self.id:
                continue
            vectors.append(self.peer_vv_cache.get(member, zero_vector))
        return {
            tg: min(vec.get(tg, ZERO) for vec in vectors)
            for tg in self.group.tracking_groups
        }

    def _recompute_all_svv(self) -> None:
        for cg in self.cg_members:
            computed = self._computed_svv(cg)
            current = self.svv[cg]
            for tg, ts in computed.items():
                old = current.get(tg, ZERO)
                if ts < old:
                    raise InvariantViolation(
                        f"{self.id}: SVV[{cg}][{tg}] would regress from {old} to {ts}"
                    )
                if ts > self.vv[tg]:
                    raise InvariantViolation(
                        f"{self.id}: SVV[{cg}][{tg}]={ts} above VV[{tg}]={self.vv[tg]}"
                    )
                self.invariant_checks += 1
                current[tg] = ts
            if len(self.cg_members[cg]) == 1 and current != self.vv:
                raise InvariantViolation(
                    f"{self.id}: singleton checking group {cg} SVV diverged from VV"
                )

    # -- message handlers ---------------------------------------------------

    def on_message(self, sim: Simulation, msg) -> None:
        if isinstance(msg, PutReq):
            self._handle_put(sim, msg)
        elif isinstance(msg, GetReq):
            self._handle_get(sim, msg)
        elif isinstance(msg, Replicate):
            self._handle_replicate(sim, msg)
        elif isinstance(msg, Heartbeat):
            self._handle_heartbeat(sim, msg)
        elif isinstance(msg, VVGossip):
            self._handle_gossip(sim, msg)
        else:
            raise SimulationError(f"{self.id}: unexpected message {msg!r}")

    def _handle_put(self, sim: Simulation, msg: PutReq) -> None:
        if not self.group.hosted_here(msg.key, self.id):
            sim.send(
                self.id,
                msg.sender,
                PutReply(self.id, msg.sender, msg.key, None, None, ERR_NOT_HOSTED),
            )
            return
        dt = msg.ds.max_timestamp()
        ts = self.hlc.update_for_put(sim.pc(self.id), dt)
        version = Version(
            key=msg.key,
            value=msg.value,
            ds=msg.ds.with_entry(self.my_tg, ts),
            origin=self.id,
        )
        self._insert_version(version)
        self._raise_peer_latest(sim, self.id, ts)
        sim.send(
            self.id, msg.sender, PutReply(self.id, msg.sender, msg.key, self.my_tg, ts)
        )
        for host in self.group.hosts_for_key(msg.key):
            if host != self.id:
                sim.send(self.id, host, Replicate(self.id, host, msg.key, version))
                self.last_send[host] = sim.now
        self._reevaluate_pending(sim)

    def _handle_get(self, sim: Simulation, msg: GetReq) -> None:
        if not self.group.hosted_here(msg.key, self.id):
            self._reply_get(sim, msg, None, ERR_NOT_HOSTED)
            return
        if msg.cg not in self.svv:
            self._reply_get(sim, msg, None, ERR_UNKNOWN_CHECKING_GROUP)
            return
        if self._vv_covers(msg.ds):
            self._serve_get(sim, msg)
            return
        self.pending.append(ParkedGet(req=msg, parked_at=sim.now))
        self.parked_total += 1
        sim.record(
            TraceRecord(
                t=sim.now,
                actor=self.id,
                kind="GET_PARK",
                key=msg.key,
                ds=dict(msg.ds.entries),
                cg=msg.cg,
                origin=msg.sender,
            )
        )
        if self.park_timeout_ms is not None:
            sim.schedule_wake(self.id, self.park_timeout_ms)

    def _vv_covers(self, ds) -> bool:
        return all(h <= self.vv[tg] for tg, h in ds.items())

    def _serve_get(self, sim: Simulation, msg: GetReq) -> None:
        svv = self.svv[msg.cg]
        chain = self.store.get(msg.key, [])
        version: Version | None = None
        if all(h <= svv[tg] for tg, h in msg.ds.items()):
            # stable read: newest version whose dependencies the group has
            # collectively seen
            for candidate in reversed(chain):
                if all(h <= svv[tg] for tg, h in candidate.ds.items()):
                    version = candidate
                    break
        elif chain:
            # the snapshot cannot cover this client's past; fall back to the
            # newest version, consistent by virtue of the VV wait
            version = chain[-1]
        self._reply_get(sim, msg, version, None)

    def _reply_get(
        self, sim: Simulation, msg: GetReq, version: Version | None, error: str | None
    ) -> None:
        sim.send(
            self.id,
            msg.sender,
            GetReply(self.id, msg.sender, msg.key, msg.cg, version, error),
        )

    def _handle_replicate(self, sim: Simulation, msg: Replicate) -> None:
        if not self.group.hosted_here(msg.key, self.id):
            raise SimulationError(f"{self.id}: replicate for unhosted key {msg.key}")
        version = msg.version
        self._insert_version(version)
        wt = version.ds.get(self.tracking_of.get(msg.sender, ""), None)
        if wt is not None:
            self._raise_peer_latest(sim, msg.sender, wt)
        sim.record(
            TraceRecord(
                t=sim.now,
                actor=self.id,
                kind="REPLICATE",
                key=msg.key,
                wt=version.write_timestamp(self.tracking_of),
                ds=dict(version.ds.entries),
                origin=version.origin,
            )
        )
        self._reevaluate_pending(sim)

    def _handle_heartbeat(self, sim: Simulation, msg: Heartbeat) -> None:
        if msg.sender not in self.peer_latest:
            return
        changed = self._raise_peer_latest(sim, msg.sender, msg.ts)
        sim.record(
            TraceRecord(
                t=sim.now,
                actor=self.id,
                kind="HEARTBEAT",
                wt=msg.ts,
                origin=msg.sender,
            )
        )
        if changed:
            self._reevaluate_pending(sim)

    def _handle_gossip(self, sim: Simulation, msg: VVGossip) -> None:
        co_member = any(
            msg.sender in members and msg.sender != self.id
            for members in self.cg_members.values()
        )
        if not co_member:
            sim.record(
                TraceRecord(
                    t=sim.now,
                    actor=self.id,
                    kind="GOSSIP",
                    key="ignored_non_member",
                    origin=msg.sender,
                )
            )
            return
        cache = self.peer_vv_cache.setdefault(msg.sender, {})
        for tg, ts in msg.vv.items():
            if ts > cache.get(tg, ZERO):
                cache[tg] = ts
        self._recompute_all_svv()
        sim.record(
            TraceRecord(
                t=sim.now,
                actor=self.id,
                kind="GOSSIP",
                ds=dict(msg.vv),
                origin=msg.sender,
            )
        )

    # -- timers and control --------------------------------------------------

    def on_timer(self, sim: Simulation, kind: str) -> None:
        if kind == "heartbeat":
            self._heartbeat_timer(sim)
        elif kind == "gossip":
            self._gossip_timer(sim)
        elif kind == "wake":
            self._expire_parked(sim)
        else:
            raise SimulationError(f"{self.id}: unknown timer {kind}")

    def _heartbeat_timer(self, sim: Simulation) -> None:
        period = self.config.heartbeat_ms
        due = [
            j
            for j in sorted(self.last_send)
            if sim.now - self.last_send[j] >= period
        ]
        if not due:
            return
        # one tick per firing, shared by all due peers
        ts = self.hlc.tick(sim.pc(self.id))
        for peer in due:
            sim.send(self.id, peer, Heartbeat(self.id, peer, ts))
            self.last_send[peer] = sim.now
        if self._raise_peer_latest(sim, self.id, ts):
            self._reevaluate_pending(sim)

    def _gossip_timer(self, sim: Simulation) -> None:
        snapshot = dict(self.vv)
        targets = sorted(
            {
                member
                for members in self.cg_members.values()
                for member in members
                if member != self.id
            }
        )
        for peer in targets:
            sim.send(self.id, peer, VVGossip(self.id, peer, snapshot))

    def on_control(self, sim: Simulation, directive) -> None:
        if isinstance(directive, AddCheckingGroup):
            self.cg_members[directive.cg] = directive.members
            self.svv[directive.cg] = self._computed_svv(directive.cg)
            self.epoch = directive.epoch
            action = "add_checking_group"
            cg = directive.cg
        elif isinstance(directive, RemoveCheckingGroup):
            self.cg_members.pop(directive.cg, None)
            self.svv.pop(directive.cg, None)
            self.epoch = directive.epoch
            action = "remove_checking_group"
            cg = directive.cg
        else:
            raise SimulationError(f"{self.id}: unknown directive {directive!r}")
        sim.record(
            TraceRecord(t=sim.now, actor=self.id, kind="RECONFIG", key=action, cg=cg)
        )

    # -- internals ------------------------------------------------------------

    def _insert_version(self, version: Version) -> None:
        vid = (version.origin, version.write_timestamp(self.tracking_of))
        ids = self._chain_ids.setdefault(version.key, set())
        if vid in ids:
            return
        ids.add(vid)
        chain = self.store.setdefault(version.key, [])
        bisect.insort(chain, version, key=lambda v: version_sort_key(v, self.tracking_of))

    def _reevaluate_pending(self, sim: Simulation) -> None:
        if not self.pending:
            return
        still_parked: list[ParkedGet] = []
        for parked in self.pending:
            if self._vv_covers(parked.req.ds):
                self._serve_get(sim, parked.req)
            else:
                still_parked.append(parked)
        self.pending = still_parked

    def _expire_parked(self, sim: Simulation) -> None:
        if self.park_timeout_ms is None:
            return
        deadline = sim.now - self.park_timeout_ms
        still_parked: list[ParkedGet] = []
        for parked in self.pending:
            if parked.parked_at <= deadline:
                self._reply_get(sim, parked.req, None, ERR_TIMEOUT)
            else:
                still_parked.append(parked)
        self.pending = still_parked
