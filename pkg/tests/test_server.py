"""Server state machine scenarios: parking, SVV filtering, replication,
heartbeats, gossip, and invariants."""

from __future__ import annotations

import pytest

from accf.grouping import GroupConfig, SystemConfig, preset
from accf.model import (
    DependencySet,
    ERR_NOT_HOSTED,
    ERR_UNKNOWN_CHECKING_GROUP,
    EMPTY_DS,
    GetReply,
    GetReq,
    Heartbeat,
    HlcTimestamp,
    INFINITY,
    PutReq,
    Replicate,
    Version,
    VVGossip,
)
from accf.server import InvariantViolation, ServerNode
from accf.simnet import DelayModel, Simulation

TS = HlcTimestamp


class Sink:
    """Client stand-in collecting replies."""

    def __init__(self):
        self.replies = []

    def on_message(self, sim, msg):
        self.replies.append((sim.now, msg))


def build(config: SystemConfig, client_ids=("C1",)):
    sim = Simulation(delays=config.delays, clocks=config.clocks, seed=0)
    servers = {}
    for server_id in config.group.servers:
        node = ServerNode(server_id, config)
        servers[server_id] = node
        sim.register(server_id, node)
        sim.schedule_timer(server_id, config.heartbeat_ms, "heartbeat")
        sim.schedule_timer(server_id, config.gossip_ms, "gossip")
    sinks = {}
    for client_id in client_ids:
        sinks[client_id] = Sink()
        sim.register(client_id, sinks[client_id])
    return sim, servers, sinks


def system(group: GroupConfig, **kwargs) -> SystemConfig:
    delays = DelayModel(
        servers=frozenset(group.servers), server_server_ms=5, client_server_ms=1
    )
    return SystemConfig(group=group, delays=delays, **kwargs)


def two_by_two() -> SystemConfig:
    return system(preset("two-by-two"))


def get_replies(sink: Sink) -> list[GetReply]:
    return [m for _, m in sink.replies if isinstance(m, GetReply)]


class TestPut:
    def test_fresh_server_empty_ds(self):
        config = two_by_two()
        sim, servers, sinks = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", EMPTY_DS)))
        sim.run_until(20)
        a1 = servers["A1"]
        version = a1.store["A:x"][0]
        # pc was 5 when the put executed on a fresh clock
        assert version.write_timestamp(config.group.tracking_of) == TS(5, 0)
        assert version.ds == DependencySet({"r1": TS(5, 0)})
        reply = sinks["C1"].replies[0][1]
        assert (reply.tg, reply.ut) == ("r1", TS(5, 0))
        # one replicate per co-host of the key
        assert a1.store["A:x"] == servers["A2"].store["A:x"]
        assert "A:x" not in servers["B1"].store

    def test_put_with_remote_dependency_advances_hlc(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        ds = DependencySet({"r2": TS(9, 0)})
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", ds)))
        sim.run_until(6)
        version = servers["A1"].store["A:x"][0]
        assert version.write_timestamp(config.group.tracking_of) == TS(9, 1)
        assert version.ds == DependencySet({"r2": TS(9, 0), "r1": TS(9, 1)})

    def test_two_puts_same_key_ordered_by_wt(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "first", EMPTY_DS)))
        sim._push(7, "A1", ("msg", PutReq("C1", "A1", "A:x", "second", EMPTY_DS)))
        sim.run_until(10)
        chain = servers["A1"].store["A:x"]
        assert [v.value for v in chain] == ["first", "second"]

    def test_unhosted_key_rejected(self):
        config = two_by_two()
        sim, servers, sinks = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "B:x", "x", EMPTY_DS)))
        sim.run_until(10)
        reply = sinks["C1"].replies[0][1]
        assert reply.error == ERR_NOT_HOSTED
        assert "B:x" not in servers["A1"].store


class TestGet:
    def test_no_constraints_returns_stable_version(self):
        config = two_by_two()
        sim, servers, sinks = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", EMPTY_DS)))
        # by 40ms the write has gossiped around cg1
        sim._push(40, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg1", EMPTY_DS)))
        sim.run_until(60)
        reply = get_replies(sinks["C1"])[0]
        assert reply.version is not None and reply.version.value == "x"

    def test_park_until_replicate_raises_vv(self):
        config = two_by_two()
        sim, servers, sinks = build(config, client_ids=("C1", "C2"))
        # C2 writes at A2 (tracking group r2) at t=5
        sim._push(5, "A2", ("msg", PutReq("C2", "A2", "A:x", "x", EMPTY_DS)))
        # C1 immediately asks A1 for it with the dependency it learned out of band
        ds = DependencySet({"r2": TS(5, 0)})
        sim._push(6, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg1", ds)))
        sim.run_until(6)
        assert len(servers["A1"].pending) == 1
        assert any(r.kind == "GET_PARK" for r in sim.trace)
        sim.run_until(60)
        assert servers["A1"].pending == []
        reply = get_replies(sinks["C1"])[0]
        assert reply.version is not None
        assert reply.version.write_timestamp(config.group.tracking_of) >= TS(5, 0)

    def test_unpark_reply_same_instant_as_replicate(self):
        config = two_by_two()
        sim, servers, sinks = build(config, client_ids=("C1", "C2"))
        sim._push(5, "A2", ("msg", PutReq("C2", "A2", "A:x", "x", EMPTY_DS)))
        sim._push(6, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg1", DependencySet({"r2": TS(5, 0)}))))
        sim.run_until(100)
        replicate_at = next(
            r.t for r in sim.trace if r.kind == "REPLICATE" and r.actor == "A1"
        )
        reply_sent_at = sinks["C1"].replies[0][0] - config.delays.client_server_ms
        assert reply_sent_at == replicate_at

    def test_svv_filter_returns_older_stable_version(self):
        # Three servers host partition A; S3's gossip keeps cg stale so the
        # newest write stays above the stable cut and an older version wins.
        group = GroupConfig(
            servers=("S1", "S2", "S3"),
            tracking_members={"t1": ("S1",), "t2": ("S2",), "t3": ("S3",)},
            checking_members={"cg": ("S1", "S2", "S3")},
            key_classes={"A": ("S1", "S2", "S3")},
        )
        config = system(group)
        sim, servers, sinks = build(config)
        sim._push(5, "S1", ("msg", PutReq("C1", "S1", "A:x", "old", EMPTY_DS)))
        sim.run_until(100)  # "old" is now stable group-wide
        sim._push(100, "S2", ("msg", PutReq("C1", "S2", "A:x", "new", EMPTY_DS)))
        sim.run_until(106)  # replicated to S1 but not yet gossip-stable
        s1 = servers["S1"]
        assert [v.value for v in s1.store["A:x"]] == ["old", "new"]
        # hand-computed stable cut: S2's entry in the cg SVV cannot yet cover
        # the new write's timestamp
        wt_new = s1.store["A:x"][1].write_timestamp(group.tracking_of)
        assert s1.svv["cg"]["t2"] < wt_new
        sim._push(106, "S1", ("msg", GetReq("C1", "S1", "A:x", "cg", EMPTY_DS)))
        sim.run_until(107)
        reply = get_replies(sinks["C1"])[-1]
        assert reply.version.value == "old"
        # once gossip catches up the same read returns the new version
        sim.run_until(200)
        sim._push(200, "S1", ("msg", GetReq("C1", "S1", "A:x", "cg", EMPTY_DS)))
        sim.run_until(201)
        assert get_replies(sinks["C1"])[-1].version.value == "new"

    def test_ds_above_svv_falls_back_to_latest(self):
        config = two_by_two()
        sim, servers, sinks = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", EMPTY_DS)))
        sim.run_until(6)
        # client's own fresh write exceeds the all-zero SVV: fallback branch
        ds = DependencySet({"r1": TS(5, 0)})
        sim._push(6, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg1", ds)))
        sim.run_until(7)
        reply = get_replies(sinks["C1"])[0]
        assert reply.version is not None and reply.version.value == "x"

    def test_unknown_checking_group_error(self):
        config = two_by_two()
        sim, _, sinks = build(config)
        sim._push(5, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg9", EMPTY_DS)))
        sim.run_until(10)
        reply = get_replies(sinks["C1"])[0]
        assert reply.error == ERR_UNKNOWN_CHECKING_GROUP

    def test_not_hosted_error(self):
        config = two_by_two()
        sim, _, sinks = build(config)
        sim._push(5, "A1", ("msg", GetReq("C1", "A1", "B:x", "cg1", EMPTY_DS)))
        sim.run_until(10)
        assert get_replies(sinks["C1"])[0].error == ERR_NOT_HOSTED

    def test_empty_chain_not_found(self):
        config = two_by_two()
        sim, _, sinks = build(config)
        sim._push(5, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg1", EMPTY_DS)))
        sim.run_until(10)
        reply = get_replies(sinks["C1"])[0]
        assert reply.version is None and reply.error is None


def make_version(key: str, value: str, origin: str, tg: str, wt: TS) -> Version:
    return Version(key=key, value=value, ds=DependencySet({tg: wt}), origin=origin)


class TestReplicate:
    def test_out_of_order_arrivals_keep_chain_sorted(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        newer = make_version("A:x", "new", "A2", "r2", TS(9, 0))
        older = make_version("A:x", "old", "A2", "r2", TS(4, 0))
        sim._push(5, "A1", ("msg", Replicate("A2", "A1", "A:x", newer)))
        sim._push(6, "A1", ("msg", Replicate("A2", "A1", "A:x", older)))
        sim.run_until(10)
        assert [v.value for v in servers["A1"].store["A:x"]] == ["old", "new"]

    def test_duplicate_delivery_is_idempotent(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        version = make_version("A:x", "x", "A2", "r2", TS(9, 0))
        for t in (5, 6, 7):
            sim._push(t, "A1", ("msg", Replicate("A2", "A1", "A:x", version)))
        sim.run_until(10)
        assert len(servers["A1"].store["A:x"]) == 1

    def test_replicate_raises_vv_entry(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        version = make_version("A:x", "x", "A2", "r2", TS(9, 0))
        sim._push(5, "A1", ("msg", Replicate("A2", "A1", "A:x", version)))
        sim.run_until(5)
        assert servers["A1"].vv["r2"] == TS(9, 0)


class TestHeartbeat:
    def test_single_peer_sets_vv(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        sim._push(5, "A1", ("msg", Heartbeat("A2", "A1", TS(8, 0))))
        sim.run_until(5)
        assert servers["A1"].vv["r2"] == TS(8, 0)

    def test_stale_heartbeat_is_noop(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        sim._push(5, "A1", ("msg", Heartbeat("A2", "A1", TS(8, 0))))
        sim._push(6, "A1", ("msg", Heartbeat("A2", "A1", TS(3, 0))))
        sim.run_until(10)
        assert servers["A1"].vv["r2"] == TS(8, 0)

    def test_vv_is_minimum_over_two_peers_in_group(self):
        group = GroupConfig(
            servers=("S1", "S2", "S3"),
            tracking_members={"r1": ("S1",), "r2": ("S2", "S3")},
            checking_members={"cg": ("S1", "S2", "S3")},
            key_classes={"A": ("S1", "S2", "S3")},
        )
        sim, servers, _ = build(system(group))
        sim._push(5, "S1", ("msg", Heartbeat("S2", "S1", TS(8, 0))))
        sim._push(5, "S1", ("msg", Heartbeat("S3", "S1", TS(6, 0))))
        sim.run_until(5)
        assert servers["S1"].vv["r2"] == TS(6, 0)

    def test_infinity_when_no_key_sharing_peer_in_group(self):
        config = two_by_two()
        _, servers, _ = build(config)
        # A1 hosts only partition A, which B-side tracking never touches
        assert servers["A1"].vv["r1"] == TS(0, 0)  # self is a key-sharing peer
        assert servers["B1"].vv["r2"] != INFINITY  # B2 shares partition B
        four_by_one = system(preset("four-by-one"))
        _, servers4, _ = build(four_by_one)
        assert servers4["A1"].vv["rB1"] == INFINITY
        assert servers4["A1"].vv["rB2"] == INFINITY

    def test_heartbeat_timer_covers_idle_peers_only(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        # A1's put at t=3 replicates to A2, suppressing the t=10 heartbeat
        sim._push(3, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", EMPTY_DS)))
        sim.run_until(10)
        heartbeats_a1_a2 = [
            r for r in sim.trace
            if r.kind == "HEARTBEAT" and r.actor == "A2" and r.origin == "A1"
        ]
        assert heartbeats_a1_a2 == []
        sim.run_until(30)
        heartbeats_a1_a2 = [
            r for r in sim.trace
            if r.kind == "HEARTBEAT" and r.actor == "A2" and r.origin == "A1"
        ]
        assert heartbeats_a1_a2  # resumed once idle

    def test_idle_server_heartbeats_every_key_sharing_peer(self):
        group = GroupConfig(
            servers=("S1", "S2", "S3", "S4"),
            tracking_members={f"r{i}": (f"S{i}",) for i in (1, 2, 3, 4)},
            checking_members={f"cg{i}": (f"S{i}",) for i in (1, 2, 3, 4)},
            key_classes={"A": ("S1", "S2", "S3", "S4")},
        )
        sim, _, _ = build(system(group))
        sim.run_until(15)  # first firing at t=10 plus the 5ms link
        sent_by_s1 = [
            r for r in sim.trace if r.kind == "HEARTBEAT" and r.origin == "S1"
        ]
        # three peers, all idle since t=0, all covered at the first firing
        assert len(sent_by_s1) == 3
        assert {r.actor for r in sent_by_s1} == {"S2", "S3", "S4"}

    def test_isolated_server_sends_no_heartbeats(self):
        group = GroupConfig(
            servers=("S1", "S2"),
            tracking_members={"r1": ("S1",), "r2": ("S2",)},
            checking_members={"cg1": ("S1",), "cg2": ("S2",)},
            key_classes={"A": ("S1",), "B": ("S2",)},
        )
        sim, _, _ = build(system(group))
        sim.run_until(100)
        assert not any(r.kind == "HEARTBEAT" for r in sim.trace)


class TestGossip:
    def test_svv_is_entrywise_min(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        a1 = servers["A1"]
        a1.vv.update({"r1": TS(5, 0), "r2": TS(7, 1)})
        sim._push(
            5,
            "A1",
            ("msg", VVGossip("B1", "A1", {"r1": TS(6, 0), "r2": TS(3, 2)})),
        )
        sim.run_until(5)
        assert a1.svv["cg1"] == {"r1": TS(5, 0), "r2": TS(3, 2)}

    def test_singleton_checking_group_svv_equals_vv(self):
        config = system(preset("four-by-one"))
        sim, servers, _ = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", EMPTY_DS)))
        sim.run_until(500)
        for server in servers.values():
            for cg, svv in server.svv.items():
                assert svv == server.vv

    def test_infinity_entries_are_min_identity(self):
        config = system(preset("four-by-one"))
        sim, servers, _ = build(config)
        assert servers["A1"].svv["cgA1"]["rB1"] == INFINITY

    def test_never_heard_peer_pins_svv_to_zero(self):
        config = two_by_two()
        _, servers, _ = build(config)
        a1 = servers["A1"]
        a1.vv.update({"r1": TS(50, 0), "r2": TS(50, 0)})
        a1._recompute_all_svv()
        assert a1.svv["cg1"] == {"r1": TS(0, 0), "r2": TS(0, 0)}

    def test_gossip_from_non_co_member_ignored_with_warning(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        sim._push(5, "A1", ("msg", VVGossip("A2", "A1", {"r1": TS(90, 0), "r2": TS(90, 0)})))
        sim.run_until(5)
        assert servers["A1"].svv["cg1"]["r2"] == TS(0, 0)
        warned = [r for r in sim.trace if r.kind == "GOSSIP" and r.key == "ignored_non_member"]
        assert len(warned) == 1 and warned[0].origin == "A2"

    def test_svv_monotone_under_gossip_stream(self):
        config = two_by_two()
        sim, servers, _ = build(config)
        sim._push(5, "A1", ("msg", PutReq("C1", "A1", "A:x", "x", EMPTY_DS)))
        previous: dict[str, TS] = {}
        for t in range(10, 400, 10):
            sim.run_until(t)
            current = dict(servers["A2"].svv["cg2"])
            for tg, ts in previous.items():
                assert current[tg] >= ts
            previous = current
        assert servers["A1"].invariant_checks > 0

    def test_vv_regression_raises_invariant_violation(self):
        config = two_by_two()
        _, servers, _ = build(config)
        a1 = servers["A1"]
        a1.vv["r2"] = TS(100, 0)
        a1.peer_latest["A2"] = TS(50, 0)
        with pytest.raises(InvariantViolation, match="regress"):
            a1._recompute_vv(None, "r2")


class TestParkTimeout:
    def test_timed_out_get_surfaces_error(self):
        from accf.model import ERR_TIMEOUT

        config = two_by_two()
        sim = Simulation(delays=config.delays, seed=0)
        node = ServerNode("A1", config, park_timeout_ms=50)
        sim.register("A1", node)
        sink = Sink()
        sim.register("C1", sink)
        ds = DependencySet({"r2": TS(500, 0)})  # unreachable dependency
        sim._push(5, "A1", ("msg", GetReq("C1", "A1", "A:x", "cg1", ds)))
        sim.run_until(500)
        reply = get_replies(sink)[0]
        assert reply.error == ERR_TIMEOUT
        assert node.pending == []
