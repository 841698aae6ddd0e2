"""Registry-arbitrated election and the availability check."""

import random

import pytest

from crowdmw.clock import VirtualClock
from crowdmw.election import (
    AddressConflict,
    EmptyRegistry,
    NodeRecord,
    OverrideNotLive,
    RegistrySnapshot,
    Role,
    check_server_available,
    claim_leadership,
    elect_leader,
    live_records,
    make_nonce,
    pong_for,
    register_node,
)
from crowdmw.store import JournalStore
from crowdmw.transport import (
    Message,
    MessageKind,
    NetConfig,
    SimulatedNetwork,
)

WINDOW = 4000


@pytest.fixture
def store(tmp_path):
    journal = JournalStore(str(tmp_path / "registry.journal"))
    yield journal
    journal.close()


def _snapshot(*records, taken_at=None):
    at = taken_at if taken_at is not None else max(
        (r.last_seen for r in records), default=0
    )
    return RegistrySnapshot(records=tuple(records), taken_at=at)


def _record(node_id, last_seen=0, role=Role.FOLLOWER):
    return NodeRecord(node_id=node_id, address=f"node{node_id}:7000",
                      role=role, last_seen=last_seen)


def test_register_and_snapshot(store):
    register_node(store, 3, "node3:7000", 100, WINDOW)
    register_node(store, 1, "node1:7000", 120, WINDOW)
    snapshot = store.snapshot_nodes(120)
    assert [r.node_id for r in snapshot.records] == [1, 3]
    assert all(r.role is Role.FOLLOWER for r in snapshot.records)


def test_reregister_same_address_refreshes(store):
    register_node(store, 2, "node2:7000", 0, WINDOW)
    claim_leadership(store, 2, "node2:7000", 5)
    register_node(store, 2, "node2:7000", 50, WINDOW)
    record = store.snapshot_nodes(50).record_for(2)
    assert record.last_seen == 50
    assert record.role is Role.LEADER  # refresh keeps the role


def test_register_conflicting_address_rejected(store):
    register_node(store, 2, "node2:7000", 0, WINDOW)
    with pytest.raises(AddressConflict):
        register_node(store, 2, "other:9999", 10, WINDOW)
    # Once the old record has aged out, the id can be reused.
    register_node(store, 2, "other:9999", WINDOW + 10, WINDOW)


def test_live_records_filters_by_window():
    snapshot = _snapshot(_record(1, last_seen=0), _record(2, last_seen=900),
                         taken_at=1000)
    live = live_records(snapshot, liveness_window_ms=500)
    assert [r.node_id for r in live] == [2]
    live = live_records(snapshot, liveness_window_ms=2000)
    assert [r.node_id for r in live] == [1, 2]


def test_elect_leader_picks_max_live_id():
    snapshot = _snapshot(_record(1), _record(7), _record(4))
    assert elect_leader(snapshot, liveness_window_ms=WINDOW) == 7


def test_elect_leader_ignores_stale_max():
    snapshot = _snapshot(_record(1, last_seen=1000), _record(9, last_seen=0),
                         taken_at=1000)
    assert elect_leader(snapshot, liveness_window_ms=500) == 1


def test_elect_leader_override():
    snapshot = _snapshot(_record(1), _record(7), _record(4))
    assert elect_leader(snapshot, 4, liveness_window_ms=WINDOW) == 4
    with pytest.raises(OverrideNotLive):
        elect_leader(snapshot, 5, liveness_window_ms=WINDOW)


def test_elect_leader_empty_registry():
    with pytest.raises(EmptyRegistry):
        elect_leader(_snapshot(), liveness_window_ms=WINDOW)


def test_claim_leadership_demotes_previous(store):
    register_node(store, 1, "node1:7000", 0, WINDOW)
    register_node(store, 2, "node2:7000", 0, WINDOW)
    claim_leadership(store, 1, "node1:7000", 10)
    claim_leadership(store, 2, "node2:7000", 20)
    snapshot = store.snapshot_nodes(20)
    roles = {r.node_id: r.role for r in snapshot.records}
    assert roles == {1: Role.FOLLOWER, 2: Role.LEADER}


def test_snapshot_rejects_two_leaders():
    with pytest.raises(ValueError):
        _snapshot(_record(1, role=Role.LEADER),
                  _record(2, role=Role.LEADER))


def test_nonce_and_pong_echo():
    rng = random.Random(3)
    nonce = make_nonce(rng)
    assert len(nonce) == 16
    assert nonce != make_nonce(rng)
    ping = Message(kind=MessageKind.PING, sender=4, cycle_id=2,
                   payload=nonce)
    pong = pong_for(ping, sender=9)
    assert pong.kind is MessageKind.PONG
    assert pong.sender == 9
    assert pong.cycle_id == 2
    assert pong.payload == nonce


def _sim_pair():
    clock = VirtualClock()
    network = SimulatedNetwork(
        NetConfig(latency_ms=(10.0, 10.0), seed=1), clock
    )
    return network.open("probe:1"), network.open("leader:1")


def test_check_server_available_responsive_leader():
    probe, leader = _sim_pair()
    leader.set_handler(
        lambda message, src: leader.send(src, pong_for(message, 9))
    )
    assert check_server_available(probe, "leader:1", node_id=1,
                                  timeout_ms=250,
                                  rng=random.Random(0)) is True


def test_check_server_available_dead_leader():
    probe, leader = _sim_pair()
    leader.close()
    assert check_server_available(probe, "leader:1", node_id=1,
                                  timeout_ms=100, retries=2,
                                  rng=random.Random(0)) is False


def test_check_server_available_ignores_unrelated_traffic():
    probe, leader = _sim_pair()

    def reply(message, src):
        # Noise first, then the genuine echo.
        leader.send(src, Message(kind=MessageKind.CYCLE_ABORT, sender=9,
                                 cycle_id=0, payload=b"reason=noise"))
        leader.send(src, pong_for(message, 9))

    leader.set_handler(reply)
    assert check_server_available(probe, "leader:1", node_id=1,
                                  timeout_ms=250,
                                  rng=random.Random(0)) is True
