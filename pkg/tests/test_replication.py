"""Send/receive behavior of the replication engine inside the simulator."""

import random

from conftest import build_cluster, quiesce

from constellation.objects import CountingBloomFilter, PNCounter
from constellation.replication import (PeerRttStats, RecvTracker,
                                       ReplicationConfig, ReplicationEngine)
from constellation.log_store import LogRecord, LogStore
from constellation.simnet import Topology
from constellation.wire import FLAG_KEEPALIVE, StateMessage


def counter_cluster(n, topology=None, config=None):
    return build_cluster(n, topology=topology, config=config,
                         objects=lambda inst: _register_counter(inst))


def _register_counter(inst):
    c = PNCounter(1)
    inst.register(c)
    return c


# -- unit-level engine behavior ----------------------------------------------

def engine_with_counter(instance_id=1, peers=(2,)):
    store = LogStore()
    engine = ReplicationEngine(instance_id, store, ReplicationConfig())
    counter = PNCounter(1)
    engine.register(counter)
    for p in peers:
        engine.add_peer(p)
    return engine, counter


def test_keepalive_after_idle_interval():
    engine, _ = engine_with_counter()
    msgs = engine.send_cycle(100_000)
    assert len(msgs) == 1
    assert msgs[0].keepalive
    assert msgs[0].acks == {1: 0, 2: 0}
    # and not again until another interval passes
    assert engine.send_cycle(100_200) == []


def test_round_robin_serves_objects_in_rotation():
    store = LogStore()
    engine = ReplicationEngine(1, store, ReplicationConfig())
    counters = []
    for oid in (1, 2, 3):
        c = PNCounter(oid)
        engine.register(c)
        counters.append(c)
    engine.add_peer(2)
    for c in counters:
        c.update(1)
    served = []
    for t in (200, 400, 600):
        msgs = engine.send_cycle(t)
        served.extend(m.object_id for m in msgs if m.records)
    assert served == [1, 2, 3]


def test_ordered_records_buffered_until_gap_fills():
    engine, _ = engine_with_counter()
    cbf = CountingBloomFilter(9, m=64, k=2, seed=1)
    engine.register(cbf)
    records = [LogRecord(9, CountingBloomFilter.build_count(b"x", 1), seq=s)
               for s in (1, 2, 3, 4)]
    engine._apply_records(9, 2, [records[2], records[3]])
    assert cbf.value(b"x") == 0  # held: 1 and 2 missing
    engine._apply_records(9, 2, [records[0], records[1]])
    assert cbf.value(b"x") == 4
    assert engine.recv[(9, 2)].ack == 4


def test_ordered_duplicates_discarded():
    engine, _ = engine_with_counter()
    cbf = CountingBloomFilter(9, m=64, k=2, seed=1)
    engine.register(cbf)
    record = LogRecord(9, CountingBloomFilter.build_count(b"x", 1), seq=1)
    engine._apply_records(9, 2, [record])
    engine._apply_records(9, 2, [record])
    assert cbf.value(b"x") == 1
    assert engine.diagnostics["duplicates_discarded"] == 1


def test_unordered_duplicates_discarded_by_seq_tracking():
    engine, counter = engine_with_counter()
    record = LogRecord(1, PNCounter.build_update(5), seq=1)
    engine._apply_records(1, 2, [record])
    engine._apply_records(1, 2, [record])
    assert counter.value() == 5


def test_prune_follows_minimum_peer_ack():
    engine, counter = engine_with_counter(peers=(2, 3))
    for _ in range(10):
        counter.update(1)
    engine.send_cycle(200)
    msg9 = StateMessage(sender=2, object_id=1, acks={1: 9}, flags=FLAG_KEEPALIVE,
                        send_timestamp=100)
    msg7 = StateMessage(sender=3, object_id=1, acks={1: 7}, flags=FLAG_KEEPALIVE,
                        send_timestamp=100)
    engine.on_message(msg9, 400)
    engine.on_message(msg7, 400)
    assert engine.store.log(1).min_acked == 7
    assert len(engine.store.log(1).records) == 3


def test_ack_vector_is_monotone():
    tracker = RecvTracker()
    tracker.mark(1, 3)
    assert tracker.ack == 3
    tracker.mark(7, 7)
    assert tracker.ack == 3 and tracker.extra == {7}
    tracker.mark(4, 6)
    assert tracker.ack == 7 and not tracker.extra


def test_congestion_rule_direct_evaluation():
    engine, _ = engine_with_counter()
    stats = PeerRttStats(min_rtt_us=5000, ewma_rtt_us=12_000.0, samples=10)
    engine.rtt[2] = stats
    engine._update_congestion(stats)
    assert engine.detect_congestion(2) is True
    # steady network: average equals minimum
    stats2 = PeerRttStats(min_rtt_us=5000, ewma_rtt_us=5000.0, samples=10)
    engine._update_congestion(stats2)
    assert stats2.congested is False


def test_congestion_needs_minimum_samples():
    engine, _ = engine_with_counter()
    stats = PeerRttStats(min_rtt_us=5000, ewma_rtt_us=50_000.0, samples=2)
    engine._update_congestion(stats)
    assert stats.congested is False


def test_congestion_clears_with_hysteresis():
    engine, _ = engine_with_counter()
    stats = PeerRttStats(min_rtt_us=5000, ewma_rtt_us=12_000.0, samples=10,
                         congested=True, lookahead_window=64)
    # above threshold*(1-hysteresis): stays congested
    stats.ewma_rtt_us = 9_500.0
    engine._update_congestion(stats)
    assert stats.congested
    stats.ewma_rtt_us = 8_000.0
    engine._update_congestion(stats)
    assert not stats.congested
    assert stats.lookahead_window == 1


def test_lookahead_reaches_cap_within_ten_adjustments():
    engine, _ = engine_with_counter()
    engine.rtt[2] = PeerRttStats(min_rtt_us=1000, ewma_rtt_us=1000.0, samples=10)
    adjustments = 0
    sample = 10_000
    while engine.rtt[2].lookahead_window < 1024:
        engine._record_rtt_sample(2, sample)
        sample += 1000  # sustained congestion, estimate keeps rising
        adjustments += 1
        assert adjustments <= 10
    assert engine.rtt[2].lookahead_window == 1024


def test_uncongested_window_is_one():
    engine, _ = engine_with_counter()
    engine._record_rtt_sample(2, 5000)
    assert engine.rtt[2].lookahead_window == 1


def test_retransmit_nothing_when_all_acked():
    engine, counter = engine_with_counter()
    counter.update(3)
    engine.send_cycle(200)
    engine.on_message(StateMessage(sender=2, object_id=1, acks={1: 1},
                                   flags=FLAG_KEEPALIVE, send_timestamp=100), 400)
    assert engine.retransmit_check(10_000_000) == []


def test_retransmit_after_timeout_same_seq():
    engine, counter = engine_with_counter()
    counter.update(3)
    first = engine.send_cycle(200)
    assert [r.seq for m in first for r in m.records] == [1]
    later = engine.retransmit_check(200 + engine.rto_us() + 1)
    assert [r.seq for m in later for r in m.records] == [1]


# -- simulator-level behavior -------------------------------------------------

def test_two_instance_quiescence_time():
    # one record each way at 5 ms one-way latency: the record plus its
    # acknowledgement need at least a full round trip
    sim, instances, counters = counter_cluster(2)
    sim.call_at(100, lambda: counters[1].update(5), owner=1)
    sim.call_at(100, lambda: counters[2].update(-3), owner=2)
    assert quiesce(sim, instances)
    assert sim.now >= 10_000
    assert counters[1].value() == counters[2].value() == 2


def test_lost_record_eventually_delivered():
    topo = Topology(instances=2, default_latency_us=5000, default_loss=0.1, seed=8)
    sim, instances, counters = counter_cluster(2, topology=topo)
    sim.call_at(100, lambda: [counters[1].update(1) for _ in range(200)], owner=1)
    assert quiesce(sim, instances)
    assert counters[2].value() == 200


def test_convergence_under_heavy_loss_and_duplication():
    topo = Topology(instances=3, default_latency_us=5000, default_loss=0.5,
                    default_duplication=0.3, default_jitter_us=2000, seed=6)
    sim, instances, counters = counter_cluster(3, topology=topo)
    rng = random.Random(6)
    total = {"v": 0}

    def pump(idx):
        def run():
            for _ in range(150):
                d = rng.randrange(-20, 30)
                counters[idx].update(d)
                total["v"] += d
        return run
    for i in (1, 2, 3):
        sim.call_at(100 * i, pump(i), owner=i)
    assert quiesce(sim, instances, max_t=300_000_000)
    assert {c.value() for c in counters.values()} == {total["v"]}
    assert all(inst.engine.diagnostics.get("partial_overlap_discarded", 0) == 0
               for inst in instances.values())


def test_keepalives_flow_on_idle_channel():
    sim, instances, _ = counter_cluster(2)
    sim.run_until(1_000_000)
    keepalive_bytes = sim.pair_stats.get((1, 2))
    assert keepalive_bytes is not None and keepalive_bytes.sent_messages >= 9


def test_coalesced_stream_replay_equals_uncoalesced():
    # force a window and coalesce pending records; receiver must match the
    # plain sequential outcome exactly
    engine, counter = engine_with_counter()
    engine.rtt[2] = PeerRttStats(min_rtt_us=1000, ewma_rtt_us=5000.0,
                                 samples=10, congested=True, lookahead_window=50)
    deltas = [i - 20 for i in range(50)]
    for d in deltas:
        counter.update(d)
    msgs = engine.send_cycle(200)
    coalesced = [r for m in msgs for r in m.records]
    assert len(coalesced) == 1
    assert coalesced[0].coalesced_span == 50
    assert coalesced[0].seq == 50
    replica_engine, replica = engine_with_counter(instance_id=2, peers=(1,))
    replica_engine._apply_records(1, 1, coalesced)
    assert replica.value() == sum(deltas)
    assert replica_engine.recv[(1, 1)].ack == 50


def test_duplicate_coalesced_record_ignored():
    engine, counter = engine_with_counter(instance_id=2, peers=(1,))
    record = LogRecord(1, PNCounter.build_update(100), seq=10, coalesced_span=5)
    engine._apply_records(1, 1, [record])
    engine._apply_records(1, 1, [record])
    assert counter.value() == 100
    assert engine.recv[(1, 1)].extra == {6, 7, 8, 9, 10}
