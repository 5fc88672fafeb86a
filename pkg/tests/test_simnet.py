import textwrap

import pytest

from constellation.simnet import Simulator, Topology, load_topology
from constellation.types import ConfigError


def collector(sim, instance_id):
    received = []
    sim.attach(instance_id, lambda src, data, now: received.append((src, data, now)))
    return received


def test_exact_delivery_no_loss_no_jitter():
    sim = Simulator(Topology(instances=3, default_latency_us=5000, seed=1))
    boxes = {i: collector(sim, i) for i in (1, 2, 3)}
    sim.multicast(1, b"hello")
    sim.run_until(10_000)
    assert boxes[1] == []
    assert boxes[2] == [(1, b"hello", 5000)]
    assert boxes[3] == [(1, b"hello", 5000)]


def test_total_loss_delivers_nothing():
    sim = Simulator(Topology(instances=2, default_latency_us=100,
                             default_loss=1.0, seed=1))
    box = collector(sim, 2)
    sim.attach(1, lambda *a: None)
    for _ in range(50):
        sim.multicast(1, b"x")
    sim.run_until(1_000_000)
    assert box == []
    assert sim.pair_stats[(1, 2)].dropped_messages == 50


def test_identical_seed_identical_trace():
    def run():
        sim = Simulator(Topology(instances=3, default_latency_us=2000,
                                 default_loss=0.3, default_duplication=0.2,
                                 default_jitter_us=900, seed=42))
        trace = []
        for i in (1, 2, 3):
            sim.attach(i, lambda src, data, now, i=i: trace.append((i, src, data, now)))
        for n in range(200):
            sim.multicast(1 + n % 3, bytes([n % 256]))
        sim.run_until(10_000_000)
        return trace
    assert run() == run()


def test_causality_minimum_latency():
    topo = Topology(instances=2, default_latency_us=4000,
                    default_jitter_us=1500, seed=9)
    sim = Simulator(topo)
    box = collector(sim, 2)
    sim.attach(1, lambda *a: None)
    for _ in range(300):
        sim.multicast(1, b"p")
    sim.run_until(10_000_000)
    assert box
    for _, _, at in box:
        assert at >= 4000 - 1500


def test_byte_accounting_matches_delivered_payloads():
    sim = Simulator(Topology(instances=2, default_latency_us=100,
                             default_loss=0.4, seed=4))
    box = collector(sim, 2)
    sim.attach(1, lambda *a: None)
    payloads = [bytes(i % 50 + 1) for i in range(500)]
    for p in payloads:
        sim.multicast(1, p)
    sim.run_until(10_000_000)
    stats = sim.pair_stats[(1, 2)]
    assert stats.delivered_bytes == sum(len(d) for _, d, _ in box)
    assert stats.sent_bytes == sum(len(p) for p in payloads)
    assert stats.delivered_messages + stats.dropped_messages \
        - stats.duplicated_messages == 500


def test_duplication_produces_second_copy():
    sim = Simulator(Topology(instances=2, default_latency_us=100,
                             default_duplication=1.0, seed=2))
    box = collector(sim, 2)
    sim.attach(1, lambda *a: None)
    sim.multicast(1, b"dup")
    sim.run_until(1_000)
    assert len(box) == 2


def test_empty_queue_returns_immediately():
    sim = Simulator(Topology(instances=1, seed=0))
    assert sim.run_to_quiescence(1_000_000) is True
    assert sim.now == 0


def test_rate_limit_queues_messages():
    topo = Topology(instances=2, default_latency_us=1000,
                    default_rate_limit=1000, seed=1)  # 1 KB/s
    sim = Simulator(topo)
    box = collector(sim, 2)
    sim.attach(1, lambda *a: None)
    sim.multicast(1, bytes(100))  # 100 ms serialization
    sim.multicast(1, bytes(100))
    sim.run_until(60_000_000)
    assert [at for _, _, at in box] == [101_000, 201_000]


def test_topology_file_parsing(tmp_path):
    cfg = tmp_path / "topo.cfg"
    cfg.write_text(textwrap.dedent("""
        [instances]
        count = 3

        [latency_ms]
        default = 5
        0->1 = 20

        [loss]
        default = 0.1
        1->2 = 0.5

        [duplication]
        default = 0.01

        [jitter_ms]
        default = 2

        [seed]
        value = 99
    """))
    topo = load_topology(cfg)
    assert topo.instances == 3
    assert topo.pair_latency(0, 1) == 20_000
    assert topo.pair_latency(1, 0) == 5_000
    assert topo.pair_loss(1, 2) == 0.5
    assert topo.pair_loss(0, 1) == 0.1
    assert topo.pair_duplication(2, 1) == 0.01
    assert topo.pair_jitter(0, 2) == 2_000
    assert topo.seed == 99


def test_topology_rejects_bad_probability(tmp_path):
    cfg = tmp_path / "topo.cfg"
    cfg.write_text("[instances]\ncount = 2\n\n[loss]\ndefault = 1.5\n")
    with pytest.raises(ConfigError):
        load_topology(cfg)


def test_topology_missing_file():
    with pytest.raises(ConfigError):
        load_topology("/nonexistent/topo.cfg")
