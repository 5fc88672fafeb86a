"""NAT, IDPS, and firewall behavior on top of replication."""

import math

from conftest import build_cluster, quiesce

from constellation.middleboxes import DIR_IN, DIR_OUT, Firewall, Idps, Nat, Packet
from constellation.middleboxes.nat import PUBLIC_ADDR
from constellation.simnet import Topology
from constellation.types import FlowKey


def flow(n, remote=0x08080808, rport=80):
    return FlowKey(0x0A000100 + n, remote, 40_000 + n, rport, 6)


def nat_cluster(n, ports=range(2000, 2032), lease=False, topology=None):
    def attach(inst):
        box = Nat(inst, pool_id=1, fwd_id=2, claims_id=3, bundle_id=4,
                  ports=ports, lease_mode=lease,
                  lease_index=(inst.instance_id - 1) % n, lease_count=n)
        inst.set_middlebox(box)
        return box
    return build_cluster(n, topology=topology, objects=attach)


# -- NAT ------------------------------------------------------------------------

def test_nat_mapping_stable_across_packets():
    sim, instances, boxes = nat_cluster(1)
    v1 = instances[1].process_packet(Packet(flow(1), 64, DIR_OUT, 0))
    v2 = instances[1].process_packet(Packet(flow(1), 64, DIR_OUT, 0))
    assert v1.action == "translated" and v1.port == v2.port


def test_nat_distinct_flows_distinct_ports():
    sim, instances, boxes = nat_cluster(1, ports=range(2000, 2100))
    ports = set()
    for n in range(50):
        verdict = instances[1].process_packet(Packet(flow(n), 64, DIR_OUT, 0))
        assert verdict.action == "translated"
        ports.add(verdict.port)
    assert len(ports) == 50


def test_nat_pool_exhaustion_drops():
    sim, instances, boxes = nat_cluster(1, ports=range(2000, 2002))
    assert instances[1].process_packet(Packet(flow(1), 64, DIR_OUT, 0)).action == "translated"
    assert instances[1].process_packet(Packet(flow(2), 64, DIR_OUT, 0)).action == "translated"
    assert instances[1].process_packet(Packet(flow(3), 64, DIR_OUT, 0)).action == "dropped"
    assert instances[1].diagnostics["nat_pool_empty"] == 1


def test_nat_inbound_translates_claimed_port():
    sim, instances, boxes = nat_cluster(1)
    out = instances[1].process_packet(Packet(flow(1), 64, DIR_OUT, 0))
    response = FlowKey(0x08080808, PUBLIC_ADDR, 80, out.port, 6)
    back = instances[1].process_packet(Packet(response, 64, DIR_IN, 0))
    assert back.action == "translated"
    # a response from an unrelated remote to the same port is not let in
    stranger = FlowKey(0x01010101, PUBLIC_ADDR, 80, out.port, 6)
    assert instances[1].process_packet(Packet(stranger, 64, DIR_IN, 0)).action == "dropped"


def test_nat_concurrent_same_port_resolves_to_larger_five_tuple():
    sim, instances, boxes = nat_cluster(2)
    low, high = flow(1), flow(2)
    assert high.to_bytes() > low.to_bytes()
    # same virtual instant, both instances allocate the lowest free port
    sim.call_at(100, lambda: instances[1].process_packet(Packet(low, 64, DIR_OUT, 100)),
                owner=1)
    sim.call_at(100, lambda: instances[2].process_packet(Packet(high, 64, DIR_OUT, 100)),
                owner=2)
    collide_port = {}

    def check_same_port():
        p1 = boxes[1].fwd.value(low)
        p2 = boxes[2].fwd.value(high)
        assert p1 == p2  # both picked the same lowest port
        collide_port["p"] = int.from_bytes(p1, "big")
    sim.call_at(200, check_same_port, owner=0)
    assert quiesce(sim, instances)
    port = collide_port["p"]
    # deployment-wide winner is the numerically larger five tuple
    from constellation.middleboxes.nat import claim_key
    for box in boxes.values():
        assert box.claims.value(claim_key(port, 6)) == high.to_bytes()
    # loser flow is torn down with a reset verdict at its own instance
    verdict = instances[1].process_packet(Packet(low, 64, DIR_OUT, sim.now))
    assert verdict.action == "reset"
    assert boxes[1].resets == 1
    # the winner keeps translating
    assert instances[2].process_packet(Packet(high, 64, DIR_OUT, sim.now)).action == "translated"


def test_nat_lease_mode_prevents_collisions():
    sim, instances, boxes = nat_cluster(2, lease=True)
    sim.call_at(100, lambda: instances[1].process_packet(Packet(flow(1), 64, DIR_OUT, 100)),
                owner=1)
    sim.call_at(100, lambda: instances[2].process_packet(Packet(flow(2), 64, DIR_OUT, 100)),
                owner=2)
    assert quiesce(sim, instances)
    p1 = int.from_bytes(boxes[1].fwd.value(flow(1)), "big")
    p2 = int.from_bytes(boxes[2].fwd.value(flow(2)), "big")
    assert p1 != p2
    assert p1 % 2 == 0 and p2 % 2 == 1  # disjoint leased regions
    assert boxes[1].resets == boxes[2].resets == 0


def test_nat_state_converges_across_instances():
    sim, instances, boxes = nat_cluster(3, ports=range(2000, 2200))
    for n in range(30):
        owner = 1 + n % 3
        sim.call_at(100 + n * 50,
                    lambda n=n, o=owner: instances[o].process_packet(
                        Packet(flow(n), 64, DIR_OUT, sim.now)), owner=owner)
    assert quiesce(sim, instances)
    digests = {inst.query_digest() for inst in instances.values()}
    assert len(digests) == 1


# -- IDPS -----------------------------------------------------------------------

def idps_cluster(n, threshold_bits, topology=None, mode="exact"):
    def attach(inst):
        box = Idps(inst, counters_id=1, blocked_id=2,
                   threshold_bits=threshold_bits, mode=mode, port_space=1024,
                   sketch_n=512)
        inst.set_middlebox(box)
        return box
    return build_cluster(n, topology=topology, objects=attach)


def test_idps_below_threshold_passes():
    sim, instances, boxes = idps_cluster(1, threshold_bits=10_000)
    for i in range(5):
        pkt = Packet(FlowKey(i, 9, 1000 + i, 443, 17), 100, DIR_OUT, 0)
        assert instances[1].process_packet(pkt).action == "passed"


def test_idps_blocks_after_exact_packet_count():
    threshold = 9_999
    size = 125  # 1000 bits per packet
    expected_pass = math.ceil(threshold / (size * 8))
    sim, instances, boxes = idps_cluster(1, threshold_bits=threshold)
    verdicts = []
    for i in range(expected_pass + 5):
        pkt = Packet(FlowKey(i, 9, 1000, 443, 17), size, DIR_OUT, 0)
        verdicts.append(instances[1].process_packet(pkt).action)
    assert verdicts.count("passed") == expected_pass
    assert set(verdicts[expected_pass:]) == {"dropped"}


def test_idps_sketch_mode_blocks_and_converges():
    topo = Topology(instances=2, default_latency_us=5000, seed=3)
    sim, instances, boxes = idps_cluster(2, threshold_bits=40_000,
                                         topology=topo, mode="sketch")
    def pump(idx):
        def run():
            for i in range(40):
                pkt = Packet(FlowKey(i, 9, 1000 + i, 443, 17), 125, DIR_OUT, sim.now)
                instances[idx].process_packet(pkt)
        return run
    sim.call_at(100, pump(1), owner=1)
    sim.call_at(100, pump(2), owner=2)
    assert quiesce(sim, instances)
    assert boxes[1].is_blocked(443) and boxes[2].is_blocked(443)
    digests = {inst.query_digest() for inst in instances.values()}
    assert len(digests) == 1


def test_idps_blocked_set_replicates_within_delay_bound():
    # a port blocked at one instance is blocked everywhere no later than
    # one-way delay plus a send cycle
    topo = Topology(instances=2, default_latency_us=5000, seed=4)
    sim, instances, boxes = idps_cluster(2, threshold_bits=8_000, topology=topo)

    def cross():
        for i in range(10):
            instances[1].process_packet(
                Packet(FlowKey(i, 9, 1000, 443, 17), 125, DIR_OUT, sim.now))
        assert boxes[1].is_blocked(443)
    sim.call_at(100, cross, owner=1)

    seen = {}

    def watch():
        if boxes[2].is_blocked(443) and "at" not in seen:
            seen["at"] = sim.now
        elif "at" not in seen:
            sim.call_at(sim.now + 100, watch, owner=0)
    sim.call_at(200, watch, owner=0)
    assert quiesce(sim, instances)
    assert seen["at"] <= 100 + 5000 + 2 * 200 + 100


# -- firewall ----------------------------------------------------------------------

def firewall_cluster(n, topology=None):
    def attach(inst):
        box = Firewall(inst, table_id=1)
        inst.set_middlebox(box)
        return box
    return build_cluster(n, topology=topology, objects=attach)


def test_firewall_blocks_unsolicited_response():
    sim, instances, boxes = firewall_cluster(1)
    response = Packet(flow(1).reversed(), 64, DIR_IN, 0)
    assert instances[1].process_packet(response).action == "dropped"


def test_firewall_allows_response_after_replication():
    topo = Topology(instances=2, default_latency_us=5000, seed=5)
    sim, instances, boxes = firewall_cluster(2, topology=topo)
    key = flow(3)
    sim.call_at(100, lambda: instances[1].process_packet(
        Packet(key, 64, DIR_OUT, sim.now)), owner=1)
    verdicts = []
    # response takes the other path after the state replicated
    sim.call_at(20_000, lambda: verdicts.append(instances[2].process_packet(
        Packet(key.reversed(), 64, DIR_IN, sim.now)).action), owner=2)
    assert quiesce(sim, instances)
    assert verdicts == ["passed"]


def test_firewall_early_response_dropped_then_retry_passes():
    topo = Topology(instances=2, default_latency_us=5000, seed=6)
    sim, instances, boxes = firewall_cluster(2, topology=topo)
    key = flow(4)
    verdicts = []
    sim.call_at(100, lambda: instances[1].process_packet(
        Packet(key, 64, DIR_OUT, sim.now)), owner=1)
    # response beats the state update to instance 2
    sim.call_at(2_000, lambda: verdicts.append(instances[2].process_packet(
        Packet(key.reversed(), 64, DIR_IN, sim.now)).action), owner=2)
    # protocol retry after the update has replicated
    sim.call_at(40_000, lambda: verdicts.append(instances[2].process_packet(
        Packet(key.reversed(), 64, DIR_IN, sim.now)).action), owner=2)
    assert quiesce(sim, instances)
    assert verdicts == ["dropped", "passed"]


def test_firewall_soundness_no_pass_without_prior_request():
    # over a randomized run, every inbound pass is preceded by an outbound
    # packet of the reversed key somewhere, earlier in virtual time
    import random
    topo = Topology(instances=2, default_latency_us=3000, seed=7)
    sim, instances, boxes = firewall_cluster(2, topology=topo)
    rng = random.Random(7)
    outbound_times = {}

    def traffic():
        if sim.now > 300_000:
            return
        key = flow(rng.randrange(12))
        inst = instances[rng.choice((1, 2))]
        if rng.random() < 0.5:
            outbound_times.setdefault(key.to_bytes(), sim.now)
            inst.process_packet(Packet(key, 64, DIR_OUT, sim.now))
        else:
            inst.process_packet(Packet(key.reversed(), 64, DIR_IN, sim.now))
        sim.call_at(sim.now + rng.randrange(200, 2000), traffic, owner=0)
    sim.call_at(100, traffic, owner=0)
    assert quiesce(sim, instances)
    for box in boxes.values():
        for at, _inst, flow_str, verdict in box.verdicts:
            if verdict != "passed":
                continue
            # inbound passes name the reversed (outbound) key's reverse
            matching = [t for kb, t in outbound_times.items() if t <= at]
            assert matching, f"pass at {at} with no earlier request"
