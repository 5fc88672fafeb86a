"""The reproducible experiments behind the CLI.

Every experiment builds a fresh simulator and instance set from the
configuration, drives a deterministic workload, runs to quiescence, and
reduces the outcome to a MetricsReport. Identical configuration and seed
produce a byte-identical report.
"""

from __future__ import annotations

from typing import Optional

from ..instance import Instance, snapshot_pause_us
from ..membership import Orchestrator
from ..middleboxes import Idps, Nat
from ..objects import PNCounter
from ..replication import ReplicationConfig
from ..simnet import Simulator
from ..types import ConfigError
from .config import ExperimentConfig
from .fuzz import KindHarness, kinds_for
from .oracles import OpTrace, centralized_idps_replay, leaked_after
from .report import MetricsReport, build_timeline, pair_rows

DRAIN_GRACE_US = 120_000_000


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    runner = {
        "convergence-fuzz": run_convergence_fuzz,
        "leaked-packets": run_leaked_packets,
        "coalescing": run_coalescing,
        "scale-out": run_scale_out,
        "scale-in": run_scale_in,
    }.get(cfg.kind)
    if runner is None:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}")
    return runner(cfg)


def _replication_config(cfg: ExperimentConfig) -> ReplicationConfig:
    base = cfg.replication
    return ReplicationConfig(**vars(base))


def _build_cluster(cfg: ExperimentConfig, sim: Simulator,
                   orchestrator: Optional[Orchestrator] = None
                   ) -> dict[int, Instance]:
    instances = {}
    for i in range(1, cfg.instances + 1):
        inst = Instance(i, sim, _replication_config(cfg), orchestrator)
        instances[i] = inst
        if orchestrator is not None:
            orchestrator.register_initial(inst)
    for inst in instances.values():
        inst.bootstrap_view(set(instances))
        inst.start()
    return instances


def _quiesce(sim: Simulator, instances, cfg: ExperimentConfig,
             orchestrator: Optional[Orchestrator] = None) -> bool:
    def drained():
        if orchestrator is not None and not orchestrator.idle():
            return False
        return all(inst.drained() for inst in instances.values())
    return sim.run_to_quiescence(cfg.duration_us + DRAIN_GRACE_US, drained)


def _inflate_all(sim: Simulator, instances, factor: int):
    topo = sim.topology
    for a in instances:
        for b in instances:
            if a != b:
                sim.set_latency(a, b, topo.pair_latency(a, b) * factor)


# ---------------------------------------------------------------------------
# convergence fuzz

def run_convergence_fuzz(cfg: ExperimentConfig) -> MetricsReport:
    sim = Simulator(cfg.topology)
    instances = _build_cluster(cfg, sim)
    trace = OpTrace()
    kinds = kinds_for(cfg.workload.object_kind)

    harnesses: dict[int, dict[str, KindHarness]] = {}
    for iid, inst in instances.items():
        inst.set_trace_hook(trace.hook)
        per_kind = {}
        for k_idx, kind in enumerate(kinds):
            harness = KindHarness(kind, iid, base_id=1 + 16 * k_idx)
            for obj in harness.objects:
                inst.register(obj)
            per_kind[kind] = harness
        harnesses[iid] = per_kind

    # paced random mutations, one rng per instance
    import random as _random
    step_us = 500
    steps = max(1, cfg.duration_us // step_us)
    per_step = max(1, -(-cfg.workload.ops_per_instance // steps))  # ceil

    def pump(iid: int, rng, done=None):
        done = done or {"n": {k: 0 for k in kinds}}

        def run():
            for kind in kinds:
                if done["n"][kind] >= cfg.workload.ops_per_instance:
                    continue
                for _ in range(per_step):
                    if done["n"][kind] >= cfg.workload.ops_per_instance:
                        break
                    harnesses[iid][kind].random_op(rng)
                    done["n"][kind] += 1
            if any(done["n"][k] < cfg.workload.ops_per_instance for k in kinds):
                sim.call_at(sim.now + step_us, run, owner=iid)
        return run

    for iid in instances:
        rng = _random.Random(f"fuzz:{cfg.seed}:{iid}")
        sim.call_at(100 + iid, pump(iid, rng), owner=iid)

    # A congested phase mid-run so coalescing is part of the mix: the paths
    # turn slow but reliable (bufferbloat-shaped), with the latency ramping
    # stepwise so round-trip samples keep flowing and the smoothed estimate
    # climbs past the detection threshold.
    base = {(a, b): (cfg.topology.pair_latency(a, b),
                     cfg.topology.pair_loss(a, b))
            for a in instances for b in instances if a != b}

    def set_phase(factor, congested):
        def apply():
            for (a, b), (latency, loss) in base.items():
                sim.set_latency(a, b, int(latency * factor))
                sim.set_loss(a, b, 0.0 if congested else loss)
        return apply

    # gentle geometric ramp: each step stays inside the retransmission
    # timeout's margin, so acknowledgements keep sampling cleanly and the
    # smoothed estimate can follow the path as it degrades
    phase = cfg.duration_us // 3
    step_gap = max(1, phase // 10)
    for step in range(8):
        sim.call_at(phase + step * step_gap,
                    set_phase(1.4 ** (step + 1), True), owner=0)
    sim.call_at(2 * phase, set_phase(1, False), owner=0)

    quiesced = _quiesce(sim, instances, cfg)

    oracle = {kind: KindHarness(kind, 0, base_id=1 + 16 * k_idx)
              for k_idx, kind in enumerate(kinds)}
    oracle_objects = {obj.object_id: obj
                      for h in oracle.values() for obj in h.objects}
    trace.replay(oracle_objects)

    per_kind_ok = {}
    for kind in kinds:
        digests = {iid: harnesses[iid][kind].digest() for iid in instances}
        expected = oracle[kind].digest()
        per_kind_ok[kind] = all(d == expected for d in digests.values())
    converged = quiesced and all(per_kind_ok.values())

    report = MetricsReport("convergence-fuzz", cfg.seed, quiesced=quiesced,
                           converged=converged, duration_us=sim.now)
    report.pairs = pair_rows(sim)
    report.summary = {
        "kinds": {k: per_kind_ok[k] for k in sorted(per_kind_ok)},
        "ops_traced": len(trace.ops),
        "instances": cfg.instances,
        "partial_overlaps": sum(
            inst.engine.diagnostics.get("partial_overlap_discarded", 0)
            for inst in instances.values()),
        "coalesced_records": sum(
            inst.engine.diagnostics.get("coalesced_records", 0)
            for inst in instances.values()),
    }
    return report


# ---------------------------------------------------------------------------
# leaked packets

def run_leaked_packets(cfg: ExperimentConfig) -> MetricsReport:
    from .workload import FloodGenerator

    if cfg.instances < 2:
        raise ConfigError("leaked-packets needs at least 2 instances")
    sim = Simulator(cfg.topology)
    instances = _build_cluster(cfg, sim)
    port_space = 4096
    if cfg.workload.flood_port >= port_space:
        raise ConfigError(f"flood_port must be < {port_space}")
    boxes = {}
    for iid, inst in instances.items():
        box = Idps(inst, counters_id=1, blocked_id=2,
                   threshold_bits=int(cfg.workload.threshold_mbits * 1_000_000),
                   mode="exact", port_space=port_space)
        inst.set_middlebox(box)
        boxes[iid] = box

    arrivals: list[tuple[int, int, int]] = []

    def on_packet(instance, pkt):
        arrivals.append((pkt.arrival, instance.instance_id, pkt.length * 8))

    rate_each = max(1, cfg.workload.flows_per_sec // cfg.instances)
    for iid in instances:
        gen = FloodGenerator(sim, iid, cfg.seed, rate_each,
                             cfg.workload.packet_size, cfg.workload.flood_port,
                             target=(lambda i=iid: instances[i]),
                             stop_at=cfg.duration_us, on_packet=on_packet)
        gen.start(100 + iid)

    quiesced = _quiesce(sim, instances, cfg)

    delay = max(cfg.topology.pair_latency(a, b)
                for a in instances for b in instances if a != b)
    verdict = centralized_idps_replay(
        arrivals, int(cfg.workload.threshold_mbits * 1_000_000), delay)
    all_verdicts = [v for box in boxes.values() for v in box.verdicts]
    all_verdicts.sort(key=lambda r: (r[0], r[1]))
    leaked = leaked_after(all_verdicts, verdict.t_star)

    report = MetricsReport("leaked-packets", cfg.seed, quiesced=quiesced,
                           converged=None, duration_us=sim.now)
    report.verdicts = all_verdicts
    report.timeline = build_timeline(all_verdicts, cfg.bucket_us)
    report.pairs = pair_rows(sim)
    report.leaked = [(iid, leaked.get(iid, 0),
                      round(verdict.expected.get(iid, 0.0), 3))
                     for iid in sorted(instances)]
    digests = {inst.query_digest() for inst in instances.values()}
    report.converged = quiesced and len(digests) == 1
    report.summary = {
        "t_star_us": verdict.t_star,
        "one_way_delay_us": delay,
        "leaked_total": sum(leaked.values()),
        "expected_total": round(sum(verdict.expected.values()), 3),
        "packets_offered": len(arrivals),
    }
    return report


# ---------------------------------------------------------------------------
# coalescing savings

def coalescing_savings(report_on: MetricsReport,
                       report_off: MetricsReport) -> float:
    """Bandwidth ratio between two runs differing only in the coalescing
    flag; >= 1 means coalescing saved bytes."""
    if (report_on.experiment != report_off.experiment
            or report_on.seed != report_off.seed
            or report_on.summary.get("workload") != report_off.summary.get("workload")):
        raise ConfigError("reports come from mismatched workloads")
    bytes_on = sum(row[3] for row in report_on.pairs)
    bytes_off = sum(row[3] for row in report_off.pairs)
    if bytes_on == 0:
        raise ConfigError("coalescing-on run carried no replication bytes")
    return bytes_off / bytes_on


def run_coalescing(cfg: ExperimentConfig) -> MetricsReport:
    on = _coalescing_run(cfg, True)
    off = _coalescing_run(cfg, False)
    ratio = off["bytes"] / on["bytes"] if on["bytes"] else 0.0
    report = MetricsReport("coalescing", cfg.seed,
                           quiesced=on["quiesced"] and off["quiesced"],
                           converged=on["converged"] and off["converged"]
                           and on["digest"] == off["digest"],
                           duration_us=max(on["duration"], off["duration"]))
    report.pairs = on["pairs"]
    report.summary = {
        "bytes_coalescing_on": on["bytes"],
        "bytes_coalescing_off": off["bytes"],
        "savings_ratio": round(ratio, 4),
        "coalesced_records": on["coalesced_records"],
        "final_value": on["value"],
        "states_identical": on["digest"] == off["digest"],
    }
    return report


def _coalescing_run(cfg: ExperimentConfig, coalescing: bool) -> dict:
    sim = Simulator(cfg.topology)
    repl = _replication_config(cfg)
    repl.coalescing_enabled = coalescing
    instances = {}
    counters = {}
    for i in range(1, cfg.instances + 1):
        inst = Instance(i, sim, ReplicationConfig(**vars(repl)))
        counter = PNCounter(1)
        inst.register(counter)
        instances[i] = inst
        counters[i] = counter
    for inst in instances.values():
        inst.bootstrap_view(set(instances))
        inst.start()

    # Probe traffic brackets the latency injection: the pre-inflation
    # probes set the RTT baseline, and the post-inflation ones keep
    # acknowledgements sampling so congestion is detected and the
    # lookahead window is fully grown before the measured workload starts.
    probe = {"n": 0}

    def probe_op():
        counters[1].update(1)
        probe["n"] += 1
        if probe["n"] < 130:
            sim.call_at(sim.now + 5_000, probe_op, owner=1)

    sim.call_at(100, probe_op, owner=1)
    inflate_at = 350_000
    sim.call_at(inflate_at, lambda: _inflate_all(sim, instances, 20), owner=0)

    total = cfg.workload.ops_per_instance
    state = {"n": 0}

    def main_op():
        for _ in range(2):
            if state["n"] < total:
                counters[1].update(1)
                state["n"] += 1
        if state["n"] < total:
            sim.call_at(sim.now + 200, main_op, owner=1)

    sim.call_at(700_000, main_op, owner=1)

    quiesced = _quiesce(sim, instances, cfg)
    digests = {inst.query_digest() for inst in instances.values()}
    return {
        "quiesced": quiesced,
        "converged": len(digests) == 1,
        "digest": sorted(digests)[0],
        "value": counters[1].value(),
        "bytes": sim.total_sent_bytes(),
        "pairs": pair_rows(sim),
        "duration": sim.now,
        "coalesced_records": sum(
            inst.engine.diagnostics.get("coalesced_records", 0)
            for inst in instances.values()),
    }


# ---------------------------------------------------------------------------
# scaling events

def _nat_factory(cfg: ExperimentConfig):
    ports = range(2000, 2000 + 8192)

    def make(inst: Instance) -> Nat:
        box = Nat(inst, pool_id=1, fwd_id=2, claims_id=3, bundle_id=4,
                  ports=ports)
        inst.set_middlebox(box)
        return box
    return make


def _start_flow_generators(cfg, sim, instances, boxes, targets):
    from .workload import FlowGenerator
    generators = {}
    for iid in list(instances):
        targets[iid] = iid

        def target(gen_id=iid):
            dst = targets.get(gen_id)
            inst = instances.get(dst)
            return inst if inst is not None and inst.alive else None

        gen = FlowGenerator(sim, iid, cfg.seed, cfg.workload.flows_per_sec,
                            cfg.workload.packets_per_flow,
                            cfg.workload.packet_size, target,
                            stop_at=cfg.duration_us)
        gen.start(100 + iid)
        generators[iid] = gen
    return generators


def _zero_record_loss(instances) -> tuple[bool, int]:
    """Every record every origin ever appended is applied at every other
    live instance (receive trackers reached the origin's full span)."""
    alive = {iid: inst for iid, inst in instances.items() if inst.alive}
    missing = 0
    for origin_id, origin in instances.items():
        for object_id in origin.store.registered():
            span = origin.store.full_span(object_id)
            if span == 0:
                continue
            for iid, inst in alive.items():
                if iid == origin_id:
                    continue
                tracker = inst.engine.recv.get((object_id, origin_id))
                got = tracker.ack if tracker else 0
                if got < span:
                    missing += span - got
    return missing == 0, missing


def run_scale_out(cfg: ExperimentConfig) -> MetricsReport:
    sim = Simulator(cfg.topology)
    orch = Orchestrator()
    instances: dict[int, Instance] = {}
    boxes: dict[int, Nat] = {}
    make_box = _nat_factory(cfg)
    for _ in range(cfg.instances):
        iid = orch.allocate_id()
        inst = Instance(iid, sim, _replication_config(cfg), orch)
        boxes[iid] = make_box(inst)
        instances[iid] = inst
        orch.register_initial(inst)
    for inst in instances.values():
        inst.bootstrap_view(set(instances))
        inst.start()

    trace = OpTrace()
    for inst in instances.values():
        inst.set_trace_hook(trace.hook)

    targets: dict[int, int] = {}
    generators = _start_flow_generators(cfg, sim, instances, boxes, targets)

    join_at = int(cfg.duration_us * 0.4)
    state = {"joiner": None, "joined_at": None}

    def do_join():
        jid = orch.allocate_id()
        inst = Instance(jid, sim, _replication_config(cfg), orch)
        boxes[jid] = make_box(inst)
        inst.set_trace_hook(trace.hook)
        instances[jid] = inst
        state["joiner"] = jid
        orch.scale_out(inst, donor_id=min(orch.view.active))

    def on_join_complete(jid, now):
        state["joined_at"] = now
        # route a share of new traffic to the fresh instance
        from .workload import FlowGenerator
        targets[jid] = jid

        def target(gen_id=jid):
            inst = instances.get(targets.get(gen_id))
            return inst if inst is not None and inst.alive else None

        gen = FlowGenerator(sim, jid, cfg.seed, cfg.workload.flows_per_sec,
                            cfg.workload.packets_per_flow,
                            cfg.workload.packet_size, target,
                            stop_at=cfg.duration_us)
        gen.start(now + 1000)
        generators[jid] = gen

    orch.on_join_complete = on_join_complete
    sim.call_at(join_at, do_join, owner=0)

    quiesced = _quiesce(sim, instances, cfg, orch)

    digests = {iid: inst.query_digest()
               for iid, inst in instances.items() if inst.alive}
    values = set(digests.values())
    no_loss, missing = _zero_record_loss(instances)
    donor_id = min(iid for iid in instances if instances[iid].alive
                   and iid != state["joiner"])
    donor = instances[donor_id]
    pause_ok = all(pause == snapshot_pause_us(blob)
                   for _, pause, blob in donor.pause_windows)
    converged = (quiesced and len(values) == 1 and no_loss
                 and state["joined_at"] is not None and not orch.join_errors)

    all_verdicts = sorted((v for box in boxes.values() for v in box.verdicts),
                          key=lambda r: (r[0], r[1]))
    report = MetricsReport("scale-out", cfg.seed, quiesced=quiesced,
                           converged=converged, duration_us=sim.now)
    report.verdicts = all_verdicts
    report.timeline = build_timeline(all_verdicts, cfg.bucket_us)
    report.pairs = pair_rows(sim)
    report.summary = {
        "join_started_us": join_at,
        "join_completed_us": state["joined_at"],
        "donor_pauses": [list(w) for w in donor.pause_windows],
        "donor_pause_matches_copy": pause_ok,
        "records_missing": missing,
        "join_errors": list(orch.join_errors),
        "flows_opened": sum(g.flows_opened for g in generators.values()),
    }
    return report


def run_scale_in(cfg: ExperimentConfig) -> MetricsReport:
    if cfg.instances < 2:
        raise ConfigError("scale-in needs at least 2 instances")
    sim = Simulator(cfg.topology)
    orch = Orchestrator()
    instances: dict[int, Instance] = {}
    boxes: dict[int, Nat] = {}
    make_box = _nat_factory(cfg)
    for _ in range(cfg.instances):
        iid = orch.allocate_id()
        inst = Instance(iid, sim, _replication_config(cfg), orch)
        boxes[iid] = make_box(inst)
        instances[iid] = inst
        orch.register_initial(inst)
    for inst in instances.values():
        inst.bootstrap_view(set(instances))
        inst.start()

    trace = OpTrace()
    for inst in instances.values():
        inst.set_trace_hook(trace.hook)

    targets: dict[int, int] = {}
    generators = _start_flow_generators(cfg, sim, instances, boxes, targets)

    victim = max(instances)
    victim_spans: dict[int, int] = {}
    leave_at = int(cfg.duration_us * 0.4)
    state = {"left_at": None}

    def do_leave():
        targets[victim] = min(iid for iid in instances if iid != victim)
        orch.scale_in(victim)

    def on_leave_complete(vid, now):
        state["left_at"] = now
        for object_id in instances[vid].store.registered():
            victim_spans[object_id] = instances[vid].store.full_span(object_id)

    orch.on_leave_complete = on_leave_complete
    sim.call_at(leave_at, do_leave, owner=0)

    quiesced = _quiesce(sim, instances, cfg, orch)

    survivors = {iid: inst for iid, inst in instances.items() if inst.alive}
    digests = {inst.query_digest() for inst in survivors.values()}
    missing = 0
    for object_id, span in victim_spans.items():
        for inst in survivors.values():
            tracker = inst.engine.recv.get((object_id, victim))
            got = tracker.ack if tracker else 0
            if got < span:
                missing += span - got
    views = {inst.view.as_tuple() for inst in survivors.values()}
    converged = (quiesced and len(digests) == 1 and missing == 0
                 and state["left_at"] is not None and len(views) == 1
                 and victim not in survivors)

    all_verdicts = sorted((v for box in boxes.values() for v in box.verdicts),
                          key=lambda r: (r[0], r[1]))
    report = MetricsReport("scale-in", cfg.seed, quiesced=quiesced,
                           converged=converged, duration_us=sim.now)
    report.verdicts = all_verdicts
    report.timeline = build_timeline(all_verdicts, cfg.bucket_us)
    report.pairs = pair_rows(sim)
    report.summary = {
        "victim": victim,
        "leave_started_us": leave_at,
        "leave_completed_us": state["left_at"],
        "victim_records": {str(k): v for k, v in sorted(victim_spans.items())},
        "records_missing": missing,
        "survivors": sorted(survivors),
    }
    return report
