import pytest

from constellation.instance import Instance
from constellation.replication import ReplicationConfig
from constellation.simnet import Simulator, Topology

ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def record_acceptance(name: str, passed: bool) -> None:
    ACCEPTANCE_RESULTS.append((name, "PASS" if passed else "FAIL"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{outcome}  {name}")


def build_cluster(n, topology=None, config=None, seed=0, objects=None):
    """n instances attached to one simulator, with identical object graphs
    built by the ``objects`` factory: objects(instance) -> handle."""
    topo = topology or Topology(instances=n, default_latency_us=5000, seed=seed)
    sim = Simulator(topo)
    instances, handles = {}, {}
    for i in range(1, n + 1):
        inst = Instance(i, sim, ReplicationConfig(**vars(config)) if config
                        else ReplicationConfig())
        if objects is not None:
            handles[i] = objects(inst)
        instances[i] = inst
    for inst in instances.values():
        inst.bootstrap_view(set(instances))
        inst.start()
    return sim, instances, handles


def quiesce(sim, instances, max_t=120_000_000, extra=None):
    def drained():
        if extra is not None and not extra():
            return False
        return all(inst.drained() for inst in instances.values())
    return sim.run_to_quiescence(max_t, drained)


@pytest.fixture
def cluster2():
    return build_cluster(2)
