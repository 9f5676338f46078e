"""Coordinator tests: registration barrier, scaling rounds, phase machine."""

import json

import pytest

from helpers import FakeAgent, make_spec
from scaleout import transport, wireproto
from scaleout.coordinator import (
    BindFailure,
    CoordError,
    Coordinator,
    JobPhase,
    JobSpec,
    LEGAL_TRANSITIONS,
    ScaleCommand,
    TERMINAL_PHASES,
    start_coordinator,
)
from scaleout.transport import RpcError, TransportError


@pytest.fixture
def stack(tmp_path):
    """A coordinator in Running with two fake worker agents."""
    coord = Coordinator(
        make_spec(tmp_path),
        provision_timeout=10.0,
        checkpoint_timeout=5.0,
        directive_timeout=2.0,
        address_resolve_timeout=2.0,
    )
    agents = [FakeAgent(f"demo-worker-{i}", tmp_path) for i in range(2)]
    for agent in agents:
        coord.dispatch("JobInit", {"node_name": agent.node_name})
    coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
    yield coord, agents
    coord.stop()
    for agent in agents:
        agent.close()


def arm_auto_confirm(coord, agents):
    for agent in agents:
        agent.on_checkpoint = (
            lambda name=agent.node_name: coord.dispatch("checkpointing", {"node_name": name})
        )


def add_scale_pod(coord, tmp_path, index):
    pod = FakeAgent(f"demo-scale-{index}", tmp_path)
    reply = coord.dispatch(
        "RetrieveKeys", {"node_name": pod.node_name, "address": pod.address}
    )
    return pod, reply


def test_spec_validation(tmp_path):
    make_spec(tmp_path).validate()
    with pytest.raises(ValueError):
        make_spec(tmp_path, job_name="Bad_Name").validate()
    with pytest.raises(ValueError):
        make_spec(tmp_path, initial_ranks=0).validate()
    with pytest.raises(ValueError):
        make_spec(tmp_path, workload_command=[]).validate()
    with pytest.raises(ValueError):
        make_spec(tmp_path, working_dir=tmp_path / "missing").validate()
    with pytest.raises(Exception):
        make_spec(tmp_path, adapter="mystery").validate()


def test_spec_from_dict_round_trip(tmp_path):
    spec = JobSpec.from_dict(
        {
            "job_name": "demo",
            "initial_ranks": 3,
            "workload_command": ["run", "--fast"],
            "working_dir": str(tmp_path),
            "checkpoint_grace": 1.5,
        }
    )
    assert spec.initial_ranks == 3
    assert spec.workload_command == ["run", "--fast"]
    assert spec.adapter == "parint"
    assert spec.checkpoint_grace == 1.5
    spec.validate()


def test_phase_machine_edges():
    forward = {(a, b) for a, b in LEGAL_TRANSITIONS if b is not JobPhase.FAILED}
    assert forward == {
        (JobPhase.WAITING_FOR_EXECUTORS, JobPhase.RUNNING),
        (JobPhase.RUNNING, JobPhase.SCALING),
        (JobPhase.RUNNING, JobPhase.COMPLETE),
        (JobPhase.SCALING, JobPhase.CHECKPOINTING),
        (JobPhase.CHECKPOINTING, JobPhase.RELAUNCHING),
        (JobPhase.RELAUNCHING, JobPhase.RUNNING),
    }
    for phase in JobPhase:
        assert ((phase, JobPhase.FAILED) in LEGAL_TRANSITIONS) == (phase is not JobPhase.FAILED)
    assert TERMINAL_PHASES == {JobPhase.COMPLETE, JobPhase.FAILED}


def test_bind_failure_on_occupied_port(tmp_path):
    first = start_coordinator(make_spec(tmp_path))
    try:
        second = Coordinator(make_spec(tmp_path), listen=first.address)
        with pytest.raises(BindFailure):
            second.start()
    finally:
        first.stop()


def test_initial_barrier_launches_once(stack):
    coord, agents = stack
    assert coord.world == 2
    assert [len(agent.launches) for agent in agents] == [1, 1]
    for rank, agent in enumerate(agents):
        launch = agent.launches[0]
        assert launch["rank"] == rank
        assert launch["world_size"] == 2
        assert launch["epoch"] == 1
        assert launch["restart"] is False
        assert launch["command"] == ["true"]
        assert launch["public_token"] == coord.keys.public_token
    # a duplicate JobInit is acknowledged and does not relaunch
    reply = coord.dispatch("JobInit", {"node_name": "demo-worker-0"})
    assert reply == {"accepted": True, "phase": "Running"}
    assert len(agents[0].launches) == 1
    assert [t["phase_to"] for t in coord.transitions] == ["Running"]


def test_job_init_held_until_quorum(tmp_path):
    coord = Coordinator(make_spec(tmp_path))
    agent = FakeAgent("demo-worker-0", tmp_path)
    try:
        for _ in range(3):
            reply = coord.dispatch("JobInit", {"node_name": "demo-worker-0"})
            assert reply == {"accepted": True, "phase": "WaitingForExecutors"}
        assert coord.phase is JobPhase.WAITING_FOR_EXECUTORS
        assert agent.launches == []
        assert len(coord.registry_snapshot()) == 1
    finally:
        coord.stop()
        agent.close()


def test_job_init_rejections(stack):
    coord, _ = stack
    with pytest.raises(CoordError) as excinfo:
        coord.dispatch("JobInit", {"node_name": "other-worker-0"})
    assert excinfo.value.code == "UnknownJob"
    with pytest.raises(CoordError) as excinfo:
        coord.dispatch("JobInit", {"node_name": "demo-scale-0"})
    assert excinfo.value.code == "BadRole"


def test_job_init_rejected_when_terminal(stack):
    coord, _ = stack
    for name in ("demo-worker-0", "demo-worker-1"):
        coord.dispatch("endExec", {"node_name": name})
    assert coord.wait_for_phase(JobPhase.COMPLETE, timeout=2.0) is JobPhase.COMPLETE
    with pytest.raises(CoordError) as excinfo:
        coord.dispatch("JobInit", {"node_name": "demo-worker-5"})
    assert excinfo.value.code == "UnknownJobPhase"


def test_active_server_reports_phase_and_heartbeat(stack):
    coord, _ = stack
    assert coord.dispatch("activeServer", {}) == {"phase": "Running"}
    coord.dispatch("activeServer", {"node_name": "demo-worker-0"})
    rec = coord._registry["demo-worker-0"]
    assert rec.last_heartbeat > 0
    # an unknown prober still learns the phase
    assert coord.dispatch("activeServer", {"node_name": "demo-worker-9"}) == {"phase": "Running"}


def test_scale_rejected_outside_running(tmp_path):
    coord = Coordinator(make_spec(tmp_path))
    try:
        with pytest.raises(CoordError) as excinfo:
            coord.dispatch("Scale", {"nodes": 4, "mode": "absolute"})
        assert excinfo.value.code == "NotRunning"
    finally:
        coord.stop()


def test_scale_must_grow(stack):
    coord, _ = stack
    for nodes in (1, 2):
        with pytest.raises(CoordError) as excinfo:
            coord.dispatch("Scale", {"nodes": nodes, "mode": "absolute"})
        assert excinfo.value.code == "NotAGrowth"
    with pytest.raises(CoordError):
        ScaleCommand(nodes=0, mode="delta").validate()
    with pytest.raises(CoordError):
        ScaleCommand(nodes=2, mode="sideways").validate()
    assert ScaleCommand(nodes=2, mode="delta").target_world(4) == 6
    assert ScaleCommand(nodes=6, mode="absolute").target_world(4) == 6


def test_full_scaling_round(stack, tmp_path):
    coord, agents = stack
    arm_auto_confirm(coord, agents)
    reply = coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    assert reply == {"accepted": True, "target_world": 3, "phase": "Scaling"}

    coord.wait_for_phase(JobPhase.CHECKPOINTING, JobPhase.RELAUNCHING, timeout=5.0)
    pod, keys = add_scale_pod(coord, tmp_path, 0)
    try:
        assert keys["rank"] == 2
        assert keys["public_token"] == coord.keys.public_token
        assert keys["private_token"] == coord.keys.private_token

        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
        assert coord.world == 3
        for agent in agents:
            assert len(agent.checkpoints) == 1
            assert agent.checkpoints[0]["signal"] == "SIGUSR1"
            assert agent.checkpoints[0]["grace_ms"] == 2000
            relaunch = agent.launches[1]
            assert relaunch["restart"] is True
            assert relaunch["epoch"] == 2
            assert relaunch["world_size"] == 3
        assert pod.launches[0]["rank"] == 2
        assert pod.checkpoints == []

        phases = [t["phase_to"] for t in coord.transitions]
        assert phases == ["Running", "Scaling", "Checkpointing", "Relaunching", "Running"]
        (rnd,) = coord.rounds
        assert (rnd.from_world, rnd.to_world) == (2, 3)
        assert rnd.checkpoint_s >= 0
        assert rnd.admit_s >= 0
        assert rnd.relaunch_s >= 0
    finally:
        pod.close()


def test_scale_pod_admitted_before_barrier(stack, tmp_path):
    """RetrieveKeys during Scaling is valid; relaunch still waits for the barrier."""
    coord, agents = stack
    reply = coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    assert reply["phase"] == "Scaling"
    pod, keys = add_scale_pod(coord, tmp_path, 0)
    try:
        assert keys["phase"] == "Scaling"
        assert coord.phase is JobPhase.SCALING
        for agent in agents:
            coord.dispatch("checkpointing", {"node_name": agent.node_name})
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
        assert coord.world == 3
    finally:
        pod.close()


def test_token_bundle_identical_for_all_pods(stack, tmp_path):
    coord, agents = stack
    arm_auto_confirm(coord, agents)
    coord.dispatch("Scale", {"nodes": 2, "mode": "delta"})
    coord.wait_for_phase(JobPhase.CHECKPOINTING, timeout=5.0)
    pod_a, keys_a = add_scale_pod(coord, tmp_path, 0)
    pod_b, keys_b = add_scale_pod(coord, tmp_path, 1)
    try:
        assert (keys_a["rank"], keys_b["rank"]) == (2, 3)
        for field in ("public_token", "private_token"):
            assert keys_a[field] == keys_b[field]
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
        assert coord.world == 4
    finally:
        pod_a.close()
        pod_b.close()


def test_retrieve_keys_rejections(stack, tmp_path):
    coord, agents = stack
    with pytest.raises(CoordError) as excinfo:
        coord.dispatch("RetrieveKeys", {"node_name": "demo-scale-0", "address": "127.0.0.1:1"})
    assert excinfo.value.code == "NotScaling"

    arm_auto_confirm(coord, agents)
    coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    coord.wait_for_phase(JobPhase.CHECKPOINTING, timeout=5.0)
    for name, code in [
        ("demo-worker-0", "DuplicateNode"),
        ("demo-worker-7", "BadRole"),
        ("other-scale-0", "UnknownJob"),
    ]:
        with pytest.raises(CoordError) as excinfo:
            coord.dispatch("RetrieveKeys", {"node_name": name, "address": "127.0.0.1:1"})
        assert excinfo.value.code == code

    pod, first = add_scale_pod(coord, tmp_path, 0)
    try:
        with pytest.raises(CoordError) as excinfo:
            coord.dispatch(
                "RetrieveKeys", {"node_name": pod.node_name, "address": pod.address}
            )
        assert excinfo.value.code == "DuplicateNode"
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
    finally:
        pod.close()


def test_unexpected_confirm(stack, tmp_path):
    coord, agents = stack
    with pytest.raises(CoordError) as excinfo:
        coord.dispatch("checkpointing", {"node_name": "demo-worker-0"})
    assert excinfo.value.code == "UnexpectedConfirm"

    coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    pod, _ = add_scale_pod(coord, tmp_path, 0)
    try:
        # the new pod is not part of the barrier for this round
        with pytest.raises(CoordError) as excinfo:
            coord.dispatch("checkpointing", {"node_name": pod.node_name})
        assert excinfo.value.code == "UnexpectedConfirm"
        for agent in agents:
            coord.dispatch("checkpointing", {"node_name": agent.node_name})
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
    finally:
        pod.close()


def test_end_exec_completes_job(stack):
    coord, _ = stack
    reply = coord.dispatch("endExec", {"node_name": "demo-worker-0"})
    assert reply == {"accepted": True, "phase": "Running"}
    states = {r["node"]: r["state"] for r in coord.registry_snapshot()}
    assert states == {"demo-worker-0": "Finished", "demo-worker-1": "Active"}
    reply = coord.dispatch("endExec", {"node_name": "demo-worker-1"})
    assert reply == {"accepted": True, "phase": "Complete"}
    # idempotent once terminal
    assert coord.dispatch("endExec", {"node_name": "demo-worker-1"})["accepted"] is True


def test_end_exec_from_unknown_node_ignored(stack):
    coord, _ = stack
    reply = coord.dispatch("endExec", {"node_name": "demo-worker-9"})
    assert reply == {"accepted": True, "phase": "Running"}
    assert coord.phase is JobPhase.RUNNING


def test_end_exec_suppressed_during_scaling(stack, tmp_path):
    coord, agents = stack
    coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    reply = coord.dispatch("endExec", {"node_name": "demo-worker-0"})
    assert reply == {"accepted": True, "phase": "Scaling"}
    assert coord.phase is JobPhase.SCALING

    pod, _ = add_scale_pod(coord, tmp_path, 0)
    try:
        for agent in agents:
            coord.dispatch("checkpointing", {"node_name": agent.node_name})
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
        # the suppressed completion does not survive the relaunch
        states = {r["node"]: r["state"] for r in coord.registry_snapshot()}
        assert states["demo-worker-0"] == "Active"
        for name in ("demo-worker-0", "demo-worker-1", "demo-scale-0"):
            coord.dispatch("endExec", {"node_name": name})
        assert coord.wait_for_phase(JobPhase.COMPLETE, timeout=2.0) is JobPhase.COMPLETE
    finally:
        pod.close()


def test_checkpoint_timeout_fails_job(tmp_path):
    coord = Coordinator(
        make_spec(tmp_path),
        checkpoint_timeout=0.3,
        provision_timeout=10.0,
        directive_timeout=1.0,
    )
    agents = [FakeAgent(f"demo-worker-{i}", tmp_path) for i in range(2)]
    try:
        for agent in agents:
            coord.dispatch("JobInit", {"node_name": agent.node_name})
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
        coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
        coord.wait_for_phase(JobPhase.FAILED, timeout=5.0)
        assert coord.fail_reason.startswith("CheckpointTimeout")
        assert [t["phase_to"] for t in coord.transitions][-1] == "Failed"
    finally:
        coord.stop()
        for agent in agents:
            agent.close()


def test_provision_timeout_fails_job(tmp_path):
    coord = Coordinator(
        make_spec(tmp_path),
        checkpoint_timeout=5.0,
        provision_timeout=0.6,
        directive_timeout=1.0,
    )
    agents = [FakeAgent(f"demo-worker-{i}", tmp_path) for i in range(2)]
    try:
        for agent in agents:
            coord.dispatch("JobInit", {"node_name": agent.node_name})
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
        arm_auto_confirm(coord, agents)
        coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
        coord.wait_for_phase(JobPhase.FAILED, timeout=5.0)
        assert coord.fail_reason.startswith("ProvisionTimeout")
    finally:
        coord.stop()
        for agent in agents:
            agent.close()


def test_unreachable_agents_fail_the_barrier(stack):
    coord, agents = stack
    for agent in agents:
        agent.close()
    coord._checkpoint_timeout = 0.3
    coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    coord.wait_for_phase(JobPhase.FAILED, timeout=10.0)
    assert coord.fail_reason.startswith("CheckpointTimeout")


def test_noncontiguous_worker_indices_fail(tmp_path):
    coord = Coordinator(make_spec(tmp_path))
    try:
        coord.dispatch("JobInit", {"node_name": "demo-worker-0"})
        coord.dispatch("JobInit", {"node_name": "demo-worker-2"})
        coord.wait_for_phase(JobPhase.FAILED, timeout=5.0)
        assert "LaunchDispatchFailure" in coord.fail_reason
    finally:
        coord.stop()


def test_missing_address_file_fails_launch(tmp_path):
    coord = Coordinator(make_spec(tmp_path), address_resolve_timeout=0.3)
    try:
        coord.dispatch("JobInit", {"node_name": "demo-worker-0"})
        coord.dispatch("JobInit", {"node_name": "demo-worker-1"})
        coord.wait_for_phase(JobPhase.FAILED, timeout=5.0)
        assert "LaunchDispatchFailure" in coord.fail_reason
        assert "no address published" in coord.fail_reason
    finally:
        coord.stop()


def test_event_log_records_transitions(stack, tmp_path):
    coord, agents = stack
    arm_auto_confirm(coord, agents)
    coord.dispatch("Scale", {"nodes": 3, "mode": "absolute"})
    coord.wait_for_phase(JobPhase.CHECKPOINTING, timeout=5.0)
    pod, _ = add_scale_pod(coord, tmp_path, 0)
    try:
        coord.wait_for_phase(JobPhase.RUNNING, timeout=10.0)
    finally:
        pod.close()
    lines = (tmp_path / "job-events.log").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    transitions = [r for r in records if r["event"] == "transition"]
    assert [t["seq"] for t in transitions] == list(range(len(transitions)))
    for entry in transitions:
        assert {"ts", "mono", "phase_from", "phase_to", "reason", "epoch", "world", "registry"} <= set(entry)
        assert (JobPhase(entry["phase_from"]), JobPhase(entry["phase_to"])) in LEGAL_TRANSITIONS
    assert [t["phase_to"] for t in transitions] == [
        "Running", "Scaling", "Checkpointing", "Relaunching", "Running",
    ]


def test_rpc_server_round_trip(tmp_path):
    coord = start_coordinator(make_spec(tmp_path))
    try:
        reply = transport.call(coord.address, "activeServer", {})
        assert reply == {"phase": "WaitingForExecutors"}
        with pytest.raises(RpcError) as excinfo:
            transport.call(coord.address, "Scale", {"nodes": 4, "mode": "absolute"})
        assert excinfo.value.code == "NotRunning"
        with pytest.raises((RpcError, TransportError)):
            transport.call(
                coord.address, "Launch",
                {
                    "rank": 0, "world_size": 1, "command": ["x"], "restart": False,
                    "rendezvous_dir": ".", "public_token": "t", "epoch": 1, "job_name": "demo",
                },
                methods=wireproto.AGENT_METHODS,
            )
    finally:
        coord.stop()
