"""Shared test doubles: fake agents, a scriptable coordinator endpoint,
and small drivers for whole-stack scenarios."""

import json
import socket
import socketserver
import sys
import threading
import time
from pathlib import Path

from scaleout import transport, wireproto
from scaleout.coordinator import JobPhase, JobSpec, start_coordinator
from scaleout.executor import AgentConfig, run_agent
from scaleout.transport import TransportError
from scaleout.wireproto import ProtocolError

TRIVIAL_CHILD = [sys.executable, "-c", "pass"]


def make_spec(tmp_path, **overrides):
    fields = dict(
        job_name="demo",
        initial_ranks=2,
        workload_command=["true"],
        working_dir=tmp_path,
        heartbeat_timestep=0.2,
        checkpoint_grace=2.0,
    )
    fields.update(overrides)
    return JobSpec(**fields)


class FakeAgent:
    """Directive endpoint standing in for an executor agent process."""

    def __init__(self, node_name, job_dir, *, on_checkpoint=None):
        self.node_name = node_name
        self.launches = []
        self.checkpoints = []
        self.on_checkpoint = on_checkpoint
        self._server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), _FakeAgentHandler)
        self._server.daemon_threads = True
        self._server.agent = self
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        host, port = self._server.server_address[:2]
        self.address = f"{host}:{port}"
        (job_dir / f"{node_name}.addr").write_text(self.address + "\n")

    def close(self):
        self._server.shutdown()
        self._server.server_close()


class _FakeAgentHandler(socketserver.BaseRequestHandler):
    def handle(self):
        agent = self.server.agent
        while True:
            try:
                msg = transport.read_frame(self.request, methods=wireproto.AGENT_METHODS)
            except (TransportError, ProtocolError, OSError):
                return
            if msg.method == "Launch":
                agent.launches.append(msg.params)
            else:
                agent.checkpoints.append(msg.params)
                if agent.on_checkpoint is not None:
                    threading.Thread(target=agent.on_checkpoint, daemon=True).start()
            transport.send_frame(self.request, wireproto.make_result(msg.id, {"accepted": True}))


class FakeCoordinator:
    """Scriptable control-plane endpoint for agent-side tests."""

    def __init__(self):
        self.phase = "Running"
        self.end_exec_phase = None
        self.errors = {}
        self.rank = 2
        self.public_token = "aa" * 32
        self.private_token = "bb" * 32
        self._records = []
        self._lock = threading.Lock()
        self._server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), _FakeCoordHandler)
        self._server.daemon_threads = True
        self._server.fake = self
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        host, port = self._server.server_address[:2]
        self.address = (host, port)

    def close(self):
        self._server.shutdown()
        self._server.server_close()

    def calls(self, method):
        with self._lock:
            return [params for m, params in self._records if m == method]

    def wait_for(self, method, timeout=5.0):
        deadline = time.perf_counter() + timeout
        while time.perf_counter() < deadline:
            found = self.calls(method)
            if found:
                return found
            time.sleep(0.02)
        raise TimeoutError(f"no {method} call within {timeout}s")

    def respond(self, method, params):
        with self._lock:
            self._records.append((method, dict(params)))
            if method in self.errors:
                return None, self.errors[method]
            if method == "activeServer":
                return {"phase": self.phase}, None
            if method == "JobInit":
                return {"accepted": True, "phase": self.phase}, None
            if method == "RetrieveKeys":
                return {
                    "public_token": self.public_token,
                    "private_token": self.private_token,
                    "rank": self.rank,
                    "phase": "Scaling",
                }, None
            if method == "checkpointing":
                return {"accepted": True, "phase": "Scaling"}, None
            if method == "endExec":
                return {"accepted": True, "phase": self.end_exec_phase or self.phase}, None
            return None, ("UnknownMethod", method)


def reserve_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


LEGAL_PHASE_PAIRS = frozenset(
    [
        ("WaitingForExecutors", "Running"),
        ("Running", "Scaling"),
        ("Running", "Complete"),
        ("Scaling", "Checkpointing"),
        ("Checkpointing", "Relaunching"),
        ("Relaunching", "Running"),
    ]
    + [
        (phase, "Failed")
        for phase in (
            "WaitingForExecutors", "Running", "Scaling", "Checkpointing", "Relaunching",
        )
    ]
)


def read_events(working_dir):
    path = Path(working_dir) / "job-events.log"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def read_trace(working_dir):
    """Phase transitions from the job event log, in order."""
    return [e for e in read_events(working_dir) if e.get("event") == "transition"]


def assert_legal_trace(working_dir):
    """Every recorded transition must be an edge of the phase machine."""
    trace = read_trace(working_dir)
    assert trace, "no transitions recorded"
    assert [entry["seq"] for entry in trace] == list(range(len(trace)))
    assert trace[0]["phase_from"] == "WaitingForExecutors"
    for prev, entry in zip(trace, trace[1:]):
        assert prev["phase_to"] == entry["phase_from"]
    pairs = [(entry["phase_from"], entry["phase_to"]) for entry in trace]
    for pair in pairs:
        assert pair in LEGAL_PHASE_PAIRS, f"illegal transition {pair}"
    return pairs


class AgentThread:
    """Runs one executor agent on a thread and captures its exit code."""

    def __init__(self, node_name, coordinator_addr, job_dir, *, timestep=0.05):
        self.node_name = node_name
        self.exit_code = None
        self._cfg = AgentConfig(
            node_name=node_name,
            coordinator_addr=coordinator_addr,
            heartbeat_timestep=timestep,
            job_dir=Path(job_dir),
            retry_initial=0.05,
            retry_cap=0.2,
        )
        self._thread = threading.Thread(
            target=self._run, name=f"agent-{node_name}", daemon=True
        )

    def start(self):
        self._thread.start()
        return self

    def _run(self):
        self.exit_code = run_agent(self._cfg)

    def join(self, timeout=30.0):
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError(f"agent {self.node_name} still running")
        return self.exit_code


def run_barrier_trial(job_dir, rng, *, ranks=3, timestep=0.05):
    """Bring up one job with coordinator and agents started in a random
    order; returns (launch_records, agent_exit_codes)."""
    from scaleout.coordinator import BindFailure

    for attempt in range(3):
        try:
            return _barrier_attempt(Path(job_dir) / f"try{attempt}", rng, ranks, timestep)
        except BindFailure:
            # the reserved port was re-allocated before the coordinator bound it
            if attempt == 2:
                raise
    raise AssertionError("unreachable")


def _barrier_attempt(job_dir, rng, ranks, timestep):
    job_dir.mkdir(parents=True, exist_ok=True)
    port = reserve_port()
    address = ("127.0.0.1", port)
    spec = make_spec(
        job_dir,
        job_name="rnd",
        initial_ranks=ranks,
        workload_command=TRIVIAL_CHILD,
        heartbeat_timestep=timestep,
    )
    actors = ["coordinator"] + [f"rnd-worker-{i}" for i in range(ranks)]
    rng.shuffle(actors)
    coord = None
    agents = []
    try:
        for actor in actors:
            if actor == "coordinator":
                coord = start_coordinator(spec, listen=address)
            else:
                agents.append(AgentThread(actor, address, job_dir, timestep=timestep))
                agents[-1].start()
            time.sleep(rng.uniform(0.0, 0.04))
        final = coord.wait_for_phase(JobPhase.COMPLETE, JobPhase.FAILED, timeout=30.0)
        assert final is JobPhase.COMPLETE, coord.fail_reason
        codes = [agent.join(timeout=10.0) for agent in agents]
        launches = list(coord.launches)
    finally:
        if coord is not None:
            coord.stop()
    assert_legal_trace(job_dir)
    return launches, codes


class _FakeCoordHandler(socketserver.BaseRequestHandler):
    def handle(self):
        fake = self.server.fake
        while True:
            try:
                msg = transport.read_frame(self.request)
            except (TransportError, ProtocolError, OSError):
                return
            result, error = fake.respond(msg.method, msg.params)
            if error is not None:
                reply = wireproto.make_error(msg.id, error[0], error[1])
            else:
                reply = wireproto.make_result(msg.id, result)
            try:
                transport.send_frame(self.request, reply)
            except OSError:
                return
