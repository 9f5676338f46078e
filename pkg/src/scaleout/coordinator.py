"""Job coordinator: registry, phase machine, and scaling rounds.

One coordinator owns one job.  Executor agents register with JobInit or
RetrieveKeys, heartbeat with activeServer, confirm checkpoints with
checkpointing, and report completion with endExec.  A monitor asks for
growth with Scale.  All state lives behind a single condition variable;
handlers mutate it briefly and background threads (initial launch,
scaling rounds) wait on it, so there is exactly one writer at a time.

Every phase change is appended to ``working_dir/job-events.log`` as one
JSON line carrying the old and new phase, a reason string, and a
registry snapshot.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import socketserver
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import transport, wireproto
from .transport import RpcError, TransportError
from .wireproto import AGENT_METHODS, MalformedBody, ProtocolError, RpcResponse
from .workloads.adapters import TransformContext, get_adapter, transform_restart_command

_JOB_NAME_RE = wireproto.NODE_NAME_RE  # node names embed the job name


class JobPhase(str, Enum):
    """Lifecycle of a job, one active phase at a time."""

    WAITING_FOR_EXECUTORS = "WaitingForExecutors"
    RUNNING = "Running"
    SCALING = "Scaling"
    CHECKPOINTING = "Checkpointing"
    RELAUNCHING = "Relaunching"
    COMPLETE = "Complete"
    FAILED = "Failed"


TERMINAL_PHASES = frozenset({JobPhase.COMPLETE, JobPhase.FAILED})

# Forward edges plus the universal bail-out edge into Failed.
LEGAL_TRANSITIONS = frozenset(
    {
        (JobPhase.WAITING_FOR_EXECUTORS, JobPhase.RUNNING),
        (JobPhase.RUNNING, JobPhase.SCALING),
        (JobPhase.RUNNING, JobPhase.COMPLETE),
        (JobPhase.SCALING, JobPhase.CHECKPOINTING),
        (JobPhase.CHECKPOINTING, JobPhase.RELAUNCHING),
        (JobPhase.RELAUNCHING, JobPhase.RUNNING),
    }
    | {(phase, JobPhase.FAILED) for phase in JobPhase if phase is not JobPhase.FAILED}
)


class ExecutorState(str, Enum):
    REGISTERED = "Registered"
    ACTIVE = "Active"
    AWAITING_RELAUNCH = "AwaitingRelaunch"
    FINISHED = "Finished"


class CoordError(Exception):
    """Handler-level failure returned to the caller as an error response."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class BindFailure(Exception):
    """The requested listen address could not be bound."""


@dataclass
class JobSpec:
    """Everything the coordinator needs to know about one job."""

    job_name: str
    initial_ranks: int
    workload_command: list[str]
    working_dir: Path
    adapter: str = "parint"
    heartbeat_timestep: float = 10.0
    checkpoint_grace: float = 30.0

    def validate(self) -> None:
        probe = f"{self.job_name}-worker-0"
        if wireproto.NODE_NAME_RE.match(probe) is None:
            raise ValueError(f"invalid job name: {self.job_name!r}")
        if self.initial_ranks < 1:
            raise ValueError("initial_ranks must be at least 1")
        if not self.workload_command:
            raise ValueError("workload_command must be non-empty")
        path = Path(self.working_dir)
        if not path.is_dir() or not os.access(path, os.W_OK):
            raise ValueError(f"working_dir is not a writable directory: {path}")
        if self.heartbeat_timestep <= 0:
            raise ValueError("heartbeat_timestep must be positive")
        if self.checkpoint_grace < 0:
            raise ValueError("checkpoint_grace must be non-negative")
        get_adapter(self.adapter)

    @classmethod
    def from_dict(cls, data: dict) -> "JobSpec":
        return cls(
            job_name=data["job_name"],
            initial_ranks=int(data["initial_ranks"]),
            workload_command=[str(part) for part in data["workload_command"]],
            working_dir=Path(data["working_dir"]),
            adapter=data.get("adapter", "parint"),
            heartbeat_timestep=float(data.get("heartbeat_timestep", 10.0)),
            checkpoint_grace=float(data.get("checkpoint_grace", 30.0)),
        )


@dataclass(frozen=True)
class KeyBundle:
    """Per-job token pair handed to every executor."""

    public_token: str
    private_token: str

    @classmethod
    def generate(cls) -> "KeyBundle":
        return cls(public_token=secrets.token_hex(32), private_token=secrets.token_hex(32))


@dataclass
class ExecutorRecord:
    node_name: str
    role: str
    index: int
    rank: int | None = None
    address: tuple[str, int] | None = None
    state: ExecutorState = ExecutorState.REGISTERED
    registered_at: float = 0.0
    last_heartbeat: float = 0.0
    epoch: int = 0

    def snapshot(self) -> dict:
        return {
            "node": self.node_name,
            "role": self.role,
            "rank": self.rank,
            "state": self.state.value,
            "epoch": self.epoch,
        }


@dataclass(frozen=True)
class ScaleCommand:
    nodes: int
    mode: str

    def validate(self) -> None:
        if type(self.nodes) is not int or self.nodes < 1:
            raise CoordError("NotAGrowth", f"nodes must be a positive integer, got {self.nodes!r}")
        if self.mode not in ("delta", "absolute"):
            raise CoordError("NotAGrowth", f"unknown mode {self.mode!r}")

    def target_world(self, current: int) -> int:
        return current + self.nodes if self.mode == "delta" else self.nodes


@dataclass
class ScalingRound:
    """One Scale-to-relaunch cycle, with barrier state and timings."""

    index: int
    from_world: int
    to_world: int
    expected_new: int
    pre_scale: frozenset
    accepted_mono: float
    confirms: set = field(default_factory=set)
    new_nodes: list = field(default_factory=list)
    barrier_done: bool = False
    admitted: bool = False
    barrier_mono: float | None = None
    admitted_mono: float | None = None
    running_mono: float | None = None

    @property
    def checkpoint_s(self) -> float | None:
        if self.barrier_mono is None:
            return None
        return self.barrier_mono - self.accepted_mono

    @property
    def admit_s(self) -> float | None:
        if self.admitted_mono is None or self.barrier_mono is None:
            return None
        return self.admitted_mono - self.barrier_mono

    @property
    def relaunch_s(self) -> float | None:
        if self.running_mono is None or self.admitted_mono is None:
            return None
        return self.running_mono - self.admitted_mono


@dataclass(frozen=True)
class LaunchRecord:
    epoch: int
    world: int
    restart: bool
    command: tuple
    hosts: tuple
    running_mono: float


class Coordinator:
    """Serves the job RPCs and drives launches and scaling rounds."""

    def __init__(
        self,
        spec: JobSpec,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        *,
        provision_timeout: float = 120.0,
        checkpoint_timeout: float | None = None,
        relaunch_delay: float = 0.0,
        directive_timeout: float = 5.0,
        address_resolve_timeout: float = 5.0,
    ):
        spec.validate()
        self._spec = spec
        self._adapter = get_adapter(spec.adapter)
        self._listen = listen
        self._provision_timeout = provision_timeout
        self._checkpoint_timeout = (
            spec.checkpoint_grace if checkpoint_timeout is None else checkpoint_timeout
        )
        self._relaunch_delay = relaunch_delay
        self._directive_timeout = directive_timeout
        self._address_resolve_timeout = address_resolve_timeout

        self._cond = threading.Condition()
        self._phase = JobPhase.WAITING_FOR_EXECUTORS
        self._registry: dict[str, ExecutorRecord] = {}
        self._keys = KeyBundle.generate()
        self._epoch = 0
        self._world = 0
        self._round: ScalingRound | None = None
        self._round_counter = 0
        self._rounds: list[ScalingRound] = []
        self._launches: list[LaunchRecord] = []
        self._transitions: list[dict] = []
        self._fail_reason: str | None = None
        self._initial_launch_started = False
        self._stopping = False
        self._server: _RpcServer | None = None
        self._server_thread: threading.Thread | None = None
        self._workers: list[threading.Thread] = []
        self._events_path = Path(spec.working_dir) / "job-events.log"
        self._log_lock = threading.Lock()

    # -- lifecycle ----------------------------------------------------

    def start(self) -> None:
        try:
            self._server = _RpcServer(self._listen, _CoordinatorHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self._listen[0]}:{self._listen[1]}: {exc}") from exc
        self._server.coordinator = self
        self._server_thread = threading.Thread(
            target=self._server.serve_forever, name="coordinator-rpc", daemon=True
        )
        self._server_thread.start()
        self._log_event("coordinator_started", listen=transport.format_address(self.address))

    def stop(self) -> None:
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        for worker in self._workers:
            worker.join(timeout=2.0)

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("coordinator not started")
        host, port = self._server.server_address[:2]
        return host, port

    @property
    def phase(self) -> JobPhase:
        with self._cond:
            return self._phase

    @property
    def fail_reason(self) -> str | None:
        with self._cond:
            return self._fail_reason

    @property
    def transitions(self) -> list[dict]:
        with self._cond:
            return [dict(entry) for entry in self._transitions]

    @property
    def rounds(self) -> list[ScalingRound]:
        with self._cond:
            return list(self._rounds)

    @property
    def launches(self) -> list[LaunchRecord]:
        with self._cond:
            return list(self._launches)

    @property
    def keys(self) -> KeyBundle:
        return self._keys

    @property
    def world(self) -> int:
        with self._cond:
            return self._world

    def registry_snapshot(self) -> list[dict]:
        with self._cond:
            return [
                rec.snapshot()
                for rec in sorted(self._registry.values(), key=lambda r: r.node_name)
            ]

    def wait_for_phase(self, *phases: JobPhase, timeout: float | None = None) -> JobPhase:
        """Block until the job reaches one of ``phases``; raise on timeout."""
        deadline = None if timeout is None else time.perf_counter() + timeout
        with self._cond:
            while self._phase not in phases:
                remaining = None if deadline is None else deadline - time.perf_counter()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(
                        f"still {self._phase.value} after {timeout} s, wanted "
                        + "/".join(p.value for p in phases)
                    )
                self._cond.wait(remaining if remaining is not None else 0.5)
            return self._phase

    # -- RPC entry points ----------------------------------------------

    def dispatch(self, method: str, params: dict) -> dict:
        if method == "JobInit":
            return self.handle_job_init(params["node_name"])
        if method == "activeServer":
            return self.handle_active_server(params.get("node_name"))
        if method == "Scale":
            return self.handle_scale(ScaleCommand(nodes=params["nodes"], mode=params["mode"]))
        if method == "RetrieveKeys":
            return self.handle_retrieve_keys(params["node_name"], params["address"])
        if method == "checkpointing":
            return self.handle_checkpoint_done(params["node_name"])
        if method == "endExec":
            return self.handle_end_exec(params["node_name"])
        raise CoordError("UnknownMethod", method)

    def handle_job_init(self, node_name: str) -> dict:
        with self._cond:
            if self._phase in TERMINAL_PHASES:
                raise CoordError("UnknownJobPhase", f"job is {self._phase.value}")
            rec = self._registry.get(node_name)
            if rec is None:
                job, role, index = wireproto.parse_node_name(node_name)
                if job != self._spec.job_name:
                    raise CoordError("UnknownJob", f"{node_name} does not belong to this job")
                if role != "worker":
                    raise CoordError("BadRole", "JobInit is for initial worker pods only")
                rec = ExecutorRecord(
                    node_name=node_name,
                    role=role,
                    index=index,
                    registered_at=time.time(),
                )
                self._registry[node_name] = rec
                self._log_event("executor_registered", node=node_name)
                self._maybe_start_initial_launch_locked()
            return {"accepted": True, "phase": self._phase.value}

    def handle_active_server(self, node_name: str | None = None) -> dict:
        with self._cond:
            if node_name:
                rec = self._registry.get(node_name)
                if rec is not None:
                    rec.last_heartbeat = time.time()
            return {"phase": self._phase.value}

    def handle_scale(self, cmd: ScaleCommand) -> dict:
        cmd.validate()
        with self._cond:
            if self._phase is not JobPhase.RUNNING:
                raise CoordError("NotRunning", f"phase is {self._phase.value}")
            target = cmd.target_world(self._world)
            if target <= self._world:
                raise CoordError(
                    "NotAGrowth", f"target world {target} does not exceed current {self._world}"
                )
            pre_scale = frozenset(
                name for name, rec in self._registry.items() if rec.state is ExecutorState.ACTIVE
            )
            self._round_counter += 1
            rnd = ScalingRound(
                index=self._round_counter,
                from_world=self._world,
                to_world=target,
                expected_new=target - self._world,
                pre_scale=pre_scale,
                accepted_mono=time.perf_counter(),
            )
            self._round = rnd
            self._transition(JobPhase.SCALING, f"scale accepted: {self._world} -> {target}")
            self._spawn(self._run_scaling_round, rnd, name=f"scaling-round-{rnd.index}")
            return {"accepted": True, "target_world": target, "phase": self._phase.value}

    def handle_retrieve_keys(self, node_name: str, address: str) -> dict:
        addr = wireproto.parse_address(address)
        with self._cond:
            if self._phase not in (
                JobPhase.SCALING,
                JobPhase.CHECKPOINTING,
                JobPhase.RELAUNCHING,
            ):
                raise CoordError("NotScaling", f"phase is {self._phase.value}")
            if node_name in self._registry:
                raise CoordError("DuplicateNode", f"{node_name} is already registered")
            job, role, index = wireproto.parse_node_name(node_name)
            if job != self._spec.job_name:
                raise CoordError("UnknownJob", f"{node_name} does not belong to this job")
            if role != "scale":
                raise CoordError("BadRole", "RetrieveKeys is for scale pods only")
            rank = max(
                (rec.rank for rec in self._registry.values() if rec.rank is not None), default=-1
            ) + 1
            rec = ExecutorRecord(
                node_name=node_name,
                role=role,
                index=index,
                rank=rank,
                address=addr,
                registered_at=time.time(),
            )
            self._registry[node_name] = rec
            self._log_event("scale_pod_registered", node=node_name, rank=rank)
            rnd = self._round
            if rnd is not None and not rnd.admitted:
                rnd.new_nodes.append(node_name)
                self._maybe_admit_locked(rnd)
            self._cond.notify_all()
            return {
                "public_token": self._keys.public_token,
                "private_token": self._keys.private_token,
                "rank": rank,
                "phase": self._phase.value,
            }

    def handle_checkpoint_done(self, node_name: str) -> dict:
        with self._cond:
            if self._phase not in (JobPhase.SCALING, JobPhase.CHECKPOINTING):
                raise CoordError("UnexpectedConfirm", f"phase is {self._phase.value}")
            rnd = self._round
            if rnd is None or node_name not in rnd.pre_scale:
                raise CoordError("UnexpectedConfirm", f"{node_name} is not in the checkpoint barrier")
            self._registry[node_name].state = ExecutorState.AWAITING_RELAUNCH
            rnd.confirms.add(node_name)
            if not rnd.barrier_done and rnd.confirms >= rnd.pre_scale:
                rnd.barrier_done = True
                rnd.barrier_mono = time.perf_counter()
                self._transition(JobPhase.CHECKPOINTING, "checkpoint barrier complete")
                self._maybe_admit_locked(rnd)
            self._cond.notify_all()
            return {"accepted": True, "phase": self._phase.value}

    def handle_end_exec(self, node_name: str) -> dict:
        with self._cond:
            if self._phase is JobPhase.RUNNING:
                rec = self._registry.get(node_name)
                if rec is not None and rec.state is ExecutorState.ACTIVE:
                    rec.state = ExecutorState.FINISHED
                    self._log_event("executor_finished", node=node_name)
                    if not any(
                        r.state is ExecutorState.ACTIVE for r in self._registry.values()
                    ):
                        self._transition(JobPhase.COMPLETE, "all executors finished")
            else:
                # completion is suppressed outside Running; see handle_end_exec contract
                self._log_event("end_exec_suppressed", node=node_name, phase=self._phase.value)
            return {"accepted": True, "phase": self._phase.value}

    # -- internal machinery --------------------------------------------

    def _maybe_start_initial_launch_locked(self) -> None:
        if self._initial_launch_started or self._phase is not JobPhase.WAITING_FOR_EXECUTORS:
            return
        workers = sorted(
            (rec for rec in self._registry.values() if rec.role == "worker"),
            key=lambda rec: rec.index,
        )
        if len(workers) < self._spec.initial_ranks:
            return
        workers = workers[: self._spec.initial_ranks]
        indices = [rec.index for rec in workers]
        if indices != list(range(self._spec.initial_ranks)):
            self._fail_locked(f"LaunchDispatchFailure: worker indices {indices} are not 0..W-1")
            return
        for rec in workers:
            rec.rank = rec.index
        self._initial_launch_started = True
        self._spawn(self._launch_job, workers, False, None, None, name="initial-launch")

    def _maybe_admit_locked(self, rnd: ScalingRound) -> None:
        if rnd.admitted or not rnd.barrier_done:
            return
        if len(rnd.new_nodes) < rnd.expected_new:
            return
        rnd.admitted = True
        rnd.admitted_mono = time.perf_counter()
        self._transition(JobPhase.RELAUNCHING, "new executors admitted")

    def _run_scaling_round(self, rnd: ScalingRound) -> None:
        with self._cond:
            targets = [(name, self._registry[name].address) for name in sorted(rnd.pre_scale)]
            epoch = self._epoch
        grace_ms = int(self._spec.checkpoint_grace * 1000)
        for name, addr in targets:
            try:
                transport.call(
                    addr,
                    "Checkpoint",
                    {"signal": self._adapter.checkpoint_signal, "grace_ms": grace_ms, "epoch": epoch},
                    timeout=self._directive_timeout,
                    methods=AGENT_METHODS,
                )
            except (TransportError, RpcError) as exc:
                # an unreachable agent surfaces as a barrier timeout below
                self._log_event("checkpoint_directive_failed", node=name, error=str(exc))
        dispatch_done = time.perf_counter()
        # allow one beat past the grace for the final confirm to arrive
        ckpt_deadline = dispatch_done + self._checkpoint_timeout + min(
            self._spec.heartbeat_timestep, 1.0
        )
        with self._cond:
            if not self._wait_locked(lambda: rnd.barrier_done, ckpt_deadline):
                if self._phase in TERMINAL_PHASES or self._stopping:
                    return
                missing = sorted(rnd.pre_scale - rnd.confirms)
                self._fail_locked(f"CheckpointTimeout: no confirm from {missing}")
                return
            prov_deadline = rnd.accepted_mono + self._provision_timeout
            if not self._wait_locked(lambda: rnd.admitted, prov_deadline):
                if self._phase in TERMINAL_PHASES or self._stopping:
                    return
                self._fail_locked(
                    f"ProvisionTimeout: {len(rnd.new_nodes)} of {rnd.expected_new} "
                    "new executors registered"
                )
                return
        if self._relaunch_delay > 0:
            # injected relaunch cost, counted inside the Relaunching phase
            time.sleep(self._relaunch_delay)
        try:
            command = transform_restart_command(
                list(self._spec.workload_command),
                self._adapter,
                TransformContext(working_dir=Path(self._spec.working_dir)),
            )
        except Exception as exc:
            self._fail(f"RestartTransformFailure: {exc}")
            return
        with self._cond:
            hosts = sorted(
                (rec for rec in self._registry.values() if rec.rank is not None),
                key=lambda rec: rec.rank,
            )
        self._launch_job(hosts, True, rnd, command)

    def _launch_job(
        self,
        hosts: list[ExecutorRecord],
        restart: bool,
        rnd: ScalingRound | None,
        command: list[str] | None,
    ) -> None:
        if command is None:
            command = list(self._spec.workload_command)
        world = len(hosts)
        ranks = sorted(rec.rank for rec in hosts)
        if ranks != list(range(world)):
            self._fail(f"LaunchDispatchFailure: ranks {ranks} are not contiguous")
            return
        epoch = self._epoch + 1
        directives = []
        for rec in hosts:
            addr = rec.address or self._resolve_address(rec.node_name)
            if addr is None:
                self._fail(f"LaunchDispatchFailure: no address published by {rec.node_name}")
                return
            directives.append((rec, addr))
        params_common = {
            "world_size": world,
            "command": list(command),
            "restart": restart,
            "rendezvous_dir": str(self._spec.working_dir),
            "public_token": self._keys.public_token,
            "epoch": epoch,
            "job_name": self._spec.job_name,
        }
        for rec, addr in directives:
            try:
                transport.call(
                    addr,
                    "Launch",
                    {"rank": rec.rank, **params_common},
                    timeout=self._directive_timeout,
                    methods=AGENT_METHODS,
                )
            except (TransportError, RpcError) as exc:
                self._fail(f"LaunchDispatchFailure: {rec.node_name}: {exc}")
                return
        running_mono = time.perf_counter()
        with self._cond:
            if self._phase in TERMINAL_PHASES or self._stopping:
                return
            self._epoch = epoch
            self._world = world
            for rec, addr in directives:
                rec.address = addr
                rec.state = ExecutorState.ACTIVE
                rec.epoch = epoch
            self._launches.append(
                LaunchRecord(
                    epoch=epoch,
                    world=world,
                    restart=restart,
                    command=tuple(command),
                    hosts=tuple(rec.node_name for rec, _ in directives),
                    running_mono=running_mono,
                )
            )
            if rnd is not None:
                rnd.running_mono = running_mono
                self._rounds.append(rnd)
                self._round = None
            self._transition(
                JobPhase.RUNNING,
                f"relaunch complete: world={world}" if restart else f"initial launch: world={world}",
            )

    def _resolve_address(self, node_name: str) -> tuple[str, int] | None:
        """Poll for the agent's published address file in the working dir."""
        path = Path(self._spec.working_dir) / f"{node_name}.addr"
        deadline = time.perf_counter() + self._address_resolve_timeout
        while time.perf_counter() < deadline:
            try:
                text = path.read_text().strip()
                if text:
                    return wireproto.parse_address(text)
            except (OSError, MalformedBody):
                pass
            time.sleep(0.02)
        return None

    def _wait_locked(self, predicate, deadline_mono: float) -> bool:
        while not predicate():
            if self._stopping or self._phase in TERMINAL_PHASES:
                return predicate()
            remaining = deadline_mono - time.perf_counter()
            if remaining <= 0:
                return predicate()
            self._cond.wait(min(remaining, 0.2))
        return True

    def _transition(self, to: JobPhase, reason: str) -> None:
        frm = self._phase
        if (frm, to) not in LEGAL_TRANSITIONS:
            raise RuntimeError(f"illegal transition {frm.value} -> {to.value} ({reason})")
        self._phase = to
        entry = {
            "seq": len(self._transitions),
            "ts": time.time(),
            "mono": time.perf_counter(),
            "phase_from": frm.value,
            "phase_to": to.value,
            "reason": reason,
            "epoch": self._epoch,
            "world": self._world,
            "registry": [
                rec.snapshot()
                for rec in sorted(self._registry.values(), key=lambda r: r.node_name)
            ],
        }
        self._transitions.append(entry)
        self._append_log_line({"event": "transition", **entry})
        self._cond.notify_all()

    def _fail(self, reason: str) -> None:
        with self._cond:
            self._fail_locked(reason)

    def _fail_locked(self, reason: str) -> None:
        if self._phase in TERMINAL_PHASES:
            return
        self._fail_reason = reason
        self._transition(JobPhase.FAILED, reason)

    def _spawn(self, fn, *args, name: str) -> None:
        thread = threading.Thread(target=fn, args=args, name=name, daemon=True)
        self._workers.append(thread)
        thread.start()

    def _log_event(self, event: str, **fields) -> None:
        self._append_log_line({"event": event, "ts": time.time(), **fields})

    def _append_log_line(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._log_lock:
            with open(self._events_path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")


def start_coordinator(
    spec: JobSpec, listen: tuple[str, int] = ("127.0.0.1", 0), **kwargs
) -> Coordinator:
    """Create a coordinator, bind it, and return the running handle."""
    coord = Coordinator(spec, listen, **kwargs)
    coord.start()
    return coord


class _RpcServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False
    coordinator: Coordinator


class _CoordinatorHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.settimeout(30.0)
        while True:
            try:
                msg = transport.read_frame(sock)
            except (TransportError, OSError):
                return
            except ProtocolError as exc:
                self._reply(sock, wireproto.make_error(0, type(exc).__name__, str(exc)))
                return
            if isinstance(msg, RpcResponse):
                self._reply(sock, wireproto.make_error(msg.id, "ProtocolError", "expected a request"))
                return
            try:
                result = self.server.coordinator.dispatch(msg.method, msg.params)
                reply = wireproto.make_result(msg.id, result)
            except CoordError as exc:
                reply = wireproto.make_error(msg.id, exc.code, exc.message)
            except MalformedBody as exc:
                reply = wireproto.make_error(msg.id, "MalformedBody", str(exc))
            if not self._reply(sock, reply):
                return

    @staticmethod
    def _reply(sock, msg) -> bool:
        try:
            transport.send_frame(sock, msg)
            return True
        except (OSError, ProtocolError):
            return False


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coordinator", description="Serve the control plane for one elastic job."
    )
    parser.add_argument(
        "--listen",
        default=os.environ.get("KUB_COORD_ADDR", "127.0.0.1:7077"),
        help="HOST:PORT to serve on (default: env KUB_COORD_ADDR or 127.0.0.1:7077)",
    )
    parser.add_argument("--spec", required=True, help="path to a JSON job spec")
    parser.add_argument("--provision-timeout", type=float, default=120.0)
    parser.add_argument("--checkpoint-timeout", type=float, default=None)
    parser.add_argument(
        "--linger",
        type=float,
        default=5.0,
        help="seconds to keep serving after the job ends so agents and monitors observe the final phase",
    )
    args = parser.parse_args(argv)

    with open(args.spec, encoding="utf-8") as handle:
        spec = JobSpec.from_dict(json.load(handle))
    try:
        coord = start_coordinator(
            spec,
            transport.parse_host_port(args.listen),
            provision_timeout=args.provision_timeout,
            checkpoint_timeout=args.checkpoint_timeout,
        )
    except BindFailure as exc:
        print(f"coordinator: {exc}", file=sys.stderr)
        return 2
    print(f"coordinator: job {spec.job_name!r} listening on {transport.format_address(coord.address)}")
    try:
        final = coord.wait_for_phase(JobPhase.COMPLETE, JobPhase.FAILED)
    except KeyboardInterrupt:
        coord.stop()
        return 130
    print(f"coordinator: job finished as {final.value}" + (
        f" ({coord.fail_reason})" if coord.fail_reason else ""
    ))
    try:
        time.sleep(max(0.0, args.linger))
    except KeyboardInterrupt:
        pass
    coord.stop()
    return 0 if final is JobPhase.COMPLETE else 1


if __name__ == "__main__":
    sys.exit(main())
