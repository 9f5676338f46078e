"""Executor agent: the supervising process on each worker host.

One agent runs per host.  It registers with the coordinator (JobInit
for initial workers, RetrieveKeys for scale pods), then serves Launch
and Checkpoint directives on its own listen port while heartbeating
activeServer every timestep.  The agent owns at most one workload child
process at a time: it spawns it on Launch, forwards the adapter's
checkpoint signal on Checkpoint, confirms with `checkpointing` once the
child has fully exited, and reports endExec when the child finishes
naturally while the job is Running.

The agent publishes its directive address as ``<job_dir>/<node>.addr``
so the coordinator can find it from the node name alone.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import socketserver
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import transport, wireproto
from .transport import RpcError, TransportError
from .wireproto import AGENT_METHODS, MalformedBody, ProtocolError, RpcResponse

log = logging.getLogger(__name__)

DEFAULT_MAX_MISSED_PROBES = 6
RETRY_INITIAL_S = 0.5
RETRY_CAP_S = 8.0


class AgentError(Exception):
    """Directive-level failure returned to the coordinator as an error."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass
class AgentConfig:
    node_name: str
    coordinator_addr: tuple[str, int]
    agent_listen: tuple[str, int] = ("127.0.0.1", 0)
    heartbeat_timestep: float = 10.0
    job_dir: Path | None = None
    max_missed_probes: int = DEFAULT_MAX_MISSED_PROBES
    retry_initial: float = RETRY_INITIAL_S
    retry_cap: float = RETRY_CAP_S
    rpc_timeout: float = 5.0

    @property
    def is_scale_pod(self) -> bool:
        _, role, _ = wireproto.parse_node_name(self.node_name)
        return role == "scale"


@dataclass(frozen=True)
class LaunchDirective:
    rank: int
    world_size: int
    command: tuple
    restart: bool
    rendezvous_dir: str
    public_token: str
    epoch: int
    job_name: str

    @classmethod
    def from_params(cls, params: dict) -> "LaunchDirective":
        return cls(
            rank=params["rank"],
            world_size=params["world_size"],
            command=tuple(params["command"]),
            restart=params["restart"],
            rendezvous_dir=params["rendezvous_dir"],
            public_token=params["public_token"],
            epoch=params["epoch"],
            job_name=params["job_name"],
        )


def backoff_delays(initial: float = RETRY_INITIAL_S, cap: float = RETRY_CAP_S):
    """Yield retry delays: initial, doubling, clamped at cap."""
    delay = initial
    while True:
        yield delay
        delay = min(delay * 2, cap)


class ExecutorAgent:
    """Runs the registration, heartbeat, and child-supervision duties."""

    def __init__(self, cfg: AgentConfig):
        wireproto.parse_node_name(cfg.node_name)
        if cfg.heartbeat_timestep <= 0:
            raise ValueError("heartbeat_timestep must be positive")
        self._cfg = cfg
        self._job_dir = Path(
            cfg.job_dir if cfg.job_dir is not None else os.environ.get("KUB_JOB_DIR", ".")
        )
        self._lock = threading.Lock()
        self._child: subprocess.Popen | None = None
        self._child_epoch = 0
        self._end_exec_sent = False
        self._expected_token: str | None = None
        self._stopping = False
        self._server: _AgentServer | None = None
        self._server_thread: threading.Thread | None = None

    # -- lifecycle ------------------------------------------------------

    def run(self) -> int:
        """Run until the job ends; returns the agent's exit status."""
        try:
            self._start_directive_server()
        except OSError as exc:
            log.error("%s: cannot bind directive port: %s", self._cfg.node_name, exc)
            return 2
        try:
            self._publish_address()
            code = self._register()
            if code is not None:
                return code
            return self._heartbeat_loop()
        finally:
            self._shutdown()

    def stop(self) -> None:
        with self._lock:
            self._stopping = True

    @property
    def directive_address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("agent not started")
        host, port = self._server.server_address[:2]
        if host in ("0.0.0.0", "::", ""):
            host = "127.0.0.1"
        return host, port

    def _start_directive_server(self) -> None:
        self._server = _AgentServer(self._cfg.agent_listen, _AgentHandler)
        self._server.agent = self
        self._server_thread = threading.Thread(
            target=self._server.serve_forever,
            name=f"{self._cfg.node_name}-directives",
            daemon=True,
        )
        self._server_thread.start()

    def _publish_address(self) -> None:
        path = self._job_dir / f"{self._cfg.node_name}.addr"
        tmp = path.with_suffix(".addr.tmp")
        tmp.write_text(transport.format_address(self.directive_address) + "\n")
        os.replace(tmp, path)

    def _shutdown(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        with self._lock:
            child = self._child
        if child is not None and child.poll() is None:
            child.terminate()
            try:
                child.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                child.kill()
                child.wait()

    # -- registration -----------------------------------------------------

    def _register(self) -> int | None:
        """Announce this agent to the coordinator; None means success."""
        cfg = self._cfg
        delays = backoff_delays(cfg.retry_initial, cfg.retry_cap)
        while True:
            try:
                if cfg.is_scale_pod:
                    result = transport.call(
                        cfg.coordinator_addr,
                        "RetrieveKeys",
                        {
                            "node_name": cfg.node_name,
                            "address": transport.format_address(self.directive_address),
                        },
                        timeout=cfg.rpc_timeout,
                    )
                    self._persist_keys(result)
                    with self._lock:
                        self._expected_token = result["public_token"]
                else:
                    transport.call(
                        cfg.coordinator_addr,
                        "JobInit",
                        {"node_name": cfg.node_name},
                        timeout=cfg.rpc_timeout,
                    )
                return None
            except TransportError as exc:
                # keep retrying until the coordinator answers
                with self._lock:
                    if self._stopping:
                        return 1
                delay = next(delays)
                log.info("%s: registration retry in %.2fs: %s", cfg.node_name, delay, exc)
                time.sleep(delay)
            except RpcError as exc:
                log.error("%s: registration rejected: %s", cfg.node_name, exc)
                return 1

    def _persist_keys(self, bundle: dict) -> None:
        path = self._job_dir / f"{self._cfg.node_name}.keys"
        tmp = path.with_suffix(".keys.tmp")
        tmp.write_text(f"{bundle['public_token']}\n{bundle['private_token']}\n")
        os.replace(tmp, path)

    # -- heartbeat ---------------------------------------------------------

    def _heartbeat_loop(self) -> int:
        cfg = self._cfg
        misses = 0
        while True:
            with self._lock:
                if self._stopping:
                    return 1
            phase = None
            try:
                result = transport.call(
                    cfg.coordinator_addr,
                    "activeServer",
                    {"node_name": cfg.node_name},
                    timeout=cfg.rpc_timeout,
                )
                misses = 0
                phase = result["phase"]
            except TransportError:
                misses += 1
                if misses >= cfg.max_missed_probes:
                    log.error(
                        "%s: coordinator unreachable for %d probes", cfg.node_name, misses
                    )
                    return 1
            except RpcError as exc:
                misses = 0
                log.warning("%s: heartbeat rejected: %s", cfg.node_name, exc)
            if phase == "Complete":
                return 0
            if phase == "Failed":
                return 1
            if phase == "Running":
                code = self._check_child()
                if code is not None:
                    return code
            time.sleep(cfg.heartbeat_timestep)

    def _check_child(self) -> int | None:
        """During Running: report endExec on clean exit, fail on dirty exit."""
        with self._lock:
            child = self._child
            already_sent = self._end_exec_sent
        if child is None:
            return None
        code = child.poll()
        if code is None:
            return None
        if code != 0:
            log.error("%s: workload exited %d", self._cfg.node_name, code)
            return 1
        if already_sent:
            return None
        try:
            result = transport.call(
                self._cfg.coordinator_addr,
                "endExec",
                {"node_name": self._cfg.node_name},
                timeout=self._cfg.rpc_timeout,
            )
        except TransportError:
            return None  # retried next tick
        except RpcError as exc:
            log.warning("%s: endExec rejected: %s", self._cfg.node_name, exc)
            with self._lock:
                self._end_exec_sent = True
            return None
        with self._lock:
            self._end_exec_sent = True
        if result.get("phase") == "Complete":
            return 0
        return None

    # -- directives --------------------------------------------------------

    def handle_directive(self, method: str, params: dict) -> dict:
        if method == "Launch":
            return self._handle_launch(LaunchDirective.from_params(params))
        if method == "Checkpoint":
            return self._handle_checkpoint(params)
        raise AgentError("UnknownMethod", method)

    def _handle_launch(self, directive: LaunchDirective) -> dict:
        with self._lock:
            if self._expected_token is None:
                # first contact pins the job's public token
                self._expected_token = directive.public_token
            elif directive.public_token != self._expected_token:
                raise AgentError("TokenMismatch", "launch directive carries a foreign token")
            if self._child is not None and self._child.poll() is None:
                raise AgentError("ChildStillRunning", "a workload child is still alive")
            env = dict(os.environ)
            env["KUB_RANK"] = str(directive.rank)
            env["KUB_WORLD_SIZE"] = str(directive.world_size)
            env["KUB_JOB_DIR"] = directive.rendezvous_dir
            env["KUB_COORD_ADDR"] = transport.format_address(self._cfg.coordinator_addr)
            try:
                child = subprocess.Popen(
                    list(directive.command), cwd=directive.rendezvous_dir, env=env
                )
            except OSError as exc:
                raise AgentError("SpawnFailure", str(exc)) from exc
            self._child = child
            self._child_epoch = directive.epoch
            self._end_exec_sent = False
        log.info(
            "%s: launched rank %d/%d epoch %d",
            self._cfg.node_name,
            directive.rank,
            directive.world_size,
            directive.epoch,
        )
        return {"accepted": True}

    def _handle_checkpoint(self, params: dict) -> dict:
        signum = getattr(signal, params["signal"], None)
        if not isinstance(signum, signal.Signals):
            raise AgentError("UnknownSignal", params["signal"])
        grace_s = params["grace_ms"] / 1000.0
        worker = threading.Thread(
            target=self._checkpoint_child,
            args=(signum, grace_s),
            name=f"{self._cfg.node_name}-checkpoint",
            daemon=True,
        )
        worker.start()
        return {"accepted": True}

    def _checkpoint_child(self, signum: signal.Signals, grace_s: float) -> None:
        with self._lock:
            child = self._child
        if child is None:
            return
        code = child.poll()
        if code is None:
            try:
                child.send_signal(signum)
            except ProcessLookupError:
                pass
            try:
                code = child.wait(timeout=grace_s if grace_s > 0 else None)
            except subprocess.TimeoutExpired:
                # CheckpointGraceExceeded: the child is killed and no
                # confirmation is sent, so the coordinator times the round out
                child.kill()
                child.wait()
                log.error("%s: checkpoint grace exceeded; child killed", self._cfg.node_name)
                return
        if code != 0:
            log.error("%s: child exited %d during checkpoint", self._cfg.node_name, code)
            return
        for attempt in range(3):
            try:
                transport.call(
                    self._cfg.coordinator_addr,
                    "checkpointing",
                    {"node_name": self._cfg.node_name},
                    timeout=self._cfg.rpc_timeout,
                )
                return
            except TransportError:
                time.sleep(0.2)
            except RpcError as exc:
                log.warning("%s: checkpoint confirm rejected: %s", self._cfg.node_name, exc)
                return


class _AgentServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False
    agent: ExecutorAgent


class _AgentHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.settimeout(30.0)
        while True:
            try:
                msg = transport.read_frame(sock, methods=AGENT_METHODS)
            except (TransportError, OSError):
                return
            except ProtocolError as exc:
                self._reply(sock, wireproto.make_error(0, type(exc).__name__, str(exc)))
                return
            if isinstance(msg, RpcResponse):
                self._reply(sock, wireproto.make_error(msg.id, "ProtocolError", "expected a request"))
                return
            try:
                result = self.server.agent.handle_directive(msg.method, msg.params)
                reply = wireproto.make_result(msg.id, result)
            except AgentError as exc:
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


def run_agent(cfg: AgentConfig) -> int:
    """Construct and run an agent; returns its exit status."""
    try:
        agent = ExecutorAgent(cfg)
    except (MalformedBody, ValueError) as exc:
        log.error("bad agent configuration: %s", exc)
        return 2
    return agent.run()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="agent", description="Executor agent supervising one workload rank."
    )
    parser.add_argument("--name", required=True, help="node name, <job>-worker-<k> or <job>-scale-<k>")
    parser.add_argument(
        "--coordinator",
        default=os.environ.get("KUB_COORD_ADDR"),
        help="coordinator HOST:PORT (default: env KUB_COORD_ADDR)",
    )
    parser.add_argument("--listen", default="127.0.0.1:0", help="directive HOST:PORT to serve on")
    parser.add_argument("--timestep", type=float, default=10.0, help="heartbeat period in seconds")
    parser.add_argument("--job-dir", default=None, help="shared job directory (default: env KUB_JOB_DIR)")
    parser.add_argument("--max-missed", type=int, default=DEFAULT_MAX_MISSED_PROBES)
    args = parser.parse_args(argv)
    if not args.coordinator:
        parser.error("--coordinator is required (or set KUB_COORD_ADDR)")

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    cfg = AgentConfig(
        node_name=args.name,
        coordinator_addr=transport.parse_host_port(args.coordinator),
        agent_listen=transport.parse_host_port(args.listen),
        heartbeat_timestep=args.timestep,
        job_dir=Path(args.job_dir) if args.job_dir else None,
        max_missed_probes=args.max_missed,
    )
    return run_agent(cfg)


if __name__ == "__main__":
    sys.exit(main())
