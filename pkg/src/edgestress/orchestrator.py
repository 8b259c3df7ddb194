"""Launch every simulation node, hold them at a common start barrier, wait out
the run, terminate stragglers, and collect result files.

Nodes run as separate OS processes (native) or containers (Docker). Each node
runner prints ``READY`` once its connections are open, blocks until it reads
``GO <t0_ns>`` on stdin, and prints ``DONE`` after writing its result file.
"""
from __future__ import annotations

import enum
import logging
import os
import queue
import re
import shutil
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import CollectError, LaunchError, NotSupported
from .planner import NodePlan, RunPlan, emit_manifest
from .runtime import NodeResult, load_node_result

log = logging.getLogger(__name__)

DEFAULT_IMAGE = "edgestress-node:latest"
RUN_ID_ENV = "EDGESTRESS_RUN_ID"
RUN_LABEL = "edgestress.run_id"
CONTAINER_MANIFEST = "/edgestress/manifest.json"
CONTAINER_RESULT = "/edgestress/result.json"
KILL_GRACE_S = 5.0


class LaunchState(enum.Enum):
    LAUNCHING = "Launching"
    RUNNING = "Running"
    FINISHED = "Finished"
    KILLED = "Killed"
    FAILED = "Failed"


_RANK = {
    LaunchState.LAUNCHING: 0,
    LaunchState.RUNNING: 1,
    LaunchState.FINISHED: 2,
    LaunchState.KILLED: 2,
    LaunchState.FAILED: 2,
}
TERMINAL = frozenset({LaunchState.FINISHED, LaunchState.KILLED, LaunchState.FAILED})


@dataclass
class LaunchOptions:
    image: str = DEFAULT_IMAGE
    docker: str = "docker"
    full_logs: bool = True
    ready_timeout_s: float = 30.0
    barrier_lead_s: float = 0.2
    kill_grace_s: float = KILL_GRACE_S
    # launch-command templates keyed by platform kind or node id; placeholders
    # {python} {manifest} {node_id} {out} {run_id}
    templates: dict = field(default_factory=dict)


@dataclass
class LaunchHandle:
    node_id: str
    platform_kind: str
    result_path: Path
    run_id: str
    ident: str = ""
    container: Optional[str] = None
    docker: str = "docker"
    state: LaunchState = LaunchState.LAUNCHING
    process: Optional[subprocess.Popen] = field(default=None, repr=False)
    lines: "queue.Queue[Optional[str]]" = field(default_factory=queue.Queue, repr=False)
    t0_ns: Optional[int] = None
    deadline_ns: Optional[int] = None
    limits: Optional[dict] = None
    error: Optional[str] = None
    cleaned: bool = False

    def advance(self, new: LaunchState, error: Optional[str] = None) -> None:
        if self.state in TERMINAL or _RANK[new] <= _RANK[self.state]:
            raise ValueError(f"{self.node_id}: illegal transition {self.state.value} -> {new.value}")
        self.state = new
        if error:
            self.error = error

    def wait_line(self, timeout: float) -> Optional[str]:
        try:
            return self.lines.get(timeout=max(0.0, timeout))
        except queue.Empty:
            return ""


@dataclass(frozen=True)
class NodeGap:
    """Placeholder for a node that produced no usable result."""

    node_id: str
    state: str
    reason: str = ""


def kill_deadline_ms(plan: RunPlan, grace_s: float = KILL_GRACE_S) -> float:
    """Time after the barrier release at which stragglers are killed."""
    return plan.duration_ms + plan.max_offset_ms + 2 * plan.step_ms + grace_s * 1000


def _container_name(run_id: str, node_id: str) -> str:
    return "edgestress-%s-%s" % (run_id, re.sub(r"[^A-Za-z0-9_.-]", "-", node_id))


def _node_command(plan: RunPlan, node: NodePlan, manifest: Path, out: Path,
                  opts: LaunchOptions) -> tuple[list[str], Optional[str]]:
    kind = node.platform.kind
    template = opts.templates.get(node.node_id) or opts.templates.get(kind)
    fields = dict(python=sys.executable, manifest=str(manifest), node_id=node.node_id,
                  out=str(out), run_id=plan.run_id)
    if template:
        return [part.format(**fields) for part in template], None
    if kind == "VM":
        raise NotSupported(f"{node.node_id}: VM platforms cannot be launched by this toolkit")
    node_args = ["--node-id", node.node_id]
    if opts.full_logs:
        node_args.append("--full-logs")
    if kind == "Native":
        cmd = [sys.executable, "-m", "edgestress.runtime", "--manifest", str(manifest),
               "--out", str(out)] + node_args
        return cmd, None
    name = _container_name(plan.run_id, node.node_id)
    cmd = [opts.docker, "run", "-i", "--name", name, "--network", "host",
           "--label", f"{RUN_LABEL}={plan.run_id}", "-e", f"{RUN_ID_ENV}={plan.run_id}"]
    if node.platform.constrained:
        cmd += ["--cpus", str(node.platform.cpu), "--memory", f"{node.platform.memory}g"]
    cmd += ["-v", f"{manifest.resolve()}:{CONTAINER_MANIFEST}:ro", opts.image,
            "edgestress-node", "--manifest", CONTAINER_MANIFEST, "--out", CONTAINER_RESULT] + node_args
    return cmd, name


def docker_available(docker: str = "docker") -> bool:
    if shutil.which(docker) is None:
        return False
    try:
        return subprocess.run([docker, "info"], capture_output=True, timeout=20).returncode == 0
    except (OSError, subprocess.TimeoutExpired):
        return False


def inspect_limits(container: str, docker: str = "docker") -> dict:
    """CPU count and memory bytes the runtime actually applied (0 = unlimited)."""
    out = subprocess.run(
        [docker, "inspect", "--format", "{{.HostConfig.NanoCpus}} {{.HostConfig.Memory}}", container],
        capture_output=True, text=True, timeout=20,
    )
    if out.returncode != 0:
        raise LaunchError(f"docker inspect {container} failed: {out.stderr.strip()}")
    nano, mem = out.stdout.split()
    return {"cpus": int(nano) / 1e9, "memory_bytes": int(mem)}


def run_containers(run_id: str, docker: str = "docker") -> list[str]:
    """Names of containers (running or not) labelled with ``run_id``."""
    if shutil.which(docker) is None:
        return []
    out = subprocess.run(
        [docker, "ps", "-a", "--filter", f"label={RUN_LABEL}={run_id}", "--format", "{{.Names}}"],
        capture_output=True, text=True, timeout=20,
    )
    return [n for n in out.stdout.split() if n]


def _pump(handle: LaunchHandle) -> None:
    for raw in handle.process.stdout:
        handle.lines.put(raw.strip())
    handle.lines.put(None)


def launch_all(plan: RunPlan, workdir, options: Optional[LaunchOptions] = None) -> list[LaunchHandle]:
    """Start every node, wait until all are READY, then release them together.

    If any node fails to launch, every node is torn down before any of them
    receives GO, so no partial load is ever generated.
    """
    opts = options or LaunchOptions()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = workdir / "manifest.json"
    manifest.write_text(emit_manifest(plan), encoding="utf-8")
    kinds = {n.platform.kind for n in plan.nodes if not (opts.templates.get(n.node_id) or opts.templates.get(n.platform.kind))}
    if "VM" in kinds:
        raise NotSupported("VM platforms cannot be launched by this toolkit")
    if "Docker" in kinds and not docker_available(opts.docker):
        raise LaunchError(f"container runtime '{opts.docker}' is not reachable")

    env = dict(os.environ, **{RUN_ID_ENV: plan.run_id})
    handles: list[LaunchHandle] = []
    try:
        for node in plan.nodes:
            out = workdir / f"result-{re.sub(r'[^A-Za-z0-9_.-]', '_', node.node_id)}.json"
            cmd, container = _node_command(plan, node, manifest, out, opts)
            h = LaunchHandle(node.node_id, node.platform.kind, out, plan.run_id,
                             container=container, docker=opts.docker)
            handles.append(h)
            stderr = open(workdir / f"node-{re.sub(r'[^A-Za-z0-9_.-]', '_', node.node_id)}.log", "wb")
            try:
                h.process = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                             stderr=stderr, text=True, bufsize=1, env=env)
            except OSError as exc:
                raise LaunchError(f"{node.node_id}: cannot start {cmd[0]}: {exc}") from exc
            finally:
                stderr.close()
            h.ident = container or str(h.process.pid)
            threading.Thread(target=_pump, args=(h,), daemon=True).start()

        deadline = time.monotonic() + opts.ready_timeout_s
        for h in handles:
            line = h.wait_line(deadline - time.monotonic())
            if line != "READY":
                reason = "timed out before READY" if line == "" else f"reported {line!r}"
                raise LaunchError(f"{h.node_id}: node runner {reason}")
        for h in handles:
            if h.container:
                h.limits = inspect_limits(h.container, h.docker)
    except BaseException as exc:
        abort(handles, str(exc))
        raise

    t0 = time.monotonic_ns() + int(opts.barrier_lead_s * 1e9)
    limit_ns = int(kill_deadline_ms(plan, opts.kill_grace_s) * 1e6)
    for h in handles:
        h.t0_ns = t0
        h.deadline_ns = t0 + limit_ns
        try:
            h.process.stdin.write(f"GO {t0}\n")
            h.process.stdin.flush()
        except OSError as exc:
            h.advance(LaunchState.FAILED, f"lost control channel: {exc}")
            continue
        h.advance(LaunchState.RUNNING)
    return handles


def _kill(h: LaunchHandle) -> None:
    if h.container:
        subprocess.run([h.docker, "kill", h.container], capture_output=True, timeout=30)
    if h.process is not None and h.process.poll() is None:
        h.process.kill()
    if h.process is not None:
        try:
            h.process.wait(timeout=10)
        except subprocess.TimeoutExpired:
            pass


def await_and_terminate(handles: Sequence[LaunchHandle]) -> None:
    """Wait for each node until its kill deadline; kill whatever is still running."""
    for h in handles:
        if h.state is not LaunchState.RUNNING:
            continue
        done = False
        while True:
            line = h.wait_line((h.deadline_ns - time.monotonic_ns()) / 1e9)
            if line == "DONE":
                done = True
            if line is None or line == "" or done:
                break
        if line == "" and not done:
            log.warning("%s: still running at kill deadline, terminating", h.node_id)
            _kill(h)
            h.advance(LaunchState.KILLED, "killed at deadline")
            continue
        try:
            rc = h.process.wait(timeout=max(0.0, (h.deadline_ns - time.monotonic_ns()) / 1e9))
        except subprocess.TimeoutExpired:
            _kill(h)
            h.advance(LaunchState.KILLED, "did not exit after DONE")
            continue
        if done and rc == 0:
            h.advance(LaunchState.FINISHED)
        else:
            h.advance(LaunchState.FAILED, f"node runner exited with status {rc}")


def _remove_container(h: LaunchHandle) -> None:
    if h.container and not h.cleaned:
        subprocess.run([h.docker, "rm", "-f", h.container], capture_output=True, timeout=60)


def collect_and_cleanup(handles: Sequence[LaunchHandle]) -> list:
    """One NodeResult per finished node, a NodeGap for every other node.

    Containers are removed even when collection fails; calling this twice is
    harmless. Missing result files of finished nodes raise CollectError after
    cleanup, carrying the partial list in ``.results``.
    """
    results: list = []
    missing = []
    for h in handles:
        if h.state not in TERMINAL:
            raise ValueError(f"{h.node_id}: handle is {h.state.value}, not terminal")
        if h.state is LaunchState.FINISHED:
            if h.container and not h.cleaned:
                subprocess.run([h.docker, "cp", f"{h.container}:{CONTAINER_RESULT}", str(h.result_path)],
                               capture_output=True, timeout=60)
            try:
                results.append(load_node_result(h.result_path))
            except (OSError, ValueError, KeyError) as exc:
                missing.append(h.node_id)
                results.append(NodeGap(h.node_id, h.state.value, f"result unreadable: {exc}"))
        else:
            results.append(NodeGap(h.node_id, h.state.value, h.error or ""))
        _remove_container(h)
        if h.process is not None and h.process.stdin and not h.process.stdin.closed:
            try:
                h.process.stdin.close()
            except OSError:
                pass
        h.cleaned = True
    if missing:
        err = CollectError(f"missing result files for: {', '.join(missing)}")
        err.results = results
        raise err
    return results


def abort(handles: Sequence[LaunchHandle], reason: str = "aborted") -> None:
    """Kill and remove every node; used on launch failure or operator interrupt."""
    for h in handles:
        if h.state not in TERMINAL:
            _kill(h)
            h.advance(LaunchState.FAILED if h.state is LaunchState.LAUNCHING else LaunchState.KILLED, reason)
        _remove_container(h)
        h.cleaned = True


def run_plan(plan: RunPlan, workdir, options: Optional[LaunchOptions] = None):
    """Launch, wait, collect; returns ``(results, handles)``."""
    handles: list[LaunchHandle] = []
    try:
        handles = launch_all(plan, workdir, options)
        await_and_terminate(handles)
    except BaseException:
        abort(handles, "interrupted")
        raise
    try:
        return collect_and_cleanup(handles), handles
    except CollectError as exc:
        return exc.results, handles


def node_results(results) -> list[NodeResult]:
    return [r for r in results if isinstance(r, NodeResult)]
