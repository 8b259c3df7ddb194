"""Execute one simulation node: every edge device runs its send, receive and
compute processes concurrently.

Timing follows the edge-device loop exactly: sleep for the offset, then for
each step walk the devices in declared order, send those whose period divides
the step index, pause ``step/speed`` after each send, and abandon the step once
a full step has elapsed. Devices skipped by that break are counted as
simulator-side drops, so ``expected == successful + sim_drop`` always holds.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import threading
import time
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple, Optional

from .errors import ConnectError, NodeError, ReceiveError, SendError
from .planner import (
    SEQ_COUNTER_BITS,
    EdgeDeviceInstance,
    NodePlan,
    RunPlan,
    edge_expected_sends,
    load_manifest,
)
from .testcloud import host_id
from .transport import Endpoint, PayloadFactory, connect

log = logging.getLogger(__name__)

RESULT_VERSION = 1
NS_PER_MS = 1_000_000
# spinning is only worth it for residuals shorter than the sleep overshoot
SPIN_BELOW_NS = 50_000
RECEIVE_POLL_NS = 50 * NS_PER_MS
# pacing may shorten one gap by at most this much to repay timer overshoot
MAX_REPAY_NS = NS_PER_MS // 2
# overshoot older than this many gaps is forgiven rather than repaid
MAX_DEBT_GAPS = 10
DRAIN_POLICY = "receive continues for one extra step after the last send step"


class PacketRecord(NamedTuple):
    seq: Optional[int]
    step_index: int
    device_index: int
    t_ns: int


class ReceiveRecord(NamedTuple):
    seq: Optional[int]
    t_ns: int


class MonotonicClock:
    """Host monotonic clock; shared across processes on one kernel."""

    def now(self) -> int:
        return time.monotonic_ns()

    def sleep_until(self, deadline_ns: int) -> None:
        remaining = deadline_ns - time.monotonic_ns()
        if remaining >= SPIN_BELOW_NS:
            time.sleep(remaining / 1e9)
            return
        # tiny residual: bounded spin that still yields the interpreter
        while remaining > 0:
            time.sleep(0)
            remaining = deadline_ns - time.monotonic_ns()

    def sleep(self, duration_ns: int) -> None:
        if duration_ns > 0:
            self.sleep_until(time.monotonic_ns() + duration_ns)


class GapSchedule:
    """Integer-nanosecond gaps whose running sum tracks ``k * gap`` exactly."""

    def __init__(self, gap_ms: Fraction):
        self.gap_ns = Fraction(gap_ms) * NS_PER_MS
        self.k = 0
        self.emitted = 0

    def next(self) -> int:
        self.k += 1
        target = int(self.k * self.gap_ns)  # floor for non-negative fractions
        step = target - self.emitted
        self.emitted = target
        return step


# -- busy work -----------------------------------------------------------------

def _fma_kernel(n: int, acc: float = 1.0) -> float:
    for _ in range(n):
        acc = acc * 1.0000001 + 1e-7
    return acc


_calibration_lock = threading.Lock()
_iters_per_ms: Optional[float] = None


def calibrate(sample_ms: float = 20.0) -> float:
    """Kernel iterations per millisecond of CPU time on this host (cached)."""
    global _iters_per_ms
    with _calibration_lock:
        if _iters_per_ms is None:
            n = 10_000
            while True:
                t = time.thread_time_ns()
                _fma_kernel(n)
                spent = time.thread_time_ns() - t
                if spent >= sample_ms * NS_PER_MS / 4:
                    break
                n *= 2
            # take the best of a few samples; interference only slows us down
            best = spent
            for _ in range(3):
                t = time.thread_time_ns()
                _fma_kernel(n)
                best = min(best, time.thread_time_ns() - t)
            _iters_per_ms = n * NS_PER_MS / max(best, 1)
        return _iters_per_ms


def busy_work(workload_ms: float, chunk_ms: float = 0.1) -> int:
    """Burn ``workload_ms`` of this thread's CPU time with floating-point multiply-adds.

    Work proceeds in calibrated chunks until the thread CPU clock reaches the
    target, so host speed variations change the iteration count, not the
    CPU time. Returns the CPU ns actually used.
    """
    target = int(workload_ms * NS_PER_MS)
    chunk = max(1, int(chunk_ms * calibrate()))
    t = time.thread_time_ns()
    acc = 1.0
    while time.thread_time_ns() - t < target:
        acc = _fma_kernel(chunk, acc)
    return time.thread_time_ns() - t


# -- edge devices ----------------------------------------------------------------

@dataclass
class EdgeDeviceState:
    instance: EdgeDeviceInstance
    connection: object
    expected: int = 0
    attempted_sends: int = 0
    successful_sends: int = 0
    sim_drop: int = 0
    send_errors: int = 0
    receives: int = 0
    send_log: list = field(default_factory=list)
    receive_log: list = field(default_factory=list)
    compute_cpu_ns: list = field(default_factory=list)
    error: Optional[str] = None


@dataclass(frozen=True)
class EdgeResult:
    edge_id: str
    ordinal: int
    protocol: str
    offset_ms: int
    local_address: str
    expected: int
    attempted: int
    successful: int
    sim_drop: int
    send_errors: int
    receives: int
    send_log: tuple = ()
    receive_log: tuple = ()
    compute_cpu_ns: tuple = ()
    error: Optional[str] = None


@dataclass(frozen=True)
class NodeResult:
    run_id: str
    node_id: str
    host: str
    node_start_ns: int
    finished_ns: int
    step_ms: int
    step_count: int
    edges: tuple[EdgeResult, ...]
    full_logs: bool = True
    drain_policy: str = DRAIN_POLICY

    @property
    def expected(self) -> int:
        return sum(e.expected for e in self.edges)

    @property
    def successful(self) -> int:
        return sum(e.successful for e in self.edges)

    @property
    def sim_drop(self) -> int:
        return sum(e.sim_drop for e in self.edges)


def _endpoint(plan: RunPlan, edge: EdgeDeviceInstance) -> Endpoint:
    cloud = plan.cloud(edge.cloud_id)
    if edge.protocol == "MQTT":
        return Endpoint("MQTT", cloud.ip, cloud.port, cloud.pub_topic, cloud.sub_topic)
    return Endpoint(edge.protocol, cloud.ip, cloud.port)


class _EdgeRunner:
    def __init__(self, state: EdgeDeviceState, step_ms: int, step_count: int, seed: int, clock):
        self.state = state
        self.step_ns = step_ms * NS_PER_MS
        self.step_count = step_count
        self.clock = clock
        inst = state.instance
        factories: dict = {}
        self.payloads = []
        for d in inst.devices:
            if d not in factories:
                factories[d] = PayloadFactory(d.payload_bytes, d.payload_literal, seed ^ inst.ordinal ^ zlib.crc32(d.type_id.encode()) & 0xFFFF)
            self.payloads.append(factories[d])
        self.periods = [d.period for d in inst.devices]
        self.send_done = threading.Event()
        self.receive_until_ns: Optional[int] = None

    def send_process(self, t0: int) -> None:
        st, inst, clock = self.state, self.state.instance, self.clock
        conn = st.connection
        base = t0 + inst.offset_ms * NS_PER_MS
        seq_base = inst.ordinal << SEQ_COUNTER_BITS
        counter = 0
        paced = not inst.unpaced
        periods, payloads = self.periods, self.payloads
        n = len(periods)
        try:
            clock.sleep_until(base)
            for i in range(self.step_count):
                start = base + i * self.step_ns
                clock.sleep_until(start)
                gaps = GapSchedule(inst.gap_ms) if paced else None
                debt = 0
                for j in range(n):
                    if i % periods[j] == 0:
                        seq = seq_base | counter
                        counter += 1
                        st.attempted_sends += 1
                        factory = payloads[j]
                        try:
                            receipt = conn.send_bytes(factory.encode(seq), seq)
                        except SendError as exc:
                            st.sim_drop += 1
                            st.send_errors += 1
                            if st.send_errors == 1:
                                log.warning("%s: send failed: %s", inst.edge_id, exc)
                        else:
                            st.successful_sends += 1
                            st.send_log.append(
                                PacketRecord(seq if factory.tracked else None, i, j, receipt.t_send_ns)
                            )
                        if paced:
                            debt = self._pace(gaps.next(), debt)
                    if clock.now() - start >= self.step_ns:
                        st.sim_drop += sum(1 for p in periods[j + 1 :] if i % p == 0)
                        break
        except Exception as exc:  # isolate this edge from its siblings
            st.error = f"{type(exc).__name__}: {exc}"
            log.exception("%s: send process crashed", inst.edge_id)
        finally:
            # anything not yet accounted for counts as dropped
            st.sim_drop += st.expected - st.successful_sends - st.sim_drop
            self.receive_until_ns = clock.now() + self.step_ns
            self.send_done.set()

    def _pace(self, want: int, debt: int) -> int:
        """Sleep ``want`` ns after a send, paying back earlier timer overshoot.

        At most half a gap, and never more than MAX_REPAY_NS, is repaid per
        sleep so a long stall never turns into a burst. Returns the overshoot
        still owed.
        """
        clock = self.clock
        t = clock.now()
        clock.sleep(want - min(debt, want // 2, MAX_REPAY_NS))
        debt += clock.now() - t - want
        return min(max(debt, 0), MAX_DEBT_GAPS * want)

    def receive_process(self) -> None:
        st, clock = self.state, self.clock
        conn = st.connection
        try:
            while True:
                now = clock.now()
                until = self.receive_until_ns
                if until is not None and now >= until:
                    return
                deadline = now + RECEIVE_POLL_NS
                if until is not None:
                    deadline = min(deadline, until)
                inbound = conn.receive(deadline)
                if inbound is not None:
                    st.receives += 1
                    st.receive_log.append(ReceiveRecord(inbound.seq, inbound.t_recv_ns))
        except ReceiveError as exc:
            if not self.send_done.is_set():
                log.warning("%s: receive stopped: %s", st.instance.edge_id, exc)
        except Exception as exc:
            st.error = st.error or f"{type(exc).__name__}: {exc}"
            log.exception("%s: receive process crashed", st.instance.edge_id)

    def compute_process(self, t0: int) -> None:
        st, inst, clock = self.state, self.state.instance, self.clock
        base = t0 + inst.offset_ms * NS_PER_MS
        try:
            for i in range(self.step_count):
                if self.send_done.is_set():
                    return
                clock.sleep_until(base + i * self.step_ns)
                st.compute_cpu_ns.append(busy_work(inst.workload_ms))
        except Exception as exc:
            st.error = st.error or f"{type(exc).__name__}: {exc}"
            log.exception("%s: compute process crashed", inst.edge_id)


def run_edge_device(state: EdgeDeviceState, step_ms: int, step_count: int,
                    clock=None, t0: Optional[int] = None, seed: int = 0) -> EdgeDeviceState:
    """Run one edge device to completion in the calling thread's context."""
    clock = clock or MonotonicClock()
    if not state.expected:
        state.expected = edge_expected_sends(state.instance, step_count)
    runner = _EdgeRunner(state, step_ms, step_count, seed, clock)
    t0 = clock.now() if t0 is None else t0
    threads = _start_processes(runner, t0)
    runner.send_process(t0)
    for t in threads:
        t.join()
    return state


def _start_processes(runner: _EdgeRunner, t0: int) -> list[threading.Thread]:
    threads = []
    if getattr(runner.state.connection, "receives_enabled", True):
        threads.append(threading.Thread(target=runner.receive_process, daemon=True,
                                        name=f"recv-{runner.state.instance.edge_id}"))
    if runner.state.instance.workload_ms > 0:
        threads.append(threading.Thread(target=runner.compute_process, args=(t0,), daemon=True,
                                        name=f"compute-{runner.state.instance.edge_id}"))
    for t in threads:
        t.start()
    return threads


def open_connections(plan: RunPlan, node: NodePlan, connect_fn=connect) -> list[EdgeDeviceState]:
    """Connect every edge before step 0; any failure aborts the whole node."""
    states = []
    try:
        for edge in node.edges:
            try:
                conn = connect_fn(_endpoint(plan, edge))
            except ConnectError as exc:
                raise NodeError(f"{edge.edge_id}: {exc}") from exc
            states.append(
                EdgeDeviceState(edge, conn, expected=edge_expected_sends(edge, plan.step_count))
            )
    except BaseException:
        for s in states:
            s.connection.close()
        raise
    return states


def run_node(plan: RunPlan, node: NodePlan, clock=None, connect_fn=connect,
             barrier: Optional[Callable[[], int]] = None,
             states: Optional[list[EdgeDeviceState]] = None) -> NodeResult:
    """Run all edge devices of ``node`` in parallel and gather their ledgers.

    ``barrier`` is called after every connection is open and must return the
    common start instant (monotonic ns); by default the node starts at once.
    """
    clock = clock or MonotonicClock()
    if states is None:
        states = open_connections(plan, node, connect_fn)
    if any(s.instance.workload_ms > 0 for s in states):
        calibrate()
        sys.setswitchinterval(0.0005)
    runners = [_EdgeRunner(s, plan.step_ms, plan.step_count, plan.seed, clock) for s in states]
    try:
        t0 = barrier() if barrier is not None else clock.now()
        threads = []
        for r in runners:
            threads.extend(_start_processes(r, t0))
            sender = threading.Thread(target=r.send_process, args=(t0,), daemon=True,
                                      name=f"send-{r.state.instance.edge_id}")
            sender.start()
            threads.append(sender)
        for t in threads:
            t.join()
    finally:
        for s in states:
            s.connection.close()
    return NodeResult(
        run_id=plan.run_id,
        node_id=node.node_id,
        host=host_id(),
        node_start_ns=t0,
        finished_ns=clock.now(),
        step_ms=plan.step_ms,
        step_count=plan.step_count,
        edges=tuple(_edge_result(s) for s in states),
    )


def _edge_result(s: EdgeDeviceState) -> EdgeResult:
    inst = s.instance
    return EdgeResult(
        edge_id=inst.edge_id,
        ordinal=inst.ordinal,
        protocol=inst.protocol,
        offset_ms=inst.offset_ms,
        local_address=getattr(s.connection, "local_address", ""),
        expected=s.expected,
        attempted=s.attempted_sends,
        successful=s.successful_sends,
        sim_drop=s.sim_drop,
        send_errors=s.send_errors,
        receives=s.receives,
        send_log=tuple(s.send_log),
        receive_log=tuple(s.receive_log),
        compute_cpu_ns=tuple(s.compute_cpu_ns),
        error=s.error,
    )


# -- result files ----------------------------------------------------------------

def result_to_dict(result: NodeResult, full_logs: bool = True) -> dict:
    edges = []
    for e in result.edges:
        doc = {
            "edge_id": e.edge_id,
            "ordinal": e.ordinal,
            "protocol": e.protocol,
            "offset_ms": e.offset_ms,
            "local_address": e.local_address,
            "expected": e.expected,
            "attempted": e.attempted,
            "successful": e.successful,
            "sim_drop": e.sim_drop,
            "send_errors": e.send_errors,
            "receives": e.receives,
            "compute_cpu_ns": list(e.compute_cpu_ns),
            "error": e.error,
        }
        if full_logs:
            doc["send_log"] = [list(r) for r in e.send_log]
            doc["receive_log"] = [list(r) for r in e.receive_log]
        edges.append(doc)
    return {
        "result_version": RESULT_VERSION,
        "run_id": result.run_id,
        "node_id": result.node_id,
        "host": result.host,
        "node_start_ns": result.node_start_ns,
        "finished_ns": result.finished_ns,
        "step_ms": result.step_ms,
        "step_count": result.step_count,
        "full_logs": full_logs and result.full_logs,
        "drain_policy": result.drain_policy,
        "edges": edges,
    }


def result_from_dict(doc: dict) -> NodeResult:
    if doc.get("result_version") != RESULT_VERSION:
        raise ValueError(f"unsupported result_version {doc.get('result_version')!r}")
    edges = tuple(
        EdgeResult(
            edge_id=e["edge_id"],
            ordinal=e["ordinal"],
            protocol=e["protocol"],
            offset_ms=e["offset_ms"],
            local_address=e["local_address"],
            expected=e["expected"],
            attempted=e["attempted"],
            successful=e["successful"],
            sim_drop=e["sim_drop"],
            send_errors=e["send_errors"],
            receives=e["receives"],
            send_log=tuple(PacketRecord(*r) for r in e.get("send_log", ())),
            receive_log=tuple(ReceiveRecord(*r) for r in e.get("receive_log", ())),
            compute_cpu_ns=tuple(e.get("compute_cpu_ns", ())),
            error=e.get("error"),
        )
        for e in doc["edges"]
    )
    return NodeResult(
        run_id=doc["run_id"],
        node_id=doc["node_id"],
        host=doc["host"],
        node_start_ns=doc["node_start_ns"],
        finished_ns=doc["finished_ns"],
        step_ms=doc["step_ms"],
        step_count=doc["step_count"],
        edges=edges,
        full_logs=doc["full_logs"],
        drain_policy=doc["drain_policy"],
    )


def write_node_result(result: NodeResult, path, full_logs: bool = True) -> None:
    """Atomically write ``result`` as JSON (temp file in the same directory, then rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".result-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(result_to_dict(result, full_logs), fh, separators=(",", ":"))
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def load_node_result(path) -> NodeResult:
    with open(path, encoding="utf-8") as fh:
        return result_from_dict(json.load(fh))


# -- node runner executable ----------------------------------------------------

def _control_barrier(stdin, clock) -> Callable[[], int]:
    def wait() -> int:
        line = stdin.readline()
        if not line:
            raise NodeError("control input closed before GO")
        parts = line.split()
        if not parts or parts[0] != "GO":
            raise NodeError(f"unexpected control line {line.strip()!r}")
        return int(parts[1]) if len(parts) > 1 else clock.now()
    return wait


def node_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="edgestress-node", description="Run one simulation node of a manifest.")
    parser.add_argument("--manifest", required=True, help="manifest JSON written by `edgestress plan`")
    parser.add_argument("--node-id", required=True, help="node to run, e.g. SN1#0")
    parser.add_argument("--out", required=True, help="result file to write")
    parser.add_argument("--full-logs", action="store_true", help="include per-packet send/receive logs")
    parser.add_argument("--no-barrier", action="store_true", help="start immediately instead of waiting for GO")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(name)s: %(message)s")

    def say(word: str) -> None:
        sys.stdout.write(word + "\n")
        sys.stdout.flush()

    try:
        with open(args.manifest, encoding="utf-8") as fh:
            plan = load_manifest(fh.read())
        node = plan.node(args.node_id)
        states = open_connections(plan, node)
    except (OSError, KeyError, NodeError, ValueError) as exc:
        print(f"edgestress-node: {exc}", file=sys.stderr)
        say("FAILED")
        return 3
    clock = MonotonicClock()
    say("READY")
    barrier = None if args.no_barrier else _control_barrier(sys.stdin, clock)
    try:
        result = run_node(plan, node, clock=clock, barrier=barrier, states=states)
    except NodeError as exc:
        print(f"edgestress-node: {exc}", file=sys.stderr)
        return 4
    write_node_result(result, args.out, full_logs=args.full_logs)
    say("DONE")
    return 0


if __name__ == "__main__":
    sys.exit(node_main())
