"""SimDrop, CloudDrop and TransTime from node results and a cloud ledger.

SimDrop is read straight from the node ledgers. CloudDrop is a count
subtraction when the cloud's own ledger is available, otherwise it is derived
by matching echoes against sends. TransTime is measured against the cloud's
receive timestamps when cloud and nodes share a monotonic clock (same host),
otherwise approximated as half the echo round-trip time.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ClockDomainError
from .runtime import NodeResult

REPORT_VERSION = 1
SAME_HOST = "same-host clock"
RTT_HALF = "rtt/2 approximation"
LOW_CONFIDENCE_SIMDROP = 0.01
NET_DROP_NOTE = "not measured; assumed zero on loopback and LAN"


@dataclass(frozen=True)
class TransTimeStats:
    method: str
    count: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float
    low_confidence: bool = False

    @classmethod
    def from_ns(cls, values_ns, method: str, low_confidence: bool = False) -> Optional["TransTimeStats"]:
        if len(values_ns) == 0:
            return None
        ms = np.asarray(values_ns, dtype=np.float64) / 1e6
        return cls(
            method=method,
            count=int(ms.size),
            mean_ms=float(ms.mean()),
            p50_ms=float(np.percentile(ms, 50)),
            p95_ms=float(np.percentile(ms, 95)),
            max_ms=float(ms.max()),
            low_confidence=low_confidence,
        )


@dataclass(frozen=True)
class NodeMetrics:
    node_id: str
    expected_sends: int
    successful_sends: int
    sim_drop: int
    cloud_received: Optional[int] = None
    cloud_drop: Optional[int] = None


@dataclass(frozen=True)
class MetricsReport:
    run_id: str
    label: str
    expected_sends: int
    successful_sends: int
    sim_drop: int
    cloud_received: Optional[int]
    cloud_drop: Optional[int]
    cloud_drop_method: str
    late: int
    trans_time: Optional[TransTimeStats]
    nodes: tuple = ()
    net_drop: str = "assumed_zero"
    net_drop_note: str = NET_DROP_NOTE

    @property
    def sim_drop_ratio(self) -> float:
        return self.sim_drop / self.expected_sends if self.expected_sends else 0.0


def _snapshot(cloud) -> Optional[dict]:
    if cloud is None:
        return None
    if isinstance(cloud, dict):
        return cloud
    return cloud.snapshot(include_records=True)


def _send_times(results: Sequence[NodeResult]) -> dict[int, int]:
    sends = {}
    for r in results:
        for e in r.edges:
            for rec in e.send_log:
                if rec.seq is not None:
                    sends[rec.seq] = rec.t_ns
    return sends


def _window_end(r: NodeResult, offset_ms: int) -> int:
    return r.node_start_ns + (offset_ms + (r.step_count + 1) * r.step_ms) * 1_000_000


def _echo_delivery(results: Sequence[NodeResult]) -> tuple[int, int, list[int]]:
    """Echoes back within the drain window, late echoes, and RTT/2 samples (ns)."""
    delivered = late = 0
    halves = []
    for r in results:
        for e in r.edges:
            if not r.full_logs:
                delivered += e.receives
                continue
            sent = {rec.seq: rec.t_ns for rec in e.send_log if rec.seq is not None}
            end = _window_end(r, e.offset_ms)
            seen = set()
            for rec in e.receive_log:
                if rec.t_ns > end:
                    late += 1
                    continue
                if rec.seq is None:
                    delivered += 1
                elif rec.seq in sent and rec.seq not in seen:
                    seen.add(rec.seq)
                    delivered += 1
                    halves.append((rec.t_ns - sent[rec.seq]) / 2)
    return delivered, late, halves


def compute(node_results: Iterable[NodeResult], cloud=None, label: str = "",
            method: str = "auto") -> MetricsReport:
    """Aggregate one run.

    ``cloud`` is a CloudLedger or its snapshot dict (with records) or None.
    ``method`` selects TransTime measurement: "auto", "same-host" or "rtt".
    """
    results = list(node_results)
    if not results:
        raise ValueError("no node results to aggregate")
    run_ids = {r.run_id for r in results}
    if len(run_ids) != 1:
        raise ValueError(f"node results come from different runs: {sorted(run_ids)}")
    snap = _snapshot(cloud)

    expected = sum(r.expected for r in results)
    successful = sum(r.successful for r in results)
    sim_drop = sum(r.sim_drop for r in results)
    low = expected > 0 and sim_drop / expected > LOW_CONFIDENCE_SIMDROP

    late = 0
    delivered, echo_late, halves = _echo_delivery(results)
    if snap is not None:
        cloud_received = snap["received_count"]
        cloud_drop = successful - cloud_received
        drop_method = "cloud ledger"
    elif any(e.receives for r in results for e in r.edges):
        cloud_received = delivered
        cloud_drop = successful - delivered
        late = echo_late
        drop_method = "echo matching"
    else:
        cloud_received = cloud_drop = None
        drop_method = "unmeasured"

    same_host = snap is not None and "records" in snap and all(r.host == snap.get("host") for r in results)
    if method == "same-host" and not same_host:
        raise ClockDomainError("same-host TransTime needs a cloud ledger recorded on the nodes' host")
    trans = None
    if method in ("auto", "same-host") and same_host:
        sends = _send_times(results)
        samples = [t - sends[seq] for seq, t, *_ in snap["records"] if seq in sends]
        trans = TransTimeStats.from_ns(samples, SAME_HOST, low)
    if trans is None and method in ("auto", "rtt"):
        trans = TransTimeStats.from_ns(halves, RTT_HALF, low)

    per_source = snap.get("per_source", {}) if snap else {}
    nodes = []
    for r in results:
        received = None
        if per_source:
            addrs = {e.local_address for e in r.edges}
            received = sum(n for key, n in per_source.items() if key.rsplit("/", 1)[0] in addrs)
        nodes.append(NodeMetrics(
            r.node_id, r.expected, r.successful, r.sim_drop,
            received, None if received is None else r.successful - received,
        ))
    return MetricsReport(
        run_id=results[0].run_id,
        label=label or results[0].run_id,
        expected_sends=expected,
        successful_sends=successful,
        sim_drop=sim_drop,
        cloud_received=cloud_received,
        cloud_drop=cloud_drop,
        cloud_drop_method=drop_method,
        late=late,
        trans_time=trans,
        nodes=tuple(sorted(nodes, key=lambda n: n.node_id)),
    )


# -- rendering -------------------------------------------------------------------

def _round(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def report_to_dict(report: MetricsReport) -> dict:
    doc = _round(asdict(report))
    doc["report_version"] = REPORT_VERSION
    doc["sim_drop_ratio"] = round(report.sim_drop_ratio, 6)
    return doc


def _fmt_count(n: Optional[int]) -> str:
    return "n/a" if n is None else str(n)


def _fmt_trans(t: Optional[TransTimeStats]) -> str:
    if t is None:
        return "n/a"
    text = f"{t.mean_ms:.3f} (p50 {t.p50_ms:.3f}, p95 {t.p95_ms:.3f}, max {t.max_ms:.3f}; {t.method})"
    return text + " [low confidence]" if t.low_confidence else text


def render(report: Union[MetricsReport, Sequence[MetricsReport]], format: str = "table") -> str:
    """Deterministic text for one report or a list of configurations."""
    reports = [report] if isinstance(report, MetricsReport) else list(report)
    if format == "json":
        docs = [report_to_dict(r) for r in reports]
        body = docs[0] if isinstance(report, MetricsReport) else docs
        return json.dumps(body, sort_keys=True, indent=2) + "\n"
    if format != "table":
        raise ValueError(f"unknown format {format!r}")
    width = max([len("Configuration")] + [len(r.label) for r in reports])
    lines = [f"{'Configuration':<{width}}  {'Metric':<13}  Value"]
    lines.append("-" * (width + 2 + 13 + 2 + 5))
    for r in reports:
        lines.append(f"{r.label:<{width}}  {'SimDrop':<13}  {r.sim_drop}")
        lines.append(f"{'':<{width}}  {'CloudDrop':<13}  {_fmt_count(r.cloud_drop)}")
        lines.append(f"{'':<{width}}  {'TransTime(ms)':<13}  {_fmt_trans(r.trans_time)}")
    return "\n".join(lines) + "\n"
