"""Turn a validated specification into an executable, seeded run plan.

The plan plays the role of a generated simulator: instance counts are
expanded, every edge device gets its start offset, pacing gaps are fixed as
exact fractions, and the whole thing serializes to a JSON manifest that the
node runner executes.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Optional, Union

import numpy as np

from .dsl.ast import MAX, PlatformDecl, SpecAst
from .dsl.printer import format_spec
from .errors import ManifestError, ResolveError

MANIFEST_VERSION = 1
MQTT_DEFAULT_PORT = 1883
SEQ_COUNTER_BITS = 40


@dataclass(frozen=True)
class CloudEndpoint:
    id: str
    ip: str
    port: int
    pub_topic: Optional[str] = None
    sub_topic: Optional[str] = None
    record_dst: Optional[str] = None

    @property
    def is_mqtt(self) -> bool:
        return self.pub_topic is not None


@dataclass(frozen=True)
class DeviceSpec:
    """One symbolic IoT device inside an edge device's send loop."""

    type_id: str
    period: int
    payload_bytes: int
    payload_literal: Optional[str] = None


@dataclass(frozen=True)
class EdgeDeviceInstance:
    edge_id: str
    type_id: str
    ordinal: int
    protocol: str
    speed: Union[int, str]
    gap_ms: Fraction
    offset_ms: int
    workload_ms: int
    cloud_id: str
    devices: tuple[DeviceSpec, ...]

    @property
    def unpaced(self) -> bool:
        return self.speed == MAX


@dataclass(frozen=True)
class NodePlan:
    node_id: str
    type_id: str
    platform: PlatformDecl
    offset_range_ms: int
    edges: tuple[EdgeDeviceInstance, ...]


@dataclass(frozen=True)
class RunPlan:
    run_id: str
    seed: int
    duration_ms: int
    step_ms: int
    step_count: int
    clouds: tuple[CloudEndpoint, ...]
    nodes: tuple[NodePlan, ...]

    def cloud(self, cloud_id: str) -> CloudEndpoint:
        for c in self.clouds:
            if c.id == cloud_id:
                return c
        raise KeyError(cloud_id)

    def node(self, node_id: str) -> NodePlan:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def edges(self):
        for n in self.nodes:
            yield from n.edges

    @property
    def max_offset_ms(self) -> int:
        return max((e.offset_ms for e in self.edges()), default=0)


def default_seed() -> int:
    return time.time_ns() & (2**64 - 1)


def offset_rng(seed: int, node_id: str, edge_index: int) -> np.random.Generator:
    """PCG64 stream keyed by (seed, node, edge); independent of draw order."""
    node_key = int.from_bytes(node_id.encode("utf-8"), "big")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, node_key, edge_index])))


def draw_offset(seed: int, node_id: str, edge_index: int, offset_range_ms: int) -> int:
    return int(offset_rng(seed, node_id, edge_index).integers(0, offset_range_ms, endpoint=True))


def _parse_override(value: str) -> tuple[str, Optional[int]]:
    host, sep, port = value.rpartition(":")
    if not sep:
        return value, None
    return host, int(port)


def resolve(
    ast: SpecAst,
    seed: int,
    endpoints: Optional[Mapping[str, str]] = None,
) -> RunPlan:
    """Expand ``ast`` into a :class:`RunPlan`.

    ``endpoints`` optionally redirects clouds, ``{"C1": "127.0.0.1:9000"}``;
    the DSL cannot express a broker port, so MQTT clouds default to 1883.
    """
    if not 0 <= seed < 2**64:
        raise ResolveError(f"seed {seed} is not a 64-bit unsigned integer")
    endpoints = dict(endpoints or {})
    sim = ast.simulator
    duration_ms, step_ms = sim.duration.ms, sim.step.ms
    if step_ms <= 0 or duration_ms <= 0 or duration_ms % step_ms:
        raise ResolveError(f"step {sim.step} must evenly divide duration {sim.duration}")

    def lookup(decls, name, what):
        for d in decls:
            if d.id == name:
                return d
        raise ResolveError(f"undeclared {what} '{name}'")

    unknown = set(endpoints) - {c.id for c in ast.clouds}
    if unknown:
        raise ResolveError(f"endpoint override for unknown cloud(s): {sorted(unknown)}")
    clouds = []
    for c in ast.clouds:
        ip = c.ip
        port = c.port if c.port is not None else MQTT_DEFAULT_PORT
        if c.id in endpoints:
            host, p = _parse_override(endpoints[c.id])
            ip = host or ip
            port = p if p is not None else port
        clouds.append(CloudEndpoint(c.id, ip, port, c.pub_topic, c.sub_topic, c.record_dst))

    nodes = []
    ordinal = 0
    for nref in sim.node_refs:
        ndecl = lookup(ast.sim_nodes, nref.id, "simulation node")
        platform = replace(lookup(ast.platforms, ndecl.platform_ref.id, "platform"))
        offset_range_ms = ndecl.offset_range_pct * step_ms // 100
        for k in range(nref.count):
            node_id = f"{ndecl.id}#{k}"
            edges = []
            index = 0
            for eref in ndecl.edge_refs:
                edecl = lookup(ast.edge_devices, eref.id, "edge device")
                lookup(ast.clouds, edecl.cloud_ref.id, "cloud")
                devices = []
                for dref in edecl.device_refs:
                    ddecl = lookup(ast.devices, dref.id, "device")
                    p = ddecl.payload
                    spec = DeviceSpec(ddecl.id, ddecl.period, p.nbytes, p.literal)
                    devices.extend([spec] * dref.count)
                speed = edecl.speed
                gap = Fraction(0) if speed == MAX else Fraction(step_ms, speed)
                for m in range(eref.count):
                    edges.append(
                        EdgeDeviceInstance(
                            edge_id=f"{node_id}/{edecl.id}#{m}",
                            type_id=edecl.id,
                            ordinal=ordinal,
                            protocol=edecl.protocol,
                            speed=speed,
                            gap_ms=gap,
                            offset_ms=draw_offset(seed, node_id, index, offset_range_ms),
                            workload_ms=edecl.workload.ms if edecl.workload else 0,
                            cloud_id=edecl.cloud_ref.id,
                            devices=tuple(devices),
                        )
                    )
                    ordinal += 1
                    index += 1
            nodes.append(NodePlan(node_id, ndecl.id, platform, offset_range_ms, tuple(edges)))
    if not nodes:
        raise ResolveError("plan has no simulation nodes")
    if ordinal >= 2 ** (64 - SEQ_COUNTER_BITS):
        raise ResolveError("too many edge devices for the sequence-number layout")

    digest = hashlib.sha256()
    digest.update(format_spec(ast).encode("utf-8"))
    digest.update(f"|{seed}|{sorted(endpoints.items())}".encode("utf-8"))
    return RunPlan(
        run_id="run-" + digest.hexdigest()[:12],
        seed=seed,
        duration_ms=duration_ms,
        step_ms=step_ms,
        step_count=duration_ms // step_ms,
        clouds=tuple(clouds),
        nodes=tuple(nodes),
    )


def sends_for_period(step_count: int, period: int) -> int:
    """Number of i in [0, step_count) with i % period == 0."""
    return 0 if step_count <= 0 else (step_count - 1) // period + 1


def edge_expected_sends(edge: EdgeDeviceInstance, step_count: int) -> int:
    return sum(sends_for_period(step_count, d.period) for d in edge.devices)


def expected_sends(plan: RunPlan) -> dict[str, int]:
    """Unconstrained send count per edge, ignoring the step-budget break."""
    return {e.edge_id: edge_expected_sends(e, plan.step_count) for e in plan.edges()}


# -- manifest ----------------------------------------------------------------

def _device_runs(devices):
    runs = []
    for d in devices:
        if runs and runs[-1][0] == d:
            runs[-1][1] += 1
        else:
            runs.append([d, 1])
    return [
        {
            "type": d.type_id,
            "period": d.period,
            "payload_bytes": d.payload_bytes,
            "payload_literal": d.payload_literal,
            "count": n,
        }
        for d, n in runs
    ]


def plan_to_dict(plan: RunPlan) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "run_id": plan.run_id,
        "seed": plan.seed,
        "duration_ms": plan.duration_ms,
        "step_ms": plan.step_ms,
        "step_count": plan.step_count,
        "clouds": [
            {
                "id": c.id,
                "ip": c.ip,
                "port": c.port,
                "pub_topic": c.pub_topic,
                "sub_topic": c.sub_topic,
                "record_dst": c.record_dst,
            }
            for c in plan.clouds
        ],
        "nodes": [
            {
                "node_id": n.node_id,
                "type": n.type_id,
                "platform": {
                    "id": n.platform.id,
                    "kind": n.platform.kind,
                    "ip": n.platform.ip,
                    "username": n.platform.username,
                    "cpu": n.platform.cpu,
                    "memory_gib": n.platform.memory,
                },
                "offset_range_ms": n.offset_range_ms,
                "edges": [
                    {
                        "edge_id": e.edge_id,
                        "type": e.type_id,
                        "ordinal": e.ordinal,
                        "protocol": e.protocol,
                        "speed": e.speed,
                        "gap_ms": str(e.gap_ms),
                        "offset_ms": e.offset_ms,
                        "workload_ms": e.workload_ms,
                        "cloud": e.cloud_id,
                        "devices": _device_runs(e.devices),
                    }
                    for e in n.edges
                ],
            }
            for n in plan.nodes
        ],
    }


def emit_manifest(plan: RunPlan) -> str:
    return json.dumps(plan_to_dict(plan), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def plan_from_dict(doc: dict) -> RunPlan:
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest_version {doc.get('manifest_version')!r}")
    try:
        clouds = tuple(
            CloudEndpoint(c["id"], c["ip"], c["port"], c["pub_topic"], c["sub_topic"], c["record_dst"])
            for c in doc["clouds"]
        )
        nodes = []
        for n in doc["nodes"]:
            p = n["platform"]
            platform = PlatformDecl(p["id"], p["kind"], p["ip"], p["username"], p["cpu"], p["memory_gib"])
            edges = []
            for e in n["edges"]:
                devices = []
                for d in e["devices"]:
                    spec = DeviceSpec(d["type"], d["period"], d["payload_bytes"], d["payload_literal"])
                    devices.extend([spec] * d["count"])
                edges.append(
                    EdgeDeviceInstance(
                        edge_id=e["edge_id"],
                        type_id=e["type"],
                        ordinal=e["ordinal"],
                        protocol=e["protocol"],
                        speed=e["speed"],
                        gap_ms=Fraction(e["gap_ms"]),
                        offset_ms=e["offset_ms"],
                        workload_ms=e["workload_ms"],
                        cloud_id=e["cloud"],
                        devices=tuple(devices),
                    )
                )
            nodes.append(NodePlan(n["node_id"], n["type"], platform, n["offset_range_ms"], tuple(edges)))
        return RunPlan(
            run_id=doc["run_id"],
            seed=doc["seed"],
            duration_ms=doc["duration_ms"],
            step_ms=doc["step_ms"],
            step_count=doc["step_count"],
            clouds=clouds,
            nodes=tuple(nodes),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc


def load_manifest(text: str) -> RunPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    return plan_from_dict(doc)
