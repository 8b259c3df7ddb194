"""Static sanity checks over a parsed specification.

Four check groups (declaration/usage, reference kinds, protocol/cloud
compatibility, time step) plus value-range and style checks. Each returns a
list of :class:`Diagnostic`; nothing here raises on a bad spec.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from fractions import Fraction

from .dsl.ast import MAX, NOWHERE, Span, SpecAst

E_UNDECL = "E-UNDECL"
E_TYPE = "E-TYPE"
E_PROTO = "E-PROTO"
E_STEP = "E-STEP"
E_RANGE = "E-RANGE"
E_DUP = "E-DUP"
W_UNUSED = "W-UNUSED"
W_TIGHT = "W-TIGHT"
W_STYLE = "W-STYLE"

CODES = frozenset({E_UNDECL, E_TYPE, E_PROTO, E_STEP, E_RANGE, E_DUP, W_UNUSED, W_TIGHT, W_STYLE})

# reference slot -> declaration kind it must name
KIND_NAMES = {
    "cloud": "Cloud",
    "node": "SimulationNode",
    "platform": "Platform",
    "edge": "EdgeDevice",
    "device": "Device",
}


class Severity(enum.Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    code: str
    message: str
    span: Span = NOWHERE

    def __post_init__(self):
        if self.code not in CODES:
            raise ValueError(f"unknown diagnostic code {self.code}")

    @property
    def is_error(self) -> bool:
        return self.severity is Severity.ERROR

    def format(self, filename: str = "<spec>") -> str:
        return (
            f"{filename}:{self.span.line}:{self.span.column}: "
            f"{self.severity.value}: [{self.code}] {self.message}"
        )


def _error(code, message, span):
    return Diagnostic(Severity.ERROR, code, message, span)


def _warning(code, message, span):
    return Diagnostic(Severity.WARNING, code, message, span)


def _symbols(ast: SpecAst) -> dict[str, list[tuple[str, object]]]:
    table: dict[str, list[tuple[str, object]]] = {}
    for kind, decls in (
        ("cloud", ast.clouds),
        ("node", ast.sim_nodes),
        ("platform", ast.platforms),
        ("edge", ast.edge_devices),
        ("device", ast.devices),
    ):
        for d in decls:
            table.setdefault(d.id, []).append((kind, d))
    return table


def _references(ast: SpecAst):
    """Yield ``(slot_kind, ref, owner_description)`` for every reference."""
    for r in ast.simulator.node_refs:
        yield "node", r, "Simulator"
    for n in ast.sim_nodes:
        yield "platform", n.platform_ref, f"SimulationNode {n.id}"
        for r in n.edge_refs:
            yield "edge", r, f"SimulationNode {n.id}"
    for e in ast.edge_devices:
        yield "cloud", e.cloud_ref, f"EdgeDevice {e.id}"
        for r in e.device_refs:
            yield "device", r, f"EdgeDevice {e.id}"


def check_declarations(ast: SpecAst) -> list[Diagnostic]:
    out = []
    table = _symbols(ast)
    for name, entries in table.items():
        for _, decl in entries[1:]:
            out.append(_error(E_DUP, f"'{name}' is declared more than once", decl.span))
    used: set[tuple[str, str]] = set()
    for slot, ref, owner in _references(ast):
        if ref.id not in table:
            out.append(
                _error(E_UNDECL, f"{owner} references undeclared {KIND_NAMES[slot]} '{ref.id}'", ref.span)
            )
        else:
            used.add((slot, ref.id))
    for name, entries in table.items():
        kind, decl = entries[0]
        if (kind, name) not in used:
            out.append(_warning(W_UNUSED, f"{KIND_NAMES[kind]} '{name}' is never used", decl.span))
    return out


def check_types(ast: SpecAst) -> list[Diagnostic]:
    out = []
    table = _symbols(ast)
    for slot, ref, owner in _references(ast):
        entries = table.get(ref.id)
        if not entries:
            continue  # reported by check_declarations
        if not any(kind == slot for kind, _ in entries):
            got = KIND_NAMES[entries[0][0]]
            out.append(
                _error(
                    E_TYPE,
                    f"{owner} expects a {KIND_NAMES[slot]} here but '{ref.id}' is a {got}",
                    ref.span,
                )
            )
    for p in ast.platforms:
        if (p.cpu is None) != (p.memory is None):
            out.append(_error(E_TYPE, f"Platform '{p.id}' must give both CPU and memory or neither", p.span))
        if (p.ip is None) != (p.username is None):
            out.append(_error(E_TYPE, f"Platform '{p.id}' must give both IP and userName or neither", p.span))
        if p.kind == "VM" and p.cpu is None and p.memory is None:
            out.append(_error(E_TYPE, f"VM platform '{p.id}' requires CPU and memory", p.span))
    return out


def check_protocols(ast: SpecAst) -> list[Diagnostic]:
    out = []
    clouds = {c.id: c for c in ast.clouds}
    for e in ast.edge_devices:
        cloud = clouds.get(e.cloud_ref.id)
        if cloud is None:
            continue
        if e.protocol == "MQTT" and not cloud.is_mqtt:
            out.append(
                _error(E_PROTO, f"EdgeDevice '{e.id}' speaks MQTT but cloud '{cloud.id}' is a UDP/TCP cloud", e.cloud_ref.span)
            )
        elif e.protocol != "MQTT" and cloud.is_mqtt:
            out.append(
                _error(E_PROTO, f"EdgeDevice '{e.id}' speaks {e.protocol} but cloud '{cloud.id}' is an MQTT cloud", e.cloud_ref.span)
            )
    return out


def check_timestep(ast: SpecAst) -> list[Diagnostic]:
    sim = ast.simulator
    duration_ms, step_ms = sim.duration.ms, sim.step.ms
    if duration_ms <= 0 or step_ms <= 0:
        return [_error(E_STEP, "duration and step must both be positive", sim.span)]
    if duration_ms % step_ms:
        return [
            _error(E_STEP, f"step {sim.step} does not divide duration {sim.duration}", sim.step.span)
        ]
    return []


_IPV4 = re.compile(r"\d+\.\d+\.\d+\.\d+\Z")


def _bad_ip(ip: str) -> bool:
    return not _IPV4.match(ip) or any(int(o) > 255 for o in ip.split("."))


def check_ranges(ast: SpecAst) -> list[Diagnostic]:
    """Value-range errors the grammar alone cannot rule out."""
    out = []
    for c in ast.clouds:
        if c.port is not None and not 1 <= c.port <= 65535:
            out.append(_error(E_RANGE, f"cloud '{c.id}' port {c.port} outside 1..65535", c.span))
        if c.pub_topic is not None and not c.pub_topic:
            out.append(_error(E_RANGE, f"cloud '{c.id}' has an empty pubTopic", c.span))
        for ip in (c.ip, c.record_dst):
            if ip is not None and _bad_ip(ip):
                out.append(_error(E_RANGE, f"cloud '{c.id}' has invalid IP {ip}", c.span))
    for n in ast.sim_nodes:
        if n.offset_range_pct > 100:
            out.append(_error(E_RANGE, f"offsetRange {n.offset_range_pct}% of node '{n.id}' exceeds 100%", n.span))
    for p in ast.platforms:
        if p.ip is not None and _bad_ip(p.ip):
            out.append(_error(E_RANGE, f"platform '{p.id}' has invalid IP {p.ip}", p.span))
        for label, value in (("CPU", p.cpu), ("memory", p.memory)):
            if value is not None and value < 1:
                out.append(_error(E_RANGE, f"platform '{p.id}' {label} must be positive", p.span))
    for e in ast.edge_devices:
        if e.speed != MAX and e.speed < 1:
            out.append(_error(E_RANGE, f"edge device '{e.id}' speed must be at least 1", e.span))
    for d in ast.devices:
        if d.period < 1:
            out.append(_error(E_RANGE, f"device '{d.id}' period must be at least 1", d.span))
        if d.payload.size is not None and d.payload.size < 1:
            out.append(_error(E_RANGE, f"device '{d.id}' payload size must be positive", d.span))
    refs = [r for _, r, _ in _references(ast) if r.count is not None]
    for r in refs:
        if r.count < 1:
            out.append(_error(E_RANGE, f"instance count of '{r.id}' must be at least 1", r.span))
    return out


def check_pacing(ast: SpecAst) -> list[Diagnostic]:
    """Warn when the paced sends due in one step cannot all fit in it."""
    out = []
    step_ms = ast.simulator.step.ms
    if step_ms <= 0:
        return out
    devices = {d.id: d for d in ast.devices}
    for e in ast.edge_devices:
        if e.speed == MAX or e.speed < 1:
            continue
        due = sum(r.count for r in e.device_refs if r.id in devices and r.count)
        budget = due * Fraction(step_ms, e.speed)
        if budget > step_ms:
            out.append(
                _warning(
                    W_TIGHT,
                    f"edge device '{e.id}' needs {float(budget):g}ms of gaps for {due} sends "
                    f"in a {step_ms}ms step; late devices will be dropped",
                    e.span,
                )
            )
    return out


def check_style(ast: SpecAst) -> list[Diagnostic]:
    return [
        _warning(W_STYLE, f"identifier '{d.id}' starts with a digit", d.span)
        for d in ast.declarations()
        if d.id[:1].isdigit()
    ]


def validate(ast: SpecAst) -> list[Diagnostic]:
    """Run every check; result is deduplicated and sorted by position."""
    found = (
        check_declarations(ast)
        + check_types(ast)
        + check_protocols(ast)
        + check_timestep(ast)
        + check_ranges(ast)
        + check_pacing(ast)
        + check_style(ast)
    )
    unique = list(dict.fromkeys(found))
    return sorted(unique, key=lambda d: (d.span.line, d.span.column, d.code, d.message))


def has_errors(diagnostics) -> bool:
    return any(d.is_error for d in diagnostics)


def exit_code(diagnostics) -> int:
    """0 clean, 1 warnings only, 2 errors."""
    if has_errors(diagnostics):
        return 2
    return 1 if diagnostics else 0
