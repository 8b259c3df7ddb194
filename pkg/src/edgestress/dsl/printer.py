"""Canonical formatter; output re-parses to an equal tree."""
from __future__ import annotations

import re

from .ast import SpecAst
from .lexer import KEYWORDS, UNITS

_BARE = re.compile(r"[A-Za-z][A-Za-z0-9]*\Z")


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _string(text: str) -> str:
    if _BARE.match(text) and text not in KEYWORDS and text not in UNITS:
        return text
    return _quote(text)


def _refs(refs) -> str:
    return "{" + ",".join(f"{r.id}[{r.count}]" for r in refs) + "}"


def format_spec(ast: SpecAst) -> str:
    out: list[str] = []
    w = out.append
    for c in ast.clouds:
        w(f"Cloud:{c.id} {{")
        w(f"\tIP:{c.ip}")
        if c.port is not None:
            w(f"\tport:{c.port}")
        else:
            w(f"\tpubTopic:{_string(c.pub_topic)}")
            if c.sub_topic is not None:
                w(f"\tsubTopic:{_string(c.sub_topic)}")
        if c.record_dst is not None:
            w(f"\tMethods:{{Record({c.record_dst})}}")
        w("}")
    sim = ast.simulator
    w("Simulator: {")
    w(f"\tduration:{sim.duration}")
    w(f"\tstep:{sim.step}")
    w(f"\tsimulationNodes:{_refs(sim.node_refs)}")
    w("}")
    for n in ast.sim_nodes:
        w(f"SimulationNode: {n.id} {{")
        w(f"\tplatform:{n.platform_ref.id}")
        w(f"\toffsetRange:{n.offset_range_pct}%")
        w(f"\tEdgeDevices:{_refs(n.edge_refs)}")
        w("}")
    for p in ast.platforms:
        w(f"Platform: {p.id} {{")
        w(f"\ttype: {p.kind}")
        if p.ip is not None:
            w(f"\tIP: {p.ip}")
        if p.username is not None:
            w(f"\tuserName: {_string(p.username)}")
        if p.cpu is not None:
            w(f"\tCPU: {p.cpu}")
        if p.memory is not None:
            w(f"\tmemory: {p.memory}G")
        w("}")
    for e in ast.edge_devices:
        w(f"EdgeDevice: {e.id} {{")
        w(f"\tprotocol:{e.protocol}")
        w(f"\tspeed:{e.speed}")
        w(f"\tcloud:{e.cloud_ref.id}")
        w(f"\tdevices:{_refs(e.device_refs)}")
        if e.workload is not None:
            w(f"\tworkload:{e.workload}")
        w("}")
    for d in ast.devices:
        w(f"Device: {d.id} {{")
        w(f"\tperiod:{d.period}")
        if d.payload.literal is not None:
            w(f"\tpayload:{_quote(d.payload.literal)}")
        else:
            w(f"\tpayload:{d.payload.size}{d.payload.unit}")
        w("}")
    return "\n".join(out) + "\n"
