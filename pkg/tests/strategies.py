"""Hypothesis strategies producing specification trees."""
from hypothesis import strategies as st

from edgestress.dsl.ast import (
    MAX,
    CloudDecl,
    DeviceDecl,
    Duration,
    EdgeDeviceDecl,
    PayloadSpec,
    PlatformDecl,
    Ref,
    SimNodeDecl,
    SimulatorDecl,
    SpecAst,
)

ips = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
texts = st.text(st.characters(blacklist_characters="\n", blacklist_categories=("Cs",)), max_size=12)
time_units = st.sampled_from(["ms", "s", "m", "h"])
durations = st.builds(Duration, st.integers(1, 5000), time_units)
workloads = st.builds(Duration, st.integers(0, 5000), st.sampled_from(["ms", "s", "m"]))


def _ids(prefix, n):
    return [f"{prefix}{k + 1}" for k in range(n)]


def _refs(draw, names, max_items=3):
    picked = draw(st.lists(st.sampled_from(names), min_size=1, max_size=max_items))
    return tuple(Ref(n, draw(st.integers(1, 40))) for n in picked)


@st.composite
def clouds(draw, cid):
    ip = draw(ips)
    record = draw(st.none() | ips)
    if draw(st.booleans()):
        return CloudDecl(cid, ip, port=draw(st.integers(1, 65535)), record_dst=record)
    return CloudDecl(cid, ip, pub_topic=draw(texts), sub_topic=draw(st.none() | texts), record_dst=record)


@st.composite
def platforms(draw, pid):
    kind = draw(st.sampled_from(["Native", "Docker", "VM"]))
    remote = draw(st.booleans())
    limited = draw(st.booleans())
    return PlatformDecl(
        pid,
        kind,
        ip=draw(ips) if remote else None,
        username=draw(texts) if remote else None,
        cpu=draw(st.integers(1, 64)) if limited else None,
        memory=draw(st.integers(1, 512)) if limited else None,
    )


@st.composite
def payloads(draw):
    if draw(st.booleans()):
        return PayloadSpec(literal=draw(texts))
    return PayloadSpec(size=draw(st.integers(1, 4096)), unit=draw(st.sampled_from(["b", "kb", "mb"])))


@st.composite
def spec_asts(draw, max_decls=3):
    """Reference-closed trees; kinds, protocols and steps are not forced to agree."""
    c_ids = _ids("C", draw(st.integers(1, max_decls)))
    n_ids = _ids("SN", draw(st.integers(1, max_decls)))
    p_ids = _ids("P", draw(st.integers(1, max_decls)))
    e_ids = _ids("E", draw(st.integers(1, max_decls)))
    d_ids = _ids("D", draw(st.integers(1, max_decls)))
    sim = SimulatorDecl(draw(durations), draw(durations), _refs(draw, n_ids))
    nodes = tuple(
        SimNodeDecl(n, Ref(draw(st.sampled_from(p_ids))), draw(st.integers(0, 100)), _refs(draw, e_ids))
        for n in n_ids
    )
    edges = tuple(
        EdgeDeviceDecl(
            e,
            draw(st.sampled_from(["UDP", "TCP", "MQTT"])),
            draw(st.just(MAX) | st.integers(1, 10_000)),
            Ref(draw(st.sampled_from(c_ids))),
            _refs(draw, d_ids),
            draw(st.none() | workloads),
        )
        for e in e_ids
    )
    devices = tuple(DeviceDecl(d, draw(st.integers(1, 100)), draw(payloads())) for d in d_ids)
    return SpecAst(
        tuple(draw(clouds(c)) for c in c_ids),
        sim,
        nodes,
        tuple(draw(platforms(p)) for p in p_ids),
        edges,
        devices,
    )


@st.composite
def valid_spec_asts(draw):
    """Trees that should pass validation: consistent protocols, dividing step, used declarations."""
    step_ms = draw(st.sampled_from([100, 250, 500, 1000]))
    steps = draw(st.integers(1, 8))
    n_dev = draw(st.integers(1, 3))
    d_ids = _ids("D", n_dev)
    devices = tuple(DeviceDecl(d, draw(st.integers(1, 7)), PayloadSpec(size=draw(st.integers(1, 64)), unit="b"))
                    for d in d_ids)
    mqtt = draw(st.booleans())
    cloud = (CloudDecl("C1", "127.0.0.1", pub_topic="pub") if mqtt
             else CloudDecl("C1", "127.0.0.1", port=draw(st.integers(1024, 65535))))
    proto = "MQTT" if mqtt else draw(st.sampled_from(["UDP", "TCP"]))
    dev_refs = tuple(Ref(d, draw(st.integers(1, 5))) for d in d_ids)
    edge = EdgeDeviceDecl("E1", proto, MAX, Ref("C1"), dev_refs)
    node = SimNodeDecl("SN1", Ref("P1"), draw(st.integers(0, 100)), (Ref("E1", draw(st.integers(1, 4))),))
    platform = draw(st.sampled_from([
        PlatformDecl("P1", "Native"),
        PlatformDecl("P1", "Docker"),
        PlatformDecl("P1", "Docker", cpu=4, memory=2),
    ]))
    sim = SimulatorDecl(Duration(step_ms * steps, "ms"), Duration(step_ms, "ms"), (Ref("SN1", draw(st.integers(1, 3))),))
    return SpecAst((cloud,), sim, (node,), (platform,), (edge,), devices)
