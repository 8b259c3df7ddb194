"""Parse-tree types for the simulation DSL.

Every node carries a source :class:`Span`. Spans are excluded from equality so
that a printed-then-reparsed tree compares equal to the original.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

TIME_UNITS_MS = {"ms": 1, "s": 1_000, "m": 60_000, "h": 3_600_000}
PAYLOAD_UNITS = {"b": 1, "kb": 1024, "mb": 1024 * 1024}
PLATFORM_KINDS = ("Native", "Docker", "VM")
PROTOCOLS = ("UDP", "TCP", "MQTT")
MAX = "MAX"


@dataclass(frozen=True)
class Span:
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


NOWHERE = Span(0, 0)


def _span() -> Span:
    return field(default=NOWHERE, compare=False, repr=False)


@dataclass(frozen=True)
class Duration:
    magnitude: int
    unit: str
    span: Span = _span()

    @property
    def ms(self) -> int:
        return self.magnitude * TIME_UNITS_MS[self.unit]

    def __str__(self) -> str:
        return f"{self.magnitude}{self.unit}"


@dataclass(frozen=True)
class PayloadSpec:
    size: Optional[int] = None
    unit: Optional[str] = None
    literal: Optional[str] = None
    span: Span = _span()

    def __post_init__(self):
        if (self.size is None) == (self.literal is None):
            raise ValueError("payload needs exactly one of size or literal")

    @property
    def nbytes(self) -> int:
        if self.literal is not None:
            return len(self.literal.encode("utf-8"))
        return self.size * PAYLOAD_UNITS[self.unit]


@dataclass(frozen=True)
class Ref:
    """A by-name reference, optionally with an instance count (``SN1[5]``)."""

    id: str
    count: Optional[int] = None
    span: Span = _span()


@dataclass(frozen=True)
class CloudDecl:
    id: str
    ip: str
    port: Optional[int] = None
    pub_topic: Optional[str] = None
    sub_topic: Optional[str] = None
    record_dst: Optional[str] = None
    span: Span = _span()

    @property
    def is_mqtt(self) -> bool:
        return self.pub_topic is not None


@dataclass(frozen=True)
class SimulatorDecl:
    duration: Duration
    step: Duration
    node_refs: tuple[Ref, ...]
    span: Span = _span()


@dataclass(frozen=True)
class SimNodeDecl:
    id: str
    platform_ref: Ref
    offset_range_pct: int
    edge_refs: tuple[Ref, ...]
    span: Span = _span()


@dataclass(frozen=True)
class PlatformDecl:
    id: str
    kind: str
    ip: Optional[str] = None
    username: Optional[str] = None
    cpu: Optional[int] = None
    memory: Optional[int] = None
    span: Span = _span()

    @property
    def constrained(self) -> bool:
        return self.cpu is not None and self.memory is not None


@dataclass(frozen=True)
class EdgeDeviceDecl:
    id: str
    protocol: str
    speed: Union[int, str]
    cloud_ref: Ref
    device_refs: tuple[Ref, ...]
    workload: Optional[Duration] = None
    span: Span = _span()


@dataclass(frozen=True)
class DeviceDecl:
    id: str
    period: int
    payload: PayloadSpec
    span: Span = _span()


@dataclass(frozen=True)
class SpecAst:
    clouds: tuple[CloudDecl, ...]
    simulator: SimulatorDecl
    sim_nodes: tuple[SimNodeDecl, ...]
    platforms: tuple[PlatformDecl, ...]
    edge_devices: tuple[EdgeDeviceDecl, ...]
    devices: tuple[DeviceDecl, ...]

    def declarations(self):
        """All named declarations in source order of their kind groups."""
        yield from self.clouds
        yield from self.sim_nodes
        yield from self.platforms
        yield from self.edge_devices
        yield from self.devices
