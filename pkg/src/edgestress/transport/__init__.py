"""Protocol adapters used by simulated edge devices."""
from .connection import (
    Connection,
    Endpoint,
    Inbound,
    MqttConnection,
    SendReceipt,
    TcpConnection,
    UdpConnection,
    connect,
)
from .packet import SEQ_BYTES, Packet, PayloadFactory, decode_seq, tracked


def send(handle: Connection, packet: Packet) -> SendReceipt:
    return handle.send(packet)


def receive(handle: Connection, deadline_ns: int):
    return handle.receive(deadline_ns)


__all__ = [
    "Connection",
    "Endpoint",
    "Inbound",
    "MqttConnection",
    "Packet",
    "PayloadFactory",
    "SEQ_BYTES",
    "SendReceipt",
    "TcpConnection",
    "UdpConnection",
    "connect",
    "decode_seq",
    "receive",
    "send",
    "tracked",
]
