"""MQTT 3.1.1 wire codec for the packet types the toolkit needs.

CONNECT, CONNACK, PUBLISH (QoS 0), SUBSCRIBE, SUBACK and DISCONNECT are
encoded and decoded; every other packet type is recognised by its header
only.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

PROTOCOL_NAME = b"MQTT"
PROTOCOL_LEVEL = 4
MAX_REMAINING_LENGTH = 268_435_455


class PacketType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class ConnackCode(enum.IntEnum):
    ACCEPTED = 0
    UNACCEPTABLE_PROTOCOL_VERSION = 1
    IDENTIFIER_REJECTED = 2
    SERVER_UNAVAILABLE = 3
    BAD_USER_NAME_OR_PASSWORD = 4
    NOT_AUTHORIZED = 5


CLEAN_SESSION = 0x02


class MalformedPacket(ValueError):
    pass


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise ValueError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        byte, n = n % 128, n // 128
        if n:
            byte |= 0x80
        out.append(byte)
        if not n:
            return bytes(out)


def decode_remaining_length(buf, start: int = 1) -> Optional[tuple[int, int]]:
    """Return ``(value, bytes_used)`` or None if ``buf`` is too short."""
    value, mult = 0, 1
    for i in range(4):
        if start + i >= len(buf):
            return None
        byte = buf[start + i]
        value += (byte & 0x7F) * mult
        if not byte & 0x80:
            return value, i + 1
        mult *= 128
    raise MalformedPacket("remaining length longer than 4 bytes")


def _string(s) -> bytes:
    data = s.encode("utf-8") if isinstance(s, str) else bytes(s)
    if len(data) > 0xFFFF:
        raise ValueError("MQTT string longer than 65535 bytes")
    return struct.pack(">H", len(data)) + data


def _read_string(body: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 2 > len(body):
        raise MalformedPacket("truncated string length")
    (n,) = struct.unpack_from(">H", body, pos)
    end = pos + 2 + n
    if end > len(body):
        raise MalformedPacket("truncated string")
    return body[pos + 2 : end], end


def _frame(first_byte: int, body: bytes) -> bytes:
    return bytes([first_byte]) + encode_remaining_length(len(body)) + body


def encode_connect(client_id: str, keepalive: int = 0, clean_session: bool = True,
                   protocol_level: int = PROTOCOL_LEVEL) -> bytes:
    flags = CLEAN_SESSION if clean_session else 0
    body = _string(PROTOCOL_NAME) + bytes([protocol_level, flags]) + struct.pack(">H", keepalive)
    body += _string(client_id)
    return _frame(PacketType.CONNECT << 4, body)


def encode_connack(code: int, session_present: bool = False) -> bytes:
    return _frame(PacketType.CONNACK << 4, bytes([1 if session_present else 0, code]))


def publish_header(topic: str, payload_len: int) -> bytes:
    """Fixed header plus topic for a QoS 0 PUBLISH; append the payload."""
    t = _string(topic)
    return bytes([PacketType.PUBLISH << 4]) + encode_remaining_length(len(t) + payload_len) + t


def encode_publish(topic: str, payload: bytes) -> bytes:
    return publish_header(topic, len(payload)) + payload


def encode_subscribe(packet_id: int, topics) -> bytes:
    body = struct.pack(">H", packet_id)
    for topic in topics:
        body += _string(topic) + b"\x00"
    return _frame((PacketType.SUBSCRIBE << 4) | 0x02, body)


def encode_suback(packet_id: int, codes) -> bytes:
    return _frame(PacketType.SUBACK << 4, struct.pack(">H", packet_id) + bytes(codes))


def encode_disconnect() -> bytes:
    return bytes([PacketType.DISCONNECT << 4, 0])


@dataclass(frozen=True)
class RawPacket:
    type: int
    flags: int
    body: bytes


@dataclass(frozen=True)
class Connect:
    protocol_name: bytes
    protocol_level: int
    flags: int
    keepalive: int
    client_id: str


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes
    qos: int = 0
    packet_id: Optional[int] = None


def decode_connect(body: bytes) -> Connect:
    name, pos = _read_string(body, 0)
    if pos + 4 > len(body):
        raise MalformedPacket("truncated CONNECT header")
    level, flags = body[pos], body[pos + 1]
    (keepalive,) = struct.unpack_from(">H", body, pos + 2)
    client_id = b""
    if name == PROTOCOL_NAME and level == PROTOCOL_LEVEL:
        client_id, _ = _read_string(body, pos + 4)
    return Connect(name, level, flags, keepalive, client_id.decode("utf-8", "replace"))


def decode_publish(flags: int, body: bytes) -> Publish:
    topic, pos = _read_string(body, 0)
    qos = (flags >> 1) & 0x03
    packet_id = None
    if qos == 3:
        raise MalformedPacket("PUBLISH with QoS 3")
    if qos:
        if pos + 2 > len(body):
            raise MalformedPacket("truncated packet identifier")
        (packet_id,) = struct.unpack_from(">H", body, pos)
        pos += 2
    return Publish(topic.decode("utf-8", "replace"), body[pos:], qos, packet_id)


def decode_subscribe(body: bytes) -> tuple[int, list[tuple[str, int]]]:
    if len(body) < 2:
        raise MalformedPacket("truncated SUBSCRIBE")
    (packet_id,) = struct.unpack_from(">H", body, 0)
    pos, filters = 2, []
    while pos < len(body):
        topic, pos = _read_string(body, pos)
        if pos >= len(body):
            raise MalformedPacket("SUBSCRIBE filter without QoS byte")
        filters.append((topic.decode("utf-8", "replace"), body[pos]))
        pos += 1
    if not filters:
        raise MalformedPacket("SUBSCRIBE with no filters")
    return packet_id, filters


def decode_connack(body: bytes) -> tuple[bool, int]:
    if len(body) != 2:
        raise MalformedPacket("CONNACK body must be 2 bytes")
    return bool(body[0] & 1), body[1]


def decode_suback(body: bytes) -> tuple[int, list[int]]:
    if len(body) < 3:
        raise MalformedPacket("truncated SUBACK")
    (packet_id,) = struct.unpack_from(">H", body, 0)
    return packet_id, list(body[2:])


class StreamReader:
    """Incremental splitter turning a byte stream into :class:`RawPacket`."""

    def __init__(self, max_packet: int = MAX_REMAINING_LENGTH):
        self._buf = bytearray()
        self.max_packet = max_packet

    def feed(self, data: bytes) -> Iterator[RawPacket]:
        self._buf += data
        while len(self._buf) >= 2:
            decoded = decode_remaining_length(self._buf, 1)
            if decoded is None:
                return
            length, used = decoded
            if length > self.max_packet:
                raise MalformedPacket(f"packet of {length} bytes exceeds limit")
            end = 1 + used + length
            if len(self._buf) < end:
                return
            first = self._buf[0]
            body = bytes(self._buf[1 + used : end])
            del self._buf[:end]
            yield RawPacket(first >> 4, first & 0x0F, body)

    @property
    def pending(self) -> int:
        return len(self._buf)
