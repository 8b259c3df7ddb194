"""Uniform send/receive handles over UDP, length-framed TCP, and MQTT.

A handle is owned by one edge device. Its send side and receive side may be
driven from two different threads at once; sends on one handle must not be
issued from two threads simultaneously.
"""
from __future__ import annotations

import errno
import itertools
import os
import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from ..errors import ConnectError, ReceiveError, SendError
from . import mqtt
from .packet import Packet, decode_seq

PROTOCOLS = ("UDP", "TCP", "MQTT")
TCP_LENGTH = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024
SOCKET_BUFFER = 4 * 1024 * 1024
SEND_RETRIES = 3
SEND_RETRY_WAIT = 0.01
STREAM_SEND_TIMEOUT = 2.0

_client_ids = itertools.count()


@dataclass(frozen=True)
class Endpoint:
    protocol: str
    host: str
    port: int
    pub_topic: Optional[str] = None
    sub_topic: Optional[str] = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "MQTT":
            if not self.pub_topic:
                raise ValueError("MQTT endpoint needs a publish topic")
        elif self.pub_topic is not None or self.sub_topic is not None:
            raise ValueError("topics are only valid for MQTT endpoints")
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")


@dataclass(frozen=True)
class SendReceipt:
    seq: Optional[int]
    t_send_ns: int


@dataclass(frozen=True)
class Inbound:
    seq: Optional[int]
    data: bytes
    t_recv_ns: int


def _tune(sock: socket.socket) -> None:
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, SOCKET_BUFFER)
        except OSError:
            pass


class Connection:
    protocol = ""
    receives_enabled = True

    def __init__(self, endpoint: Endpoint, sock: socket.socket):
        self.endpoint = endpoint
        self.sock = sock
        self.closed = False
        self.local_address = "%s:%d" % sock.getsockname()[:2]

    # subclasses implement the wire format
    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read(self, timeout: float) -> Optional[bytes]:
        raise NotImplementedError

    def send(self, packet: Packet) -> SendReceipt:
        return self.send_bytes(packet.encode(), packet.seq)

    def send_bytes(self, data: bytes, seq: Optional[int] = None) -> SendReceipt:
        if self.closed:
            raise SendError("connection is closed")
        t = time.monotonic_ns()
        self._write(data)
        return SendReceipt(seq, t)

    def receive(self, deadline_ns: int) -> Optional[Inbound]:
        """Next inbound message, or None once ``deadline_ns`` passes."""
        if self.closed:
            raise ReceiveError("connection is closed")
        timeout = max(0.0, (deadline_ns - time.monotonic_ns()) / 1e9)
        data = self._read(timeout)
        if data is None:
            return None
        return Inbound(decode_seq(data), data, time.monotonic_ns())

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class UdpConnection(Connection):
    protocol = "UDP"

    def _write(self, data: bytes) -> None:
        for attempt in range(SEND_RETRIES + 1):
            try:
                self.sock.send(data, socket.MSG_DONTWAIT)
                return
            except BlockingIOError:
                if attempt == SEND_RETRIES:
                    raise SendError("socket buffer full") from None
                select.select([], [self.sock], [], SEND_RETRY_WAIT)
            except OSError as exc:
                raise SendError(f"UDP send failed: {exc}") from exc

    def _read(self, timeout: float) -> Optional[bytes]:
        try:
            ready, _, _ = select.select([self.sock], [], [], timeout)
            if not ready:
                return None
            return self.sock.recv(65535, socket.MSG_DONTWAIT)
        except BlockingIOError:
            return None
        except ConnectionRefusedError:
            # ICMP port-unreachable from an earlier datagram; not fatal for UDP
            return None
        except (OSError, ValueError) as exc:
            raise ReceiveError(f"UDP receive failed: {exc}") from exc


class _StreamConnection(Connection):
    def __init__(self, endpoint, sock):
        super().__init__(endpoint, sock)
        self._rbuf = bytearray()
        self.broken = False

    def _write(self, data: bytes) -> None:
        if self.broken:
            raise SendError("stream broken by an earlier partial write")
        view = memoryview(data)
        deadline = time.monotonic() + STREAM_SEND_TIMEOUT
        while view:
            try:
                n = self.sock.send(view, socket.MSG_DONTWAIT)
                view = view[n:]
            except BlockingIOError:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    if len(view) < len(data):
                        self.broken = True
                    raise SendError("stream send timed out") from None
                select.select([], [self.sock], [], min(remaining, SEND_RETRY_WAIT))
            except OSError as exc:
                self.broken = True
                raise SendError(f"{self.protocol} send failed: {exc}") from exc

    def _fill(self, timeout: float) -> bool:
        try:
            ready, _, _ = select.select([self.sock], [], [], timeout)
            if not ready:
                return False
            chunk = self.sock.recv(1 << 16, socket.MSG_DONTWAIT)
        except BlockingIOError:
            return False
        except (OSError, ValueError) as exc:
            raise ReceiveError(f"{self.protocol} receive failed: {exc}") from exc
        if not chunk:
            raise ReceiveError("connection closed by peer")
        self._rbuf += chunk
        return True


class TcpConnection(_StreamConnection):
    protocol = "TCP"

    def send_bytes(self, data: bytes, seq: Optional[int] = None) -> SendReceipt:
        return super().send_bytes(TCP_LENGTH.pack(len(data)) + data, seq)

    def _frame(self) -> Optional[bytes]:
        if len(self._rbuf) < 4:
            return None
        (n,) = TCP_LENGTH.unpack_from(self._rbuf)
        if n > MAX_FRAME:
            raise ReceiveError(f"frame length {n} exceeds limit")
        if len(self._rbuf) < 4 + n:
            return None
        data = bytes(self._rbuf[4 : 4 + n])
        del self._rbuf[: 4 + n]
        return data

    def _read(self, timeout: float) -> Optional[bytes]:
        deadline = time.monotonic() + timeout
        while True:
            frame = self._frame()
            if frame is not None:
                return frame
            remaining = deadline - time.monotonic()
            if remaining < 0 or not self._fill(max(remaining, 0.0)):
                return self._frame()


class MqttConnection(_StreamConnection):
    protocol = "MQTT"

    def __init__(self, endpoint, sock):
        super().__init__(endpoint, sock)
        self._reader = mqtt.StreamReader()
        self._pending: deque = deque()
        self.receives_enabled = endpoint.sub_topic is not None

    def send_bytes(self, data: bytes, seq: Optional[int] = None) -> SendReceipt:
        frame = mqtt.publish_header(self.endpoint.pub_topic, len(data)) + data
        return super().send_bytes(frame, seq)

    def _next_packet(self, timeout: float) -> Optional[mqtt.RawPacket]:
        deadline = time.monotonic() + timeout
        while not self._pending:
            remaining = deadline - time.monotonic()
            if remaining < 0:
                return None
            if self._fill(remaining):
                try:
                    self._pending.extend(self._reader.feed(bytes(self._rbuf)))
                except mqtt.MalformedPacket as exc:
                    raise ReceiveError(str(exc)) from exc
                self._rbuf.clear()
            elif time.monotonic() >= deadline:
                return None
        return self._pending.popleft()

    def handshake(self, client_id: str, timeout: float) -> None:
        self._write(mqtt.encode_connect(client_id))
        pkt = self._next_packet(timeout)
        if pkt is None or pkt.type != mqtt.PacketType.CONNACK:
            raise ConnectError("no CONNACK from broker")
        _, code = mqtt.decode_connack(pkt.body)
        if code != mqtt.ConnackCode.ACCEPTED:
            raise ConnectError(f"CONNACK refused with return code {code}")
        if self.endpoint.sub_topic is not None:
            self._write(mqtt.encode_subscribe(1, [self.endpoint.sub_topic]))
            pkt = self._next_packet(timeout)
            if pkt is None or pkt.type != mqtt.PacketType.SUBACK:
                raise ConnectError("no SUBACK from broker")
            _, codes = mqtt.decode_suback(pkt.body)
            if any(c & 0x80 for c in codes):
                raise ConnectError("subscription refused")

    def _read(self, timeout: float) -> Optional[bytes]:
        deadline = time.monotonic() + timeout
        while True:
            pkt = self._next_packet(max(0.0, deadline - time.monotonic()))
            if pkt is None:
                return None
            if pkt.type == mqtt.PacketType.PUBLISH:
                try:
                    pub = mqtt.decode_publish(pkt.flags, pkt.body)
                except mqtt.MalformedPacket as exc:
                    raise ReceiveError(str(exc)) from exc
                if pub.topic == self.endpoint.sub_topic:
                    return pub.payload

    def close(self) -> None:
        if not self.closed:
            try:
                self.sock.send(mqtt.encode_disconnect(), socket.MSG_DONTWAIT)
            except OSError:
                pass
        super().close()


def _resolve(host: str, port: int, kind: int):
    try:
        infos = socket.getaddrinfo(host, port, socket.AF_INET, kind)
    except socket.gaierror as exc:
        raise ConnectError(f"cannot resolve {host}: {exc}") from exc
    return infos[0][4]


def connect(endpoint: Endpoint, timeout: float = 5.0, client_id: Optional[str] = None) -> Connection:
    """Open the handle an edge device holds for the whole run."""
    if endpoint.protocol == "UDP":
        addr = _resolve(endpoint.host, endpoint.port, socket.SOCK_DGRAM)
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        _tune(sock)
        try:
            sock.connect(addr)
        except OSError as exc:
            sock.close()
            raise ConnectError(f"UDP connect failed: {exc}") from exc
        return UdpConnection(endpoint, sock)

    addr = _resolve(endpoint.host, endpoint.port, socket.SOCK_STREAM)
    try:
        sock = socket.create_connection(addr, timeout=timeout)
    except ConnectionRefusedError as exc:
        raise ConnectError(f"{endpoint.protocol} connection refused by {endpoint.host}:{endpoint.port}") from exc
    except OSError as exc:
        reason = errno.errorcode.get(exc.errno, str(exc)) if exc.errno else str(exc)
        raise ConnectError(f"{endpoint.protocol} connect failed: {reason}") from exc
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    _tune(sock)
    if endpoint.protocol == "TCP":
        return TcpConnection(endpoint, sock)
    conn = MqttConnection(endpoint, sock)
    cid = client_id or f"edgestress-{os.getpid()}-{next(_client_ids)}-{threading.get_ident() % 10000}"
    try:
        conn.handshake(cid, timeout)
    except (ConnectError, ReceiveError, SendError) as exc:
        conn.close()
        if isinstance(exc, ConnectError):
            raise
        raise ConnectError(f"MQTT handshake failed: {exc}") from exc
    return conn
