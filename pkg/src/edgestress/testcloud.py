"""Loopback stand-ins for a cloud under test.

``EchoCloud`` reflects every UDP datagram or length-framed TCP message back to
its sender; ``MqttSink`` accepts MQTT 3.1.1 publishes on a set of topics. Both
timestamp and count everything they ingest in a :class:`CloudLedger`, which a
line-based control endpoint (``STATS``/``RECORDS``/``RESET``) exposes to other
processes.
"""
from __future__ import annotations

import json
import logging
import math
import socket
import struct
import threading
import time
from collections import Counter
from typing import Iterable, Optional

from .errors import BindError
from .transport import mqtt
from .transport.packet import decode_seq

log = logging.getLogger(__name__)

TCP_LENGTH = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024
SOCKET_BUFFER = 4 * 1024 * 1024
THROTTLE_WINDOW_S = 0.1
POLL_S = 0.2


def host_id() -> str:
    """Identifier of the monotonic-clock domain (the running kernel boot)."""
    try:
        with open("/proc/sys/kernel/random/boot_id") as fh:
            return fh.read().strip()
    except OSError:
        return socket.gethostname()


class TokenBucket:
    """Admit at most ``rate`` packets/s with a burst of one window's worth."""

    def __init__(self, rate: Optional[float], window_s: float = THROTTLE_WINDOW_S):
        self.rate = rate
        if rate is None or math.isinf(rate):
            self.capacity = math.inf
        elif rate <= 0:
            self.capacity = 0.0
        else:
            self.capacity = max(1.0, rate * window_s)
        self.tokens = self.capacity
        self.last_ns: Optional[int] = None
        self._lock = threading.Lock()

    def allow(self, t_ns: int) -> bool:
        if self.capacity == math.inf:
            return True
        if self.capacity == 0:
            return False
        with self._lock:
            if self.last_ns is not None:
                self.tokens = min(self.capacity, self.tokens + (t_ns - self.last_ns) * self.rate / 1e9)
            self.last_ns = t_ns
            if self.tokens >= 1.0:
                self.tokens -= 1.0
                return True
            return False


class CloudLedger:
    """Thread-safe ingestion ledger; readers get consistent snapshots."""

    def __init__(self, capture: bool = False):
        self._lock = threading.Lock()
        self.capture = capture
        self.reset()

    def reset(self) -> None:
        with self._lock:
            self.received: Counter = Counter()
            self.records: list[tuple[int, int, str]] = []
            self.echoed_count = 0
            self.dropped = 0
            self.other_topic = 0
            self.malformed = 0
            self.captured: list[bytes] = []
            self._last_t: dict[str, int] = {}

    def record(self, source: str, protocol: str, data: bytes, t_ns: int) -> None:
        seq = decode_seq(data)
        with self._lock:
            self.received[(source, protocol)] += 1
            if seq is not None:
                self.records.append((seq, t_ns, source))
            self._last_t[source] = t_ns

    def add(self, field: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, field, getattr(self, field) + n)

    def keep_raw(self, frame: bytes) -> None:
        if self.capture:
            with self._lock:
                self.captured.append(frame)

    @property
    def received_count(self) -> int:
        with self._lock:
            return sum(self.received.values())

    def snapshot(self, include_records: bool = False) -> dict:
        with self._lock:
            doc = {
                "received_count": sum(self.received.values()),
                "per_source": {f"{s}/{p}": n for (s, p), n in sorted(self.received.items())},
                "echoed_count": self.echoed_count,
                "dropped": self.dropped,
                "other_topic": self.other_topic,
                "malformed": self.malformed,
                "host": host_id(),
                "clock": "monotonic",
            }
            if include_records:
                doc["records"] = [list(r) for r in self.records]
            return doc


def _bind(kind: int, host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, kind)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, SOCKET_BUFFER)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, SOCKET_BUFFER)
    except OSError:
        pass
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
    return sock


def _recv_exact(conn: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class CloudServer:
    """Common lifecycle: serving threads, throttle, and the control endpoint."""

    mode = ""

    def __init__(self, port: int = 0, host: str = "127.0.0.1", ctrl_port: Optional[int] = None,
                 throttle_pps: Optional[float] = None, capture: bool = False):
        self.host = host
        self.requested_port = port
        self.requested_ctrl = ctrl_port
        self.ledger = CloudLedger(capture=capture)
        self.bucket = TokenBucket(throttle_pps)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._sockets: list[socket.socket] = []
        self.port = port
        self.ctrl_port = ctrl_port
        self.started = False

    # -- lifecycle -------------------------------------------------------
    def start(self) -> "CloudServer":
        self._open()
        ctrl = self.requested_ctrl
        if ctrl is None:
            ctrl = self.port + 1 if self.requested_port else 0
        try:
            ctrl_sock = _bind(socket.SOCK_STREAM, self.host, ctrl)
        except BindError:
            self.stop()
            raise
        ctrl_sock.listen(16)
        ctrl_sock.settimeout(POLL_S)
        self.ctrl_port = ctrl_sock.getsockname()[1]
        self._sockets.append(ctrl_sock)
        self._spawn(self._serve_control, ctrl_sock)
        self.started = True
        log.info("%s listening on %s:%d (control %d)", self.mode, self.host, self.port, self.ctrl_port)
        return self

    def stop(self) -> None:
        self._stop.set()
        for s in self._sockets:
            try:
                s.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2.0)
        self._threads.clear()
        self._sockets.clear()

    def __enter__(self):
        return self.start() if not self.started else self

    def __exit__(self, *exc):
        self.stop()

    def throttle(self, max_packets_per_second: Optional[float]) -> None:
        self.bucket = TokenBucket(max_packets_per_second)

    def _spawn(self, target, *args) -> threading.Thread:
        t = threading.Thread(target=target, args=args, daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def _admit(self, t_ns: int) -> bool:
        if self.bucket.allow(t_ns):
            return True
        self.ledger.add("dropped")
        return False

    # -- control endpoint -------------------------------------------------
    def _serve_control(self, sock: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._spawn(self._control_session, conn)

    def _control_session(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rwb") as fh:
            for raw in fh:
                cmd = raw.decode("ascii", "replace").strip().upper()
                if cmd == "STATS":
                    reply = json.dumps(self.stats(), sort_keys=True)
                elif cmd == "RECORDS":
                    reply = json.dumps(self.ledger.snapshot(include_records=True), sort_keys=True)
                elif cmd == "RESET":
                    self.ledger.reset()
                    reply = "OK"
                elif cmd in ("QUIT", ""):
                    break
                else:
                    reply = f"ERR unknown command {cmd!r}"
                try:
                    fh.write(reply.encode() + b"\n")
                    fh.flush()
                except OSError:
                    break

    def stats(self) -> dict:
        doc = self.ledger.snapshot()
        doc.update(mode=self.mode, port=self.port, throttle_pps=self.bucket.rate)
        return doc

    def _open(self) -> None:
        raise NotImplementedError


class EchoCloud(CloudServer):
    """Echo every UDP datagram, or every length-framed TCP message, to its sender."""

    def __init__(self, protocol: str = "UDP", port: int = 0, **kw):
        if protocol not in ("UDP", "TCP"):
            raise ValueError("echo cloud speaks UDP or TCP")
        super().__init__(port, **kw)
        self.protocol = protocol
        self.mode = f"{protocol.lower()}-echo"

    def _open(self) -> None:
        if self.protocol == "UDP":
            sock = _bind(socket.SOCK_DGRAM, self.host, self.requested_port)
            sock.settimeout(POLL_S)
            self.port = sock.getsockname()[1]
            self._sockets.append(sock)
            self._spawn(self._serve_udp, sock)
        else:
            sock = _bind(socket.SOCK_STREAM, self.host, self.requested_port)
            sock.listen(512)
            sock.settimeout(POLL_S)
            self.port = sock.getsockname()[1]
            self._sockets.append(sock)
            self._spawn(self._accept_tcp, sock)

    def _serve_udp(self, sock: socket.socket) -> None:
        ledger, stop = self.ledger, self._stop
        while not stop.is_set():
            try:
                data, addr = sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            t = time.monotonic_ns()
            if not self._admit(t):
                continue
            ledger.record("%s:%d" % addr, "UDP", data, t)
            try:
                sock.sendto(data, addr)
                ledger.add("echoed_count")
            except OSError:
                pass

    def _accept_tcp(self, sock: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._spawn(self._serve_tcp, conn, "%s:%d" % addr)

    def _serve_tcp(self, conn: socket.socket, source: str) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(POLL_S)
        ledger = self.ledger
        buf = bytearray()
        with conn:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(1 << 16)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if not chunk:
                    return
                buf += chunk
                while len(buf) >= 4:
                    (n,) = TCP_LENGTH.unpack_from(buf)
                    if n > MAX_FRAME:
                        ledger.add("malformed")
                        return
                    if len(buf) < 4 + n:
                        break
                    data = bytes(buf[4 : 4 + n])
                    del buf[: 4 + n]
                    t = time.monotonic_ns()
                    if not self._admit(t):
                        continue
                    ledger.record(source, "TCP", data, t)
                    try:
                        conn.sendall(TCP_LENGTH.pack(n) + data)
                        ledger.add("echoed_count")
                    except OSError:
                        return


class MqttSink(CloudServer):
    """Minimal MQTT 3.1.1 ingestion point: no retain, no wildcards, QoS 0 only.

    Publishes on an accepted topic are recorded; with ``echo_topic`` set they
    are also re-published on that topic to every session subscribed to it.
    """

    mode = "mqtt-sink"

    def __init__(self, port: int = 0, accepted_topics: Iterable[str] = ("pub",),
                 echo_topic: Optional[str] = None, **kw):
        super().__init__(port, **kw)
        self.accepted = frozenset(accepted_topics)
        self.echo_topic = echo_topic
        self._subscribers: dict[str, set] = {}
        self._sub_lock = threading.Lock()

    def _open(self) -> None:
        sock = _bind(socket.SOCK_STREAM, self.host, self.requested_port)
        sock.listen(1024)
        sock.settimeout(POLL_S)
        self.port = sock.getsockname()[1]
        self._sockets.append(sock)
        self._spawn(self._accept, sock)

    def _accept(self, sock: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._spawn(self._session, conn, "%s:%d" % addr)

    def _forward(self, payload: bytes) -> None:
        frame = mqtt.encode_publish(self.echo_topic, payload)
        with self._sub_lock:
            targets = list(self._subscribers.get(self.echo_topic, ()))
        for session in targets:
            session.send(frame)

    def _session(self, conn: socket.socket, source: str) -> None:
        session = _SinkSession(conn)
        reader = mqtt.StreamReader(max_packet=MAX_FRAME)
        conn.settimeout(POLL_S)
        connected = False
        try:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(1 << 16)
                except socket.timeout:
                    continue
                if not chunk:
                    return
                for pkt in reader.feed(chunk):
                    if not connected:
                        if pkt.type != mqtt.PacketType.CONNECT:
                            self.ledger.add("malformed")
                            return
                        req = mqtt.decode_connect(pkt.body)
                        if req.protocol_name != mqtt.PROTOCOL_NAME or req.protocol_level != mqtt.PROTOCOL_LEVEL:
                            session.send(mqtt.encode_connack(mqtt.ConnackCode.UNACCEPTABLE_PROTOCOL_VERSION))
                            return
                        session.send(mqtt.encode_connack(mqtt.ConnackCode.ACCEPTED))
                        connected = True
                    elif pkt.type == mqtt.PacketType.PUBLISH:
                        t = time.monotonic_ns()
                        pub = mqtt.decode_publish(pkt.flags, pkt.body)
                        if pub.topic not in self.accepted:
                            self.ledger.add("other_topic")
                            continue
                        if not self._admit(t):
                            continue
                        self.ledger.record(source, "MQTT", pub.payload, t)
                        if self.ledger.capture:
                            self.ledger.keep_raw(
                                bytes([(pkt.type << 4) | pkt.flags])
                                + mqtt.encode_remaining_length(len(pkt.body))
                                + pkt.body
                            )
                        if self.echo_topic is not None:
                            self._forward(pub.payload)
                            self.ledger.add("echoed_count")
                    elif pkt.type == mqtt.PacketType.SUBSCRIBE:
                        packet_id, filters = mqtt.decode_subscribe(pkt.body)
                        with self._sub_lock:
                            for topic, _ in filters:
                                self._subscribers.setdefault(topic, set()).add(session)
                        session.send(mqtt.encode_suback(packet_id, [0] * len(filters)))
                    elif pkt.type == mqtt.PacketType.PINGREQ:
                        session.send(bytes([mqtt.PacketType.PINGRESP << 4, 0]))
                    elif pkt.type == mqtt.PacketType.DISCONNECT:
                        return
                    else:
                        self.ledger.add("malformed")
                        return
        except (mqtt.MalformedPacket, OSError):
            self.ledger.add("malformed")
        finally:
            with self._sub_lock:
                for subs in self._subscribers.values():
                    subs.discard(session)
            conn.close()


class _SinkSession:
    def __init__(self, conn: socket.socket):
        self.conn = conn
        self.lock = threading.Lock()

    def send(self, frame: bytes) -> None:
        with self.lock:
            try:
                self.conn.sendall(frame)
            except OSError:
                pass


def run_echo(protocol: str, port: int, ledger: Optional[CloudLedger] = None, **kw) -> EchoCloud:
    server = EchoCloud(protocol, port, **kw)
    if ledger is not None:
        server.ledger = ledger
    return server.start()


def run_mqtt_sink(port: int, accepted_topic="pub", ledger: Optional[CloudLedger] = None, **kw) -> MqttSink:
    topics = [accepted_topic] if isinstance(accepted_topic, str) else list(accepted_topic)
    server = MqttSink(port, topics, **kw)
    if ledger is not None:
        server.ledger = ledger
    return server.start()


def throttle(handle: CloudServer, max_packets_per_second: Optional[float]) -> None:
    handle.throttle(max_packets_per_second)


def query(host: str, ctrl_port: int, command: str = "STATS", timeout: float = 10.0):
    """Send one control command; returns parsed JSON or the raw reply line."""
    with socket.create_connection((host, ctrl_port), timeout=timeout) as sock:
        sock.sendall(command.encode("ascii") + b"\n")
        with sock.makefile("rb") as fh:
            line = fh.readline().decode().strip()
    if line.startswith("{"):
        return json.loads(line)
    return line
