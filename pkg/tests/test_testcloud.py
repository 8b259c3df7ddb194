import math
import socket
import struct
import threading
import time

import pytest

from edgestress.errors import BindError
from edgestress.testcloud import EchoCloud, MqttSink, TokenBucket, host_id, query
from edgestress.transport import Endpoint, PayloadFactory, connect, mqtt
from test_transport import wait_for


def send_udp(port, n, size=16, start=0):
    factory = PayloadFactory(size)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        for k in range(start, start + n):
            s.sendto(factory.encode(k), ("127.0.0.1", port))


def test_udp_echo_counts_and_reflects(udp_echo):
    factory = PayloadFactory(16)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.settimeout(2.0)
        for k in range(400):
            s.sendto(factory.encode(k), ("127.0.0.1", udp_echo.port))
            s.recv(64)
    # the echo counter is bumped just after the reply leaves
    assert wait_for(lambda: udp_echo.stats()["echoed_count"] == 400)
    assert udp_echo.stats()["received_count"] == 400


def test_two_senders_sum_and_are_attributed(udp_echo):
    send_udp(udp_echo.port, 100)
    send_udp(udp_echo.port, 150, start=1000)
    assert wait_for(lambda: udp_echo.ledger.received_count == 250)
    per_source = udp_echo.stats()["per_source"]
    assert sorted(per_source.values()) == [100, 150]
    assert all(k.endswith("/UDP") for k in per_source)


def test_tcp_frames_and_malformed_frame(tcp_echo):
    factory = PayloadFactory(16)
    with socket.create_connection(("127.0.0.1", tcp_echo.port)) as s:
        for k in range(10):
            data = factory.encode(k)
            s.sendall(struct.pack(">I", len(data)) + data)
        assert wait_for(lambda: tcp_echo.ledger.received_count == 10)
        s.sendall(struct.pack(">I", 0xFFFFFFFF))
        s.settimeout(2.0)
        drained = b""
        while True:
            chunk = s.recv(4096)
            if not chunk:
                break
            drained += chunk
    assert tcp_echo.stats()["malformed"] == 1
    # the healthy frames were echoed before the connection was dropped
    assert len(drained) == 10 * (4 + 16)


def test_mqtt_sink_many_publishers(mqtt_sink):
    errors = []

    def publisher(k):
        try:
            with connect(Endpoint("MQTT", "127.0.0.1", mqtt_sink.port, pub_topic="pub")) as conn:
                conn.send_bytes(PayloadFactory(16).encode(k), seq=k)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=publisher, args=(k,)) for k in range(320)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert wait_for(lambda: mqtt_sink.ledger.received_count == 320, timeout=10)
    assert sorted(r[0] for r in mqtt_sink.ledger.snapshot(True)["records"]) == list(range(320))


def test_mqtt_other_topic_is_counted_not_received(mqtt_sink):
    with connect(Endpoint("MQTT", "127.0.0.1", mqtt_sink.port, pub_topic="elsewhere")) as conn:
        for k in range(5):
            conn.send_bytes(PayloadFactory(16).encode(k))
    assert wait_for(lambda: mqtt_sink.stats()["other_topic"] == 5)
    assert mqtt_sink.ledger.received_count == 0


def test_mqtt_bad_protocol_level_gets_connack_1(mqtt_sink):
    with socket.create_connection(("127.0.0.1", mqtt_sink.port)) as s:
        s.sendall(mqtt.encode_connect("x", protocol_level=3))
        s.settimeout(2.0)
        reply = s.recv(16)
    assert reply == mqtt.encode_connack(mqtt.ConnackCode.UNACCEPTABLE_PROTOCOL_VERSION)
    assert reply[3] == 1


def test_mqtt_capture_keeps_wire_frames(mqtt_sink):
    with connect(Endpoint("MQTT", "127.0.0.1", mqtt_sink.port, pub_topic="pub")) as conn:
        conn.send_bytes(b"\x00" * 8 + b"hello")
    assert wait_for(lambda: len(mqtt_sink.ledger.captured) == 1)
    assert mqtt_sink.ledger.captured[0] == mqtt.encode_publish("pub", b"\x00" * 8 + b"hello")


def test_throttle_admits_configured_rate():
    rate, offered, seconds = 400, 1000, 2.0
    with EchoCloud("UDP", port=0, throttle_pps=rate) as cloud:
        factory = PayloadFactory(16)
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            start = time.monotonic()
            for k in range(int(offered * seconds)):
                target = start + k / offered
                while time.monotonic() < target:
                    time.sleep(0.0005)
                s.sendto(factory.encode(k), ("127.0.0.1", cloud.port))
        assert wait_for(lambda: cloud.ledger.received_count + cloud.stats()["dropped"] == offered * seconds)
        accepted = cloud.ledger.received_count
    assert abs(accepted - rate * seconds) <= 0.10 * rate * seconds


def test_token_bucket_extremes():
    assert not TokenBucket(0).allow(1)
    closed = EchoCloud("UDP", port=0, throttle_pps=0)
    with closed:
        send_udp(closed.port, 20)
        assert wait_for(lambda: closed.stats()["dropped"] == 20)
        assert closed.ledger.received_count == 0
    with EchoCloud("UDP", port=0, throttle_pps=math.inf) as open_:
        send_udp(open_.port, 200)
        assert wait_for(lambda: open_.ledger.received_count == 200)
        assert open_.stats()["dropped"] == 0


def test_control_endpoint(udp_echo):
    send_udp(udp_echo.port, 12)
    assert wait_for(lambda: udp_echo.ledger.received_count == 12)
    stats = query("127.0.0.1", udp_echo.ctrl_port, "STATS")
    assert stats["received_count"] == 12 and stats["mode"] == "udp-echo"
    assert stats["host"] == host_id()
    records = query("127.0.0.1", udp_echo.ctrl_port, "RECORDS")
    assert sorted(r[0] for r in records["records"]) == list(range(12))
    assert query("127.0.0.1", udp_echo.ctrl_port, "RESET") == "OK"
    assert query("127.0.0.1", udp_echo.ctrl_port, "STATS")["received_count"] == 0
    assert query("127.0.0.1", udp_echo.ctrl_port, "BOGUS").startswith("ERR")


def test_port_in_use_raises_bind_error(tcp_echo):
    with pytest.raises(BindError):
        EchoCloud("TCP", port=tcp_echo.port).start()
