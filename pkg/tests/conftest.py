import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from edgestress.dsl import parse  # noqa: E402
from edgestress.planner import resolve  # noqa: E402
from edgestress.testcloud import EchoCloud, MqttSink  # noqa: E402

LOOPBACK_SPEC = """
Cloud: C1 {{
	IP: 127.0.0.1
	port: {port}
}}
Simulator: {{
	duration: {duration}
	step: {step}
	simulationNodes: {{SN1[{nodes}]}}
}}
SimulationNode: SN1 {{
	platform: P1
	offsetRange: {offset}%
	EdgeDevices: {{E1[{edges}]}}
}}
Platform: P1 {{
	type: {platform}
}}
EdgeDevice: E1 {{
	protocol: {protocol}
	speed: {speed}
	cloud: C1
	devices: {{D1[{devices}]}}
}}
Device: D1 {{
	period: {period}
	payload: {payload}
}}
"""


def loopback_spec(port=9000, duration="2s", step="500ms", nodes=1, offset=0, edges=1, platform="Native",
                  protocol="UDP", speed=500, devices=100, period=1, payload="8b", extra=""):
    text = LOOPBACK_SPEC.format(port=port, duration=duration, step=step, nodes=nodes, offset=offset,
                                edges=edges, platform=platform, protocol=protocol, speed=speed,
                                devices=devices, period=period, payload=payload)
    return text + extra


def loopback_plan(cloud, seed=7, **kw):
    kw.setdefault("protocol", getattr(cloud, "protocol", "UDP"))
    return resolve(parse(loopback_spec(port=cloud.port, **kw)), seed)


@pytest.fixture
def udp_echo():
    with EchoCloud("UDP", port=0) as cloud:
        yield cloud


@pytest.fixture
def tcp_echo():
    with EchoCloud("TCP", port=0) as cloud:
        yield cloud


@pytest.fixture
def mqtt_sink():
    with MqttSink(port=0, accepted_topics=["pub"], capture=True) as sink:
        yield sink


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for key in sorted(verdicts, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(verdicts[key])
