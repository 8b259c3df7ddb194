"""
A lossless loopback run
=======================

Run the scaled RQ1 configuration (2 nodes x 10 edge devices x 100 devices,
speed MAX, 2s in 500ms steps) against the bundled UDP echo cloud and report
SimDrop, CloudDrop and TransTime.
"""
import tempfile
import time

import numpy as np

from edgestress import corpus
from edgestress.dsl import parse
from edgestress.metrics import compute, render
from edgestress.orchestrator import node_results, run_plan
from edgestress.planner import resolve
from edgestress.testcloud import EchoCloud

with EchoCloud("UDP", port=0) as cloud:
    plan = resolve(parse(corpus.get("rq1-scaled").text), seed=1, endpoints={"C1": f"127.0.0.1:{cloud.port}"})
    with tempfile.TemporaryDirectory() as workdir:
        results, handles = run_plan(plan, workdir)
    time.sleep(0.3)
    report = compute(node_results(results), cloud.ledger, label="rq1-scaled")

for h in handles:
    print(h.node_id, h.state.value)
print(render(report))

# send timestamps show how quickly an unpaced edge device empties its step
r = node_results(results)[0]
times = np.array([rec.t_ns for rec in r.edges[0].send_log if rec.step_index == 0])
print("step 0 burst for one edge device: %d sends in %.2f ms" % (times.size, (times[-1] - times[0]) / 1e6))
