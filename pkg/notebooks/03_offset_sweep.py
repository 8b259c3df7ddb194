"""
Offset range against SimDrop
============================

Repeat the RQ2 experiment at desk scale: for one node count, sweep the
offsetRange from 0% to 80% and tabulate SimDrop/CloudDrop/TransTime per
configuration. Pass the node count as the first argument (default 8); on a
single-CPU host SimDrop starts to appear around 32 nodes.
"""
import sys
import tempfile
import time

from edgestress import corpus
from edgestress.dsl import parse
from edgestress.metrics import compute, render
from edgestress.orchestrator import node_results, run_plan
from edgestress.planner import resolve
from edgestress.testcloud import EchoCloud

nodes = int(sys.argv[1]) if len(sys.argv) > 1 else 8
reports = []
for pct in (0, 20, 40, 60, 80):
    text = corpus.get(f"rq2-offset-{pct}").text.replace("SN1[2]", f"SN1[{nodes}]")
    with EchoCloud("UDP", port=0) as cloud:
        plan = resolve(parse(text), seed=pct, endpoints={"C1": f"127.0.0.1:{cloud.port}"})
        with tempfile.TemporaryDirectory() as workdir:
            results, _ = run_plan(plan, workdir)
        time.sleep(0.3)
        reports.append(compute(node_results(results), cloud.ledger, label=f"{nodes} nodes, offset {pct}%"))

print(render(reports))
