"""
From a specification to a run manifest
======================================

Parse the bundled composite specification, validate it, resolve it into a
plan and look at what the planner decided: instance expansion, pacing gaps
and per-edge start offsets.
"""
from fractions import Fraction

import numpy as np

from edgestress import corpus
from edgestress.dsl import format_spec, parse
from edgestress.planner import emit_manifest, expected_sends, resolve
from edgestress.validator import validate

text = corpus.get("figs-6-10").text
ast = parse(text)
print("diagnostics:", validate(ast) or "none")
print("round trip exact:", parse(format_spec(ast)) == ast)

# seed the offset draw so the manifest is reproducible
plan = resolve(ast, seed=42)
print(plan.run_id, "-", len(plan.nodes), "nodes,", sum(1 for _ in plan.edges()), "edge devices")
for node in plan.nodes:
    print(f"  {node.node_id:6s} platform={node.platform.kind:6s} offsets up to {node.offset_range_ms}ms,"
          f" {len(node.edges)} edges")

# gaps are exact rationals; 500ms / 167 packets is not a whole number of ms
print("gap for speed 167 in a 500ms step:", Fraction(500, 167), "=", float(Fraction(500, 167)), "ms")

# expected sends per edge follow the period rule i mod period == 0
sends = np.array(list(expected_sends(plan).values()))
print("expected sends per edge: min", sends.min(), "max", sends.max(), "total", sends.sum())

# offsets for a bigger draw: 20% of a 1s step means uniform integers in [0, 200]
from edgestress.planner import draw_offset

samples = np.array([draw_offset(42, "SN1#0", k, 200) for k in range(10_000)])
counts, edges = np.histogram(samples, bins=10, range=(0, 201))
for lo, c in zip(edges[:-1], counts):
    print(f"  [{lo:5.1f}, {lo + 20.1:5.1f})  {'#' * (c // 25)} {c}")

manifest = emit_manifest(plan)
print("manifest bytes:", len(manifest))
