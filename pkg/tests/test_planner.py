from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from edgestress import corpus
from edgestress.dsl import parse
from edgestress.errors import ManifestError, ResolveError
from edgestress.planner import (
    MQTT_DEFAULT_PORT,
    SEQ_COUNTER_BITS,
    draw_offset,
    emit_manifest,
    expected_sends,
    load_manifest,
    resolve,
    sends_for_period,
)
from conftest import loopback_spec
from strategies import valid_spec_asts

FIGS = parse(corpus.get("figs-6-10").text)


def brute_force_sends(plan):
    """Walk every step and device literally; no closed forms."""
    counts = {}
    for edge in plan.edges():
        n = 0
        for i in range(plan.step_count):
            for d in edge.devices:
                if i % d.period == 0:
                    n += 1
        counts[edge.edge_id] = n
    return counts


def test_same_seed_gives_identical_manifest():
    assert emit_manifest(resolve(FIGS, 42)) == emit_manifest(resolve(FIGS, 42))


def test_seed_changes_run_id_and_offsets():
    a, b = resolve(FIGS, 1), resolve(FIGS, 2)
    assert a.run_id != b.run_id
    assert [e.offset_ms for e in a.edges()] != [e.offset_ms for e in b.edges()]


def test_figs_expansion():
    plan = resolve(FIGS, 5)
    assert [n.node_id for n in plan.nodes] == [f"SN1#{k}" for k in range(5)] + ["SN2#0"]
    assert len(plan.node("SN1#0").edges) == 10
    assert plan.step_count == 10
    assert plan.node("SN1#0").offset_range_ms == 200
    edge_ids = [e.edge_id for e in plan.edges()]
    assert len(edge_ids) == len(set(edge_ids))
    assert [e.ordinal for e in plan.edges()] == list(range(len(edge_ids)))


def test_gap_is_exact_fraction():
    plan = resolve(parse(loopback_spec(speed=167, step="500ms")), 1)
    gap = next(plan.edges()).gap_ms
    assert gap == Fraction(500, 167)
    assert float(gap) == pytest.approx(2.994, abs=1e-3)
    unpaced = next(resolve(parse(loopback_spec(speed="MAX")), 1).edges())
    assert unpaced.unpaced and unpaced.gap_ms == 0


def test_offsets_stay_in_range():
    plan = resolve(parse(loopback_spec(offset=20, step="1s", edges=50, nodes=4)), 9)
    assert all(0 <= e.offset_ms <= 200 for e in plan.edges())
    zero = resolve(parse(loopback_spec(offset=0, edges=20)), 9)
    assert all(e.offset_ms == 0 for e in zero.edges())


def test_offset_distribution_is_uniform():
    samples = np.array([draw_offset(1234, "SN1#0", k, 200) for k in range(10_000)])
    assert samples.min() >= 0 and samples.max() <= 200
    observed = np.bincount(samples, minlength=201)
    _, p = stats.chisquare(observed)
    assert p > 0.001


def test_offsets_independent_of_draw_order():
    assert draw_offset(7, "SN1#3", 4, 500) == draw_offset(7, "SN1#3", 4, 500)
    plan = resolve(FIGS, 7)
    edge = plan.node("SN1#3").edges[4]
    assert edge.offset_ms == draw_offset(7, "SN1#3", 4, 200)


def test_expected_sends_matches_brute_force_on_corpus():
    for entry in corpus.load_corpus():
        if entry.plan:
            plan = resolve(parse(entry.text), 3)
            assert expected_sends(plan) == brute_force_sends(plan), entry.name


@settings(max_examples=150, deadline=None)
@given(valid_spec_asts(), st.integers(0, 2**64 - 1))
def test_expected_sends_property(ast, seed):
    plan = resolve(ast, seed)
    assert expected_sends(plan) == brute_force_sends(plan)
    assert load_manifest(emit_manifest(plan)) == plan


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(1, 50))
def test_sends_for_period_closed_form(steps, period):
    assert sends_for_period(steps, period) == len([i for i in range(steps) if i % period == 0])


def test_manifest_round_trip_and_rejects_bad_input():
    plan = resolve(FIGS, 11)
    text = emit_manifest(plan)
    assert load_manifest(text) == plan
    with pytest.raises(ManifestError):
        load_manifest("{not json")
    with pytest.raises(ManifestError):
        load_manifest(text.replace('"manifest_version": 1', '"manifest_version": 99'))


def test_sequence_layout_has_room():
    plan = resolve(FIGS, 1)
    top = max(e.ordinal for e in plan.edges())
    sends = max(expected_sends(plan).values())
    assert sends < 2**SEQ_COUNTER_BITS
    assert (top << SEQ_COUNTER_BITS | sends) < 2**64


def test_endpoint_override_and_mqtt_default_port():
    plan = resolve(FIGS, 1, endpoints={"C1": "127.0.0.1:9100"})
    assert (plan.cloud("C1").ip, plan.cloud("C1").port) == ("127.0.0.1", 9100)
    assert plan.cloud("C2").port == MQTT_DEFAULT_PORT
    assert plan.run_id != resolve(FIGS, 1).run_id
    with pytest.raises(ResolveError):
        resolve(FIGS, 1, endpoints={"C9": "x:1"})


def test_seed_must_be_64_bit():
    with pytest.raises(ResolveError):
        resolve(FIGS, -1)
    with pytest.raises(ResolveError):
        resolve(FIGS, 2**64)
