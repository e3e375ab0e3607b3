from __future__ import annotations

import json
from dataclasses import replace
from fractions import Fraction

import pytest

from memfl.errors import InvalidBatch, LeakageError, MissingPatch
from memfl.llm import Gateway, ScriptedProvider
from memfl.memgen import (
    build_dynamic_memory,
    compute_condense_metrics,
    generate_bug_report,
    select_training_batch,
)
from memfl.model import MethodRef, PipelineStep
from memfl.pipeline import CondensationState

from conftest import MINI


def _gateway(extra_rules=(), base="script-noupdate.json") -> Gateway:
    doc = json.loads((MINI / base).read_text())
    return Gateway(ScriptedProvider(list(extra_rules) + doc["rules"], latency=doc["latency"]))


def test_batch_selection_is_seeded(bugs):
    a = [b.bug_id for b in select_training_batch(bugs, 5, seed=7)]
    assert a == [b.bug_id for b in select_training_batch(bugs, 5, seed=7)]
    assert a == sorted(a) and len(set(a)) == 5
    assert len({tuple(b.bug_id for b in select_training_batch(bugs, 5, seed=s)) for s in range(10)}) > 1
    with pytest.raises(InvalidBatch):
        select_training_batch(bugs, 11, seed=0)
    with pytest.raises(InvalidBatch):
        select_training_batch(bugs, 0, seed=0)


def test_all_no_update_is_a_fixed_point(bugs, snapshot, memory):
    result = build_dynamic_memory(bugs, snapshot, memory, _gateway(), batch_size=5, iterations=3, seed=0)
    assert result.memory.fingerprint == memory.fingerprint
    assert result.iterations_run == 1 and result.converged
    assert all(e["decision"] == "no_update" for e in result.events)


def test_single_update_bumps_version_once(bugs, snapshot, memory):
    rule = {"match": r".*it1/refine/review/.*", "replies": ["Check the assertion first.", "NO_UPDATE"],
            "repeat": True}
    result = build_dynamic_memory(bugs, snapshot, memory, _gateway([rule]), batch_size=5, iterations=3, seed=0)
    assert result.memory.version == memory.version + 1
    assert len(result.memory.provenance) == len(memory.provenance) + 1
    assert result.memory.provenance[-1].step is PipelineStep.REVIEW
    assert result.memory.guidance(PipelineStep.REVIEW) == "Check the assertion first."
    assert result.iterations_run == 2 and result.converged


def test_version_bound_per_iteration(bugs, snapshot, memory):
    # every refinement call proposes fresh text, so every step updates in every iteration
    rule = {"match": r".*/refine/.*", "replies": [f"guidance {i}" for i in range(200)]}
    gw = _gateway([rule])
    result = build_dynamic_memory(bugs, snapshot, memory, gw, batch_size=5, iterations=3, seed=0)
    assert result.memory.version == memory.version + 3 * 5
    assert result.iterations_run == 3 and not result.converged
    refine_calls = [e for e in gw.ledger if "/refine/" in e.request.tag]
    assert len(refine_calls) == 3 * 5 * 5


def test_training_refuses_evaluation_bugs(bugs, snapshot, memory):
    with pytest.raises(LeakageError):
        build_dynamic_memory(bugs, snapshot, memory, _gateway(), evaluation_ids=["B03"])


def test_bugs_without_patch_are_skipped(bugs, snapshot, memory):
    stripped = [replace(b, patched_bodies=None) if b.bug_id in {"B01", "B02"} else b for b in bugs]
    with pytest.raises(MissingPatch):
        generate_bug_report(stripped[0], snapshot, memory, _gateway())
    result = build_dynamic_memory(stripped, snapshot, memory, _gateway(), batch_size=5, seed=0)
    assert len(result.batch) == 5 and not {"B01", "B02"} & set(result.batch)


def test_bug_report_sections(bugs, snapshot, memory):
    report = generate_bug_report(bugs[0], snapshot, memory, _gateway())
    assert report.failure_summary.startswith("The failing test")
    assert report.root_cause and report.debugging_hints
    assert report.buggy_methods[0].ref == MethodRef("org.mini.text.StringUtils", "isBlank", 17)


def test_condense_metrics():
    truth = {MethodRef("A", "f", 3)}
    state = CondensationState(["A", "B", "C"], ["A", "B"], ["B"], [MethodRef("B", "g", 1)])
    m = compute_condense_metrics(state, truth)
    assert (m[PipelineStep.CONDENSE1].recall, m[PipelineStep.CONDENSE1].precision) == (1, Fraction(1, 2))
    assert (m[PipelineStep.CONDENSE2].recall, m[PipelineStep.CONDENSE2].precision) == (0, 0)
    assert m[PipelineStep.CONDENSE3].relevant == 0
    empty = compute_condense_metrics(CondensationState(), truth)
    assert empty[PipelineStep.CONDENSE3].precision == 0


def test_memgen_log_is_serializable(bugs, snapshot, memory):
    result = build_dynamic_memory(bugs, snapshot, memory, _gateway(base="script.json"), batch_size=3, seed=1)
    log = json.loads(json.dumps(result.to_log()))
    assert log["final_version"] == 2
    assert {e["step"] for e in log["events"]} == {s.value for s in PipelineStep}
