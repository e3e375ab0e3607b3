from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from memfl.errors import Ambiguous, MalformedRef, NotFound, ValidationError
from memfl.model import (
    ExternalMemory,
    MethodRef,
    PipelineStep,
    RankedSuspects,
    StaticMemory,
    empty_guidance,
    parse_method_ref,
    resolve_ref,
)

names = st.text(alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"), whitelist_characters="._$<>"),
                min_size=1, max_size=20)


@given(names, names, st.integers(min_value=1, max_value=10**6))
def test_ref_round_trip(cls, meth, line):
    ref = MethodRef(cls, meth, line)
    assert parse_method_ref(str(ref)) == ref


@pytest.mark.parametrize("text", ["A@m", "A@m@x", "A@m@1@2", "@m@1", "A@@1", "A@m@0", "A b@m@1", ""])
def test_malformed_refs(text):
    with pytest.raises(MalformedRef):
        parse_method_ref(text)


def test_resolve_exact_and_fuzzy(snapshot):
    exact = resolve_ref(snapshot, MethodRef("org.mini.math.Fraction", "add", 26))
    assert exact.ref.decl_line == 26
    near = resolve_ref(snapshot, MethodRef("org.mini.math.Fraction", "add", 28), fuzzy=True)
    assert near.ref.decl_line == 26


def test_resolve_overload_needs_fuzzy(snapshot):
    ref = MethodRef("org.mini.text.StringUtils", "join", 35)
    with pytest.raises(Ambiguous):
        resolve_ref(snapshot, ref)
    assert resolve_ref(snapshot, ref, fuzzy=True).ref.decl_line == 40  # 5 away versus 6
    assert resolve_ref(snapshot, MethodRef("org.mini.text.StringUtils", "join", 33), fuzzy=True).ref.decl_line == 29


def test_resolve_unknown(snapshot):
    with pytest.raises(NotFound):
        resolve_ref(snapshot, MethodRef("org.mini.Nope", "x", 1), fuzzy=True)
    with pytest.raises(NotFound):
        resolve_ref(snapshot, MethodRef("org.mini.math.Fraction", "nope", 1))


def test_fuzzy_tie_prefers_smaller_line(snapshot):
    # Validate.inclusiveBetween overloads sit at 21 and 27; 24 is equidistant
    rec = resolve_ref(snapshot, MethodRef("org.mini.util.Validate", "inclusiveBetween", 24), fuzzy=True)
    assert rec.ref.decl_line == 21


def test_ranked_suspects_rejects_duplicates():
    r = MethodRef("A", "m", 1)
    with pytest.raises(ValidationError):
        RankedSuspects("B", [r, r])


def test_ranked_suspects_json_round_trip(bugs, snapshot):
    ref = next(snapshot.iter_methods()).ref
    res = RankedSuspects("B01", [ref], degraded=["confirm"])
    res.telemetry.add(10, 2, 7, 1500)
    back = RankedSuspects.from_json(res.to_json())
    assert back.to_json() == res.to_json()


def test_memory_requires_every_step():
    static = StaticMemory("p", {"A": "a"})
    dyn = empty_guidance()
    dyn.pop(PipelineStep.CONFIRM)
    with pytest.raises(ValidationError):
        ExternalMemory(static, dyn)


def test_memory_json_round_trip_keeps_fingerprint(memory):
    again = ExternalMemory.from_json(memory.to_json())
    assert again.fingerprint == memory.fingerprint


def test_coverage_profile_failing_union(bugs):
    b02 = next(b for b in bugs if b.bug_id == "B02")
    assert b02.coverage.failing_tests == ["org.mini.MathTest::testAddHalves"]
    assert MethodRef("org.mini.math.Fraction", "add", 26) in b02.coverage.covered
    assert MethodRef("org.mini.math.Fraction", "multiply", 30) not in b02.coverage.covered
