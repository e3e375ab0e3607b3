from __future__ import annotations

import json
import logging
from pathlib import Path

import pytest

from memfl.errors import IndexingError, ManifestInvalid, ValidationError
from memfl.index import build_test_index, index_tree, load_bug_cases, scan_java, snapshot_to_json
from memfl.model import MethodRef

from conftest import MINI


def _golden_spans() -> set[tuple[str, str, str, int, int]]:
    rows = set()
    for line in (MINI / "spans.golden.tsv").read_text().splitlines():
        f, cls, meth, decl, end = line.split("\t")
        rows.add((f, cls, meth, int(decl), int(end)))
    return rows


def test_builtin_spans_match_awk_oracle():
    snap = index_tree(MINI, mode="builtin")
    got = {
        (m.file, c.name.rsplit(".", 1)[1], m.ref.method_name, m.ref.decl_line, m.body_span[1])
        for c in snap.classes for m in c.methods
    }
    assert got == _golden_spans()
    assert len(snap.classes) == 8


def test_manifest_and_builtin_agree_on_refs():
    a = index_tree(MINI, mode="manifest")
    b = index_tree(MINI, mode="builtin")
    assert [m.ref for m in a.iter_methods()] == [m.ref for m in b.iter_methods()]


def test_fingerprint_is_stable_and_content_sensitive(mini):
    first = index_tree(mini).index_fingerprint
    assert index_tree(mini).index_fingerprint == first
    src = mini / "src/org/mini/math/Stats.java"
    src.write_text(src.read_text().replace("sum / xs.length", "sum / (double) xs.length"))
    assert index_tree(mini).index_fingerprint != first


def test_snapshot_json_is_deterministic():
    a = json.dumps(snapshot_to_json(index_tree(MINI)), sort_keys=True)
    b = json.dumps(snapshot_to_json(index_tree(MINI)), sort_keys=True)
    assert a == b


def test_scan_handles_braces_in_literals_and_comments():
    text = '''package p;
class A {
    String s = "}{";
    char c = '}';
    /* } */
    void f() {
        // {
        if (true) { g("{"); }
    }
    String t = """
        }}}
        """;
    int h(int x) { return x; }
}
'''
    pkg, classes = scan_java(text)
    assert pkg == "p"
    [a] = classes
    spans = [(m.name, m.decl_line, m.end_line) for m in a.methods]
    assert spans == [("f", 6, 9), ("h", 13, 13)]


def test_scan_names_nested_classes():
    text = "class Outer {\n  void a() {}\n  static class Inner {\n    int b() { return 1; }\n  }\n}\n"
    _, classes = scan_java(text)
    assert sorted(c.name for c in classes) == ["Outer", "Outer$Inner"]


def test_scan_gives_up_on_broken_braces():
    text = "class A {\n" + "  void f() {\n" * 5
    with pytest.raises(IndexingError):
        scan_java(text, recovery_limit=2)


def test_builtin_mode_on_empty_tree(tmp_path):
    with pytest.raises(IndexingError):
        index_tree(tmp_path, mode="builtin")


def test_manifest_mode_needs_manifest(tmp_path):
    with pytest.raises(ManifestInvalid):
        index_tree(tmp_path, mode="manifest")


def test_manifest_errors_carry_json_path(mini):
    doc = json.loads((mini / "manifest.json").read_text())
    doc["classes"][0]["file"] = "src/missing.java"
    (mini / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestInvalid) as info:
        index_tree(mini)
    assert info.value.path == "$.classes[0].file"


def test_manifest_schema_violation(mini):
    doc = json.loads((mini / "manifest.json").read_text())
    doc["classes"][1]["methods"][0]["decl_line"] = 0
    (mini / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestInvalid) as info:
        index_tree(mini)
    assert info.value.path.startswith("$.classes[1].methods[0]")


def test_load_bug_cases(bugs):
    assert [b.bug_id for b in bugs] == [f"B{i:02d}" for i in range(1, 11)]
    b07 = bugs[6]
    assert b07.ground_truth == {MethodRef("org.mini.util.Validate", "inclusiveBetween", 27)}
    assert b07.has_patch
    assert b07.stack_trace[0].class_name == "org.mini.util.Validate"
    assert not b07.stack_trace[0].external
    assert b07.stack_trace[1].external


def test_helper_closure_depth():
    tests = build_test_index(MINI, ["test"], [".java"])
    names = [h.name for h in tests.helper_closure("org.mini.TextTest::testTokenizeDecimal")]
    assert names == [
        "org.mini.TextTest::assertTokens",
        "org.mini.TextTest::assertEquals",
        "org.mini.TextTest::tokenize",
        "org.mini.TextTest::collect",
    ]
    shallow = [h.name for h in tests.helper_closure("org.mini.TextTest::testTokenizeDecimal", depth=1)]
    assert shallow == ["org.mini.TextTest::assertTokens"]


def test_unknown_coverage_ref_is_dropped_with_warning(mini, caplog):
    doc = json.loads((mini / "manifest.json").read_text())
    doc["bugs"][0]["tests"]["org.mini.TextTest::testIsBlankTab"]["covered"].append("org.mini.Nope@x@1")
    (mini / "manifest.json").write_text(json.dumps(doc))
    snap = index_tree(mini)
    with caplog.at_level(logging.WARNING):
        bugs = load_bug_cases(snap, mini)
    assert "covers unknown method" in caplog.text
    assert all(r.class_name != "org.mini.Nope" for r in bugs[0].coverage.covered)


def test_covered_lines_map_to_methods(mini):
    doc = json.loads((mini / "manifest.json").read_text())
    entry = doc["bugs"][0]["tests"]["org.mini.TextTest::testIsBlankTab"]
    entry["covered"] = []
    entry["covered_lines"] = {"src/org/mini/text/StringUtils.java": [22, 59]}
    (mini / "manifest.json").write_text(json.dumps(doc))
    bugs = load_bug_cases(index_tree(mini), mini)
    assert {r.method_name for r in bugs[0].coverage.covered} == {"isBlank", "capitalize"}


def test_bug_without_failing_tests_is_rejected(mini):
    doc = json.loads((mini / "manifest.json").read_text())
    bug = doc["bugs"][0]
    bug["failing_tests"] = []
    for t in bug["tests"].values():
        t["passed"] = True
    (mini / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_bug_cases(index_tree(mini), mini)
