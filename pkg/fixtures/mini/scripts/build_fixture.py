"""Regenerate the mini-project fixture artifacts.

Run from the repository root:

    python3 fixtures/mini/scripts/build_fixture.py

Writes manifest.json, script.json, memory.json, the two replay cassettes and
the golden prompt files. The Java sources and the bug table below are the
hand-authored inputs; everything else is derived from them.
"""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

from memfl.index import index_tree, load_bug_cases, scan_java
from memfl.llm import Gateway, PriceTable, RecordingProvider, ScriptedProvider, write_cassette
from memfl.config import DEFAULT_PRICES
from memfl.evaluation import EvalConfig, cross_validate
from memfl.memory import apply_refinement, build_static_memory, save_memory
from memfl.model import PipelineStep
from memfl.pipeline import PipelineConfig, localize_many

ROOT = Path(__file__).resolve().parents[1]
LATENCY = 0.25  # seconds per scripted reply

PKG = {
    "StringUtils": "org.mini.text", "Tokenizer": "org.mini.text", "Fraction": "org.mini.math",
    "Stats": "org.mini.math", "Duration": "org.mini.time", "CsvParser": "org.mini.io",
    "Validate": "org.mini.util", "RingBuffer": "org.mini.collect",
}

SUMMARIES = {
    "StringUtils": "Static string helpers: blank checks, joining arrays and lists with a separator, "
                   "reversing, wrapping in braces and capitalizing.",
    "Tokenizer": "Cursor-based tokenizer for arithmetic expressions. Produces numbers, identifiers and "
                 "single-character symbols, skipping whitespace.",
    "Fraction": "Immutable rational number with long numerator and denominator. Supports addition, "
                "multiplication, reduction by gcd, comparison and formatting.",
    "Stats": "Descriptive statistics over arrays: mean, population variance, median and maximum "
             "(int and double overloads).",
    "Duration": "Signed span of seconds with addition, conversion to whole minutes and m:ss formatting.",
    "CsvParser": "Splits one CSV line into fields honoring double quotes, then strips the surrounding quotes.",
    "Validate": "Argument checks that throw IllegalArgumentException: null checks, boolean conditions, "
                "inclusive range checks for int and long, non-empty strings.",
    "RingBuffer": "Fixed-capacity FIFO backed by an array; overwrites the oldest element when full.",
}
PROJECT_SUMMARY = ("mini is a small utility library with string helpers, an expression tokenizer, rational "
                   "numbers, statistics, durations, CSV parsing, argument validation and a ring buffer.")


def m(cls: str, name: str, nth: int = 1) -> tuple[str, str, int]:
    return (cls, name, nth)


# Authored bug table. Methods are (class, method, n-th overload); lines come from the sources.
BUGS = [
    dict(
        id="B01", project="Text", test="org.mini.TextTest::testIsBlankTab",
        error="java.lang.AssertionError: tab-only string is blank",
        trace=[("org.mini.TextTest", "assertTrue", "TextTest.java:55"),
               ("org.mini.TextTest", "testIsBlankTab", "TextTest.java:13")],
        covers=[m("StringUtils", "isBlank"), m("Validate", "isTrue")],
        passing={"org.mini.TextTest::testCapitalize": [m("StringUtils", "isBlank"), m("StringUtils", "capitalize")]},
        truth=m("StringUtils", "isBlank"),
        patch="if (!Character.isWhitespace(s.charAt(i))) {",
        stage1=["StringUtils", "Validate"], stage2=["StringUtils"],
        methods={"StringUtils": [m("StringUtils", "isBlank")]},
        ranking=[m("StringUtils", "isBlank")],
    ),
    dict(
        id="B02", project="Math", test="org.mini.MathTest::testAddHalves",
        error="java.lang.AssertionError: expected:<5/6> but was:<1>",
        trace=[("org.mini.MathTest", "check", "MathTest.java:45"),
               ("org.mini.MathTest", "assertFraction", "MathTest.java:37"),
               ("org.mini.MathTest", "testAddHalves", "MathTest.java:9")],
        covers=[m("Fraction", "Fraction"), m("Fraction", "add"), m("Fraction", "reduce"), m("Fraction", "gcd"),
                m("Fraction", "toString"), m("Stats", "mean")],
        passing={"org.mini.MathTest::testMultiply": [m("Fraction", "Fraction"), m("Fraction", "multiply"),
                                                     m("Fraction", "reduce"), m("Fraction", "gcd"),
                                                     m("Fraction", "toString")]},
        truth=m("Fraction", "add"),
        patch="return new Fraction(num * o.den + o.num * den, den * o.den).reduce();",
        stage1=["Fraction", "Stats"], stage2=["Fraction"],
        methods={"Fraction": [m("Fraction", "add"), m("Fraction", "reduce"), m("Fraction", "gcd")]},
        ranking=[m("Fraction", "add"), m("Fraction", "reduce"), m("Fraction", "gcd")],
    ),
    dict(
        id="B03", project="Math", test="org.mini.MathTest::testMedianEven",
        error="java.lang.AssertionError: expected:<2.5> but was:<3.0>",
        trace=[("org.mini.MathTest", "check", "MathTest.java:45"),
               ("org.mini.MathTest", "assertClose", "MathTest.java:41"),
               ("org.mini.MathTest", "testMedianEven", "MathTest.java:21")],
        covers=[m("Stats", "median"), m("Stats", "max", 2)],
        passing={"org.mini.MathTest::testMeanAndVariance": [m("Stats", "mean"), m("Stats", "variance")]},
        truth=m("Stats", "median"),
        patch="return copy.length % 2 == 0 ? (copy[mid - 1] + copy[mid]) / 2 : copy[mid];",
        stage1=["Stats"], stage2=["Stats"],
        methods={"Stats": [m("Stats", "median"), m("Stats", "max", 2)]},
        ranking=[m("Stats", "median"), m("Stats", "max", 2)],
    ),
    dict(
        id="B04", project="Misc", test="org.mini.MiscTest::testToMinutesTruncates",
        error="java.lang.AssertionError: expected:<1> but was:<2>",
        trace=[("org.mini.MiscTest", "expect", "MiscTest.java:57"),
               ("org.mini.MiscTest", "testToMinutesTruncates", "MiscTest.java:13")],
        covers=[m("Duration", "Duration"), m("Duration", "ofSeconds"), m("Duration", "toMinutes")],
        passing={"org.mini.MiscTest::testFormat": [m("Duration", "Duration"), m("Duration", "ofSeconds"),
                                                   m("Duration", "format"), m("Duration", "isNegative")]},
        truth=m("Duration", "toMinutes"),
        patch="return seconds / 60;",
        stage1=["Duration"], stage2=["Duration"],
        methods={"Duration": [m("Duration", "toMinutes"), m("Duration", "ofSeconds")]},
        ranking=[m("Duration", "toMinutes"), m("Duration", "ofSeconds")],
    ),
    dict(
        id="B05", project="Misc", test="org.mini.MiscTest::testUnquoteEscaped",
        error="java.lang.AssertionError: expected:<a\"b> but was:<a\"\"b>",
        trace=[("org.mini.MiscTest", "expect", "MiscTest.java:57"),
               ("org.mini.MiscTest", "testUnquoteEscaped", "MiscTest.java:22")],
        covers=[m("CsvParser", "CsvParser"), m("CsvParser", "parseLine"), m("CsvParser", "splitFields"),
                m("CsvParser", "unquote"), m("CsvParser", "isQuote"), m("StringUtils", "isBlank")],
        passing={"org.mini.MiscTest::testParsePlain": [m("CsvParser", "CsvParser"), m("CsvParser", "parseLine"),
                                                       m("CsvParser", "splitFields"), m("CsvParser", "unquote"),
                                                       m("CsvParser", "isQuote")]},
        truth=m("CsvParser", "unquote"),
        patch='return field.substring(1, field.length() - 1).replace("\\"\\"", "\\"");',
        stage1=["CsvParser", "StringUtils"], stage2=["CsvParser"],
        methods={"CsvParser": [m("CsvParser", "unquote"), m("CsvParser", "splitFields")]},
        ranking=[m("CsvParser", "unquote"), m("CsvParser", "splitFields")],
    ),
    dict(
        id="B06", project="Text", test="org.mini.TextTest::testTokenizeDecimal",
        error="java.lang.AssertionError: expected:<[max, (, 2.5, )]> but was:<[max, (, 2, ., 5, )]>",
        trace=[("org.mini.TextTest", "assertEquals", "TextTest.java:61"),
               ("org.mini.TextTest", "assertTokens", "TextTest.java:38"),
               ("org.mini.TextTest", "testTokenizeDecimal", "TextTest.java:29")],
        covers=[m("Tokenizer", "Tokenizer"), m("Tokenizer", "hasNext"), m("Tokenizer", "next"),
                m("Tokenizer", "skipWhitespace"), m("Tokenizer", "readNumber"), m("Tokenizer", "readIdentifier")],
        passing={"org.mini.TextTest::testTokenizeIdentifiers": [
            m("Tokenizer", "Tokenizer"), m("Tokenizer", "hasNext"), m("Tokenizer", "next"),
            m("Tokenizer", "skipWhitespace"), m("Tokenizer", "readNumber"), m("Tokenizer", "readIdentifier")]},
        truth=m("Tokenizer", "readNumber"),
        patch="while (pos < input.length() && (Character.isDigit(input.charAt(pos)) || input.charAt(pos) == '.')) {",
        stage1=["Tokenizer"], stage2=["Tokenizer"],
        methods={"Tokenizer": [m("Tokenizer", "readNumber"), m("Tokenizer", "next")]},
        ranking=[m("Tokenizer", "readNumber"), m("Tokenizer", "next")],
    ),
    dict(
        id="B07", project="Misc", test="org.mini.MiscTest::testInclusiveBetweenLong",
        error="java.lang.IllegalArgumentException: value 1 not in [1, 5]",
        trace=[("org.mini.util.Validate", "inclusiveBetween", "Validate.java:29"),
               ("org.mini.MiscTest", "testInclusiveBetweenLong", "MiscTest.java:30")],
        covers=[m("Validate", "inclusiveBetween", 2)],
        passing={"org.mini.MiscTest::testNotEmpty": [m("Validate", "notEmpty"), m("Validate", "notNull"),
                                                     m("Validate", "isTrue")]},
        truth=m("Validate", "inclusiveBetween", 2),
        patch="if (value < lo || value > hi) {",
        stage1=["Validate"], stage2=["Validate"],
        methods={"Validate": [m("Validate", "inclusiveBetween", 2), m("Validate", "inclusiveBetween", 1)]},
        ranking=[m("Validate", "inclusiveBetween", 2), m("Validate", "inclusiveBetween", 1)],
    ),
    dict(
        id="B08", project="Misc", test="org.mini.MiscTest::testRingWrap",
        error="java.lang.AssertionError: expected:<2> but was:<4>",
        trace=[("org.mini.MiscTest", "expect", "MiscTest.java:57"),
               ("org.mini.MiscTest", "testRingWrap", "MiscTest.java:39")],
        covers=[m("RingBuffer", "RingBuffer"), m("RingBuffer", "add"), m("RingBuffer", "get"),
                m("Validate", "notNull")],
        passing={},
        truth=m("RingBuffer", "add"),
        patch="int tail = (head + size) % items.length;",
        stage1=["RingBuffer", "Validate"], stage2=["RingBuffer"],
        methods={"RingBuffer": [m("RingBuffer", "add"), m("RingBuffer", "get")]},
        ranking=[m("RingBuffer", "add"), m("RingBuffer", "get")],
    ),
    # ground truth at rank 2: the model prefers the array overload
    dict(
        id="B09", project="Text", test="org.mini.TextTest::testJoinList",
        error="java.lang.AssertionError: expected:<a,b> but was:<a,b,>",
        trace=[("org.mini.TextTest", "assertEquals", "TextTest.java:61"),
               ("org.mini.TextTest", "testJoinList", "TextTest.java:17")],
        covers=[m("StringUtils", "join", 2)],
        passing={"org.mini.TextTest::testJoinArray": [m("StringUtils", "join", 1)]},
        truth=m("StringUtils", "join", 2),
        patch="return String.join(sep, parts);",
        stage1=["StringUtils"], stage2=["StringUtils"],
        methods={"StringUtils": [m("StringUtils", "join", 1), m("StringUtils", "join", 2)]},
        ranking=[m("StringUtils", "join", 1), m("StringUtils", "join", 2)],
    ),
    # ground-truth class lost in class condensation stage 2
    dict(
        id="B10", project="Math", test="org.mini.MathTest::testReduceNegative",
        error="java.lang.AssertionError: expected:<1/2> but was:<-1/-2>",
        trace=[("org.mini.MathTest", "check", "MathTest.java:45"),
               ("org.mini.MathTest", "assertFraction", "MathTest.java:37"),
               ("org.mini.MathTest", "testReduceNegative", "MathTest.java:17")],
        covers=[m("Fraction", "Fraction"), m("Fraction", "reduce"), m("Fraction", "gcd"),
                m("Fraction", "toString"), m("Validate", "notNull"), m("Validate", "isTrue")],
        passing={"org.mini.MathTest::testMultiply": [m("Fraction", "Fraction"), m("Fraction", "multiply"),
                                                     m("Fraction", "reduce"), m("Fraction", "gcd"),
                                                     m("Fraction", "toString")]},
        truth=m("Fraction", "reduce"),
        patch="long g = gcd(num, den) * Long.signum(den);",
        stage1=["Validate", "Fraction"], stage2=["Validate"],
        methods={"Validate": [m("Validate", "notNull"), m("Validate", "isTrue")]},
        ranking=[m("Validate", "isTrue"), m("Validate", "notNull")],
    ),
]

REPORT = """### Failure summary
The failing test observes a wrong value produced by the faulty method.
### Root cause
A boundary or arithmetic slip in a single method body.
### Debugging hints
Start from the assertion message, map the expected value back to the method that computes it, and check its edge cases first."""

GUIDANCE = {
    "review": "Relate the assertion message to the single method that computes the checked value; "
              "ignore test helpers.",
    "confirm": "Rank first the method whose arithmetic or boundary check directly produces the asserted value.",
}


def qualified(cls: str) -> str:
    return f"{PKG[cls]}.{cls}"


def manifest_classes() -> list[dict]:
    out = []
    for path in sorted((ROOT / "src").rglob("*.java")):
        rel = path.relative_to(ROOT).as_posix()
        _, scanned = scan_java(path.read_text(encoding="utf-8"))
        for sc in scanned:
            out.append({
                "name": sc.name,
                "file": rel,
                "span": [sc.start_line, sc.end_line],
                "methods": [
                    {"name": sm.name, "decl_line": sm.decl_line, "span": [sm.start_line, sm.end_line], "doc": sm.doc}
                    for sm in sorted(sc.methods, key=lambda x: x.decl_line)
                ],
            })
    return sorted(out, key=lambda c: c["name"])


def resolver(classes: list[dict]):
    by_name = {c["name"]: c for c in classes}

    def ref(spec: tuple[str, str, int]) -> str:
        cls, name, nth = spec
        methods = [x for x in by_name[qualified(cls)]["methods"] if x["name"] == name]
        return f"{qualified(cls)}@{name}@{methods[nth - 1]['decl_line']}"

    return ref


def write_manifest() -> list[dict]:
    classes = manifest_classes()
    ref = resolver(classes)
    bugs = []
    for b in BUGS:
        tests = {b["test"]: {"passed": False, "covered": [ref(x) for x in b["covers"]]}}
        for name, cov in b["passing"].items():
            tests[name] = {"passed": True, "covered": [ref(x) for x in cov]}
        bugs.append({
            "id": b["id"],
            "project": b["project"],
            "error_message": b["error"],
            "stack_trace": [f"at {c}.{meth}({loc})" for c, meth, loc in b["trace"]],
            "failing_tests": [b["test"]],
            "tests": tests,
            "ground_truth": [ref(b["truth"])],
            "patches": {ref(b["truth"]): b["patch"]},
        })
    manifest = {
        "project_name": "mini",
        "source_roots": ["src"],
        "test_roots": ["test"],
        "extensions": [".java"],
        "classes": classes,
        "bugs": bugs,
    }
    (ROOT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return classes


def script_rules(classes: list[dict], *, no_update: bool = False) -> list[dict]:
    ref = resolver(classes)
    rules: list[dict] = []
    if no_update:
        rules.append({"match": r".*/refine/.*", "replies": ["NO_UPDATE"], "repeat": True})
    else:
        for step in ("review", "confirm"):
            rules.append({"match": rf".*it1/refine/{step}/.*", "replies": [GUIDANCE[step]], "repeat": True})
        rules.append({"match": r".*/refine/.*", "replies": ["NO_UPDATE: current guidance already covers this"],
                      "repeat": True})
    rules.append({"match": r".*report/.*", "replies": [REPORT], "repeat": True})
    for cls, text in SUMMARIES.items():
        rules.append({"match": rf"summarize/class/{qualified(cls)}", "replies": [text], "repeat": True})
    rules.append({"match": r"summarize/project", "replies": [PROJECT_SUMMARY], "repeat": True})
    for b in BUGS:
        bid = b["id"]
        suspect = ref(b["truth"]).split("@")[0].rsplit(".", 1)[1]
        rules.append({"match": rf"(?:.*/)?review/{bid}", "repeat": True, "replies": [
            f"The test {b['test'].split('::')[1]} fails with: {b['error'].split(': ', 1)[1]}. "
            f"The checked value is computed inside {suspect}, so its methods are the prime suspects."]})
        rules.append({"match": rf"(?:.*/)?condense1/{bid}", "repeat": True,
                      "replies": [json.dumps([qualified(c) for c in b["stage1"]])]})
        rules.append({"match": rf"(?:.*/)?condense2/{bid}", "repeat": True,
                      "replies": ["```json\n" + json.dumps([qualified(c) for c in b["stage2"]]) + "\n```"]})
        for cls, methods in b["methods"].items():
            picks = ["@".join(ref(x).split("@")[1:]) for x in methods]
            rules.append({"match": rf"(?:.*/)?condense3/{bid}/{qualified(cls)}", "repeat": True,
                          "replies": [json.dumps(picks)]})
        ranking = [ref(x) for x in b["ranking"]]
        rules.append({"match": rf"(?:.*/)?confirm/{bid}", "repeat": True,
                      "replies": ["Most suspicious first:\n```json\n" + json.dumps(ranking, indent=1) + "\n```"]})
    return rules


def write_script(name: str, rules: list[dict]) -> Path:
    path = ROOT / name
    path.write_text(json.dumps({"rules": rules, "latency": LATENCY}, indent=1) + "\n", encoding="utf-8")
    return path


def gateway(script: Path) -> tuple[Gateway, RecordingProvider]:
    rec = RecordingProvider(ScriptedProvider.from_file(script))
    return Gateway(rec, prices=PriceTable(DEFAULT_PRICES)), rec


def tuned(memory):
    """The committed static memory plus guidance for every step, used for golden prompts."""
    for step in PipelineStep:
        memory = apply_refinement(memory, step, f"Guidance for {step.value}: check the asserted value first.", {})
    return memory


def write_golden_prompts(snapshot, bugs, memory, script: Path) -> None:
    out = ROOT / "golden"
    if out.exists():
        shutil.rmtree(out)
    bug = next(b for b in bugs if b.bug_id == "B02")
    for variant in ("full", "review", "condense", "dynamic"):
        provider = ScriptedProvider.from_file(script)
        cfg = PipelineConfig() if variant == "full" else PipelineConfig().ablate(variant)
        localize_many([bug], snapshot, tuned(memory), Gateway(provider), cfg, workers=1)
        for req in provider.requests:
            path = out / variant / (req.tag.replace("/", "__") + ".txt")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(render_request(req), encoding="utf-8")


def render_request(req) -> str:
    return "".join(f"=== {role} ===\n{content}" for role, content in req.messages)


def main() -> int:
    classes = write_manifest()
    script = write_script("script.json", script_rules(classes))
    write_script("script-noupdate.json", script_rules(classes, no_update=True))
    snapshot = index_tree(ROOT)
    bugs = load_bug_cases(snapshot, ROOT)

    gw, _ = gateway(script)
    memory = build_static_memory(snapshot, gw)
    save_memory(memory, ROOT / "memory.json")

    gw, rec = gateway(script)
    cross_validate(snapshot, bugs, memory, gw, EvalConfig(folds=5, seed=0, workers=4))
    write_cassette(ROOT / "cassette-eval.jsonl", rec.entries)

    gw, rec = gateway(script)
    localize_many(bugs, snapshot, memory, gw)
    write_cassette(ROOT / "cassette-localize.jsonl", rec.entries)

    write_golden_prompts(snapshot, bugs, memory, script)
    print(f"fixture regenerated under {ROOT}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
