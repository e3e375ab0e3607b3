"""Build ProjectSnapshots and BugCases from disk.

Two ingestion modes:

* ``manifest``: ``manifest.json`` at the project root declares every class and
  method span (see ``docs/manifest.md``). This is the format external
  pre-processing scripts emit for real benchmarks.
* ``builtin``: a small brace-aware scanner for Java-like sources. It copes with
  nested classes, comments and string/char/text-block literals. Annotations
  whose arguments contain braces and some exotic generic signatures are not
  handled.

Bug entries always come from the manifest's ``bugs`` list.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import jsonschema

from memfl.errors import IndexingError, ManifestInvalid, UnresolvedCoverage, ValidationError
from memfl.model import (
    BugCase,
    ClassRecord,
    CoverageProfile,
    FailingTest,
    MethodRecord,
    MethodRef,
    ProjectSnapshot,
    StackFrame,
    TestMethodSource,
    parse_method_ref,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DEFAULT_EXTENSIONS = (".java",)
HELPER_DEPTH = 3

_MODIFIERS = {
    "public", "private", "protected", "static", "final", "abstract", "synchronized",
    "native", "default", "strictfp", "transient", "volatile", "sealed", "non-sealed",
}
_NOT_METHODS = {
    "if", "for", "while", "switch", "catch", "synchronized", "try", "else", "do",
    "return", "new", "throw", "super", "this", "case", "assert",
}
_CLASS_RE = re.compile(r"(?:^|[\s;])(?:class|interface|enum|record)\s+([A-Za-z_$][\w$]*)")
_ANNOTATION_RE = re.compile(r"@(?!interface\b)[\w$]+(?:\.[\w$]+)*(?:\s*\([^()]*\))?")
_METHOD_RE = re.compile(
    r"^(?P<pre>.*?)(?P<name>[A-Za-z_$][\w$]*)\s*\((?P<params>.*)\)\s*(?:\[\s*\])*\s*(?:throws\s+[\w$.,\s<>?]+)?$",
    re.S,
)
_PACKAGE_RE = re.compile(r"^\s*package\s+([\w.]+)\s*$")
_CALL_RE = re.compile(r"\b([A-Za-z_$][\w$]*)\s*\(")
_FRAME_RE = re.compile(r"(?:at\s+)?([\w$.]+)\.([\w$<>]+)\(([^)]*)\)")


# ---------------------------------------------------------------------------
# builtin scanner
# ---------------------------------------------------------------------------


@dataclass
class ScannedMethod:
    name: str
    decl_line: int
    start_line: int
    end_line: int = 0
    doc: str | None = None


@dataclass
class ScannedClass:
    name: str
    start_line: int
    end_line: int = 0
    methods: list[ScannedMethod] = field(default_factory=list)


@dataclass
class _Scope:
    kind: str  # "class", "method" or "block"
    cls: ScannedClass | None = None
    method: ScannedMethod | None = None


def _strip_generics(text: str) -> str:
    out, depth = [], 0
    for ch in text:
        if ch == "<":
            depth += 1
        elif ch == ">":
            depth = max(0, depth - 1)
        elif depth == 0:
            out.append(ch)
    return "".join(out)


def _classify_method(header: str, simple_class: str) -> str | None:
    """Return the method name if ``header`` (text before ``{``) declares a method with a body."""
    h = _ANNOTATION_RE.sub(" ", header).strip().lstrip(",").strip()
    if not h or "(" not in h:
        return None
    if "=" in h.split("(", 1)[0] or "->" in h:
        return None
    m = _METHOD_RE.match(h)
    if not m:
        return None
    name = m.group("name")
    if name in _NOT_METHODS:
        return None
    pre_tokens = [t for t in _strip_generics(m.group("pre")).split() if t not in _MODIFIERS]
    if not pre_tokens and name != simple_class:
        return None  # enum constant with arguments, or a bare call
    params = m.group("params")
    if params.count("(") != params.count(")"):
        return None
    return name


def scan_java(text: str, recovery_limit: int = 2) -> tuple[str, list[ScannedClass]]:
    """Scan brace-delimited source; return (package, classes with method spans).

    Nested classes are reported separately as ``Outer$Inner``. Methods of
    anonymous and local classes stay inside the enclosing method's body.
    """
    classes: list[ScannedClass] = []
    stack: list[_Scope] = []
    package = ""
    header: list[str] = []
    header_lines: list[int] = []
    pending_doc: str | None = None
    line = 1
    imbalance = 0
    i, n = 0, len(text)

    def reset_header() -> None:
        nonlocal pending_doc
        header.clear()
        header_lines.clear()
        pending_doc = None

    def header_start() -> int:
        for ch, ln in zip(header, header_lines):
            if not ch.isspace():
                return ln
        return line

    def in_code_scope() -> bool:
        return bool(stack) and stack[-1].kind != "class"

    def push_char(ch: str) -> None:
        if not in_code_scope():
            header.append(ch)
            header_lines.append(line)

    while i < n:
        ch = text[i]
        nxt = text[i + 1] if i + 1 < n else ""
        if ch == "\n":
            push_char(ch)
            line += 1
            i += 1
            continue
        if ch == "/" and nxt == "/":
            j = text.find("\n", i)
            i = n if j < 0 else j
            push_char(" ")
            continue
        if ch == "/" and nxt == "*":
            j = text.find("*/", i + 2)
            end = n if j < 0 else j + 2
            comment = text[i:end]
            keep_doc = comment.startswith("/**") and not "".join(header).strip() and not in_code_scope()
            newlines = comment.count("\n")
            if not in_code_scope():
                header.append(" ")
                header_lines.append(line)
                for _ in range(newlines):
                    header.append("\n")
                    header_lines.append(line)
            line += newlines
            i = end
            if keep_doc:
                pending_doc = comment
            continue
        if ch == '"' and text.startswith('"""', i):
            j = text.find('"""', i + 3)
            end = n if j < 0 else j + 3
            line += text.count("\n", i, end)
            push_char('"')
            push_char('"')
            i = end
            continue
        if ch in "\"'":
            j = i + 1
            while j < n and text[j] != ch and text[j] != "\n":
                j += 2 if text[j] == "\\" else 1
            push_char(ch)
            push_char(ch)
            i = min(j + 1, n)
            continue
        if ch == "{":
            if in_code_scope():
                stack.append(_Scope("block"))
            else:
                htext = "".join(header)
                start = header_start()
                cls_match = _CLASS_RE.search(" " + htext) if "=" not in htext and "new " not in htext else None
                enclosing = next((s.cls for s in reversed(stack) if s.kind == "class"), None)
                if cls_match:
                    simple = cls_match.group(1)
                    if enclosing is not None:
                        qual = f"{enclosing.name}${simple}"
                    else:
                        qual = f"{package}.{simple}" if package else simple
                    sc = ScannedClass(qual, start)
                    classes.append(sc)
                    stack.append(_Scope("class", cls=sc))
                elif enclosing is not None:
                    simple = enclosing.name.rsplit(".", 1)[-1].rsplit("$", 1)[-1]
                    name = _classify_method(htext, simple)
                    if name is not None:
                        # blank annotations out in place so offsets still index header_lines
                        blanked = _ANNOTATION_RE.sub(lambda a: " " * len(a.group(0)), htext)
                        m_name = re.search(rf"(?<![\w$]){re.escape(name)}\s*\(", blanked)
                        decl = header_lines[m_name.start()] if m_name else start
                        sm = ScannedMethod(name, decl, start, doc=pending_doc)
                        stack.append(_Scope("method", method=sm))
                        enclosing.methods.append(sm)
                    else:
                        stack.append(_Scope("block"))
                else:
                    stack.append(_Scope("block"))
                reset_header()
            i += 1
            continue
        if ch == "}":
            if not stack:
                imbalance += 1
                log.warning("stray closing brace at line %d", line)
            else:
                scope = stack.pop()
                if scope.kind == "method":
                    scope.method.end_line = line
                elif scope.kind == "class":
                    scope.cls.end_line = line
            if not in_code_scope():
                reset_header()
            i += 1
            continue
        if ch == ";":
            if not in_code_scope():
                pkg = _PACKAGE_RE.match("".join(header))
                if pkg and not stack:
                    package = pkg.group(1)
                reset_header()
            i += 1
            continue
        push_char(ch)
        i += 1

    if stack:
        imbalance += len(stack)
        while stack:
            scope = stack.pop()
            if scope.kind == "method":
                scope.method.end_line = line
            elif scope.kind == "class":
                scope.cls.end_line = line
    if imbalance > recovery_limit:
        raise IndexingError(f"unbalanced braces: {imbalance} unmatched (recovery limit {recovery_limit})")
    if imbalance:
        log.warning("recovered from %d unbalanced brace(s)", imbalance)
    return package, classes


# ---------------------------------------------------------------------------
# snapshot assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexConfig:
    project_name: str
    source_roots: tuple[str, ...] = ("src",)
    test_roots: tuple[str, ...] = ("test",)
    extensions: tuple[str, ...] = DEFAULT_EXTENSIONS


def _load_schema() -> dict:
    return json.loads(resources.files("memfl.data").joinpath("manifest.schema.json").read_text(encoding="utf-8"))


def read_manifest(root: Path) -> dict | None:
    path = root / MANIFEST_NAME
    if not path.exists():
        return None
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"not valid JSON: {exc}") from None
    validator = jsonschema.Draft202012Validator(_load_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path_str = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ManifestInvalid(err.message, path_str)
    return data


def _index_config(root: Path, manifest: dict | None, extensions: Iterable[str] | None) -> IndexConfig:
    m = manifest or {}
    src_default = ("src",) if (root / "src").is_dir() else (".",)
    test_default = ("test",) if (root / "test").is_dir() else ()
    return IndexConfig(
        project_name=m.get("project_name", root.resolve().name),
        source_roots=tuple(m.get("source_roots", src_default)),
        test_roots=tuple(m.get("test_roots", test_default)),
        extensions=tuple(extensions or m.get("extensions", DEFAULT_EXTENSIONS)),
    )


def _source_files(root: Path, roots: Iterable[str], exts: Iterable[str], exclude: Iterable[str] = ()) -> list[Path]:
    exts = tuple(exts)
    excluded = [(root / e).resolve() for e in exclude]
    files: set[Path] = set()
    for r in roots:
        base = root / r
        if not base.is_dir():
            continue
        for p in base.rglob("*"):
            if not p.is_file() or p.suffix not in exts:
                continue
            rp = p.resolve()
            if any(rp == ex or ex in rp.parents for ex in excluded):
                continue
            if any(part.startswith(".") for part in p.relative_to(root).parts):
                continue
            files.add(p)
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def _read_all(root: Path, files: list[Path]) -> dict[str, bytes]:
    with ThreadPoolExecutor(max_workers=8) as pool:
        blobs = list(pool.map(Path.read_bytes, files))
    return {f.relative_to(root).as_posix(): b for f, b in zip(files, blobs)}


def fingerprint_sources(blobs: dict[str, bytes], extra: bytes = b"") -> str:
    h = hashlib.sha256()
    for rel in sorted(blobs):
        h.update(rel.encode())
        h.update(b"\0")
        h.update(hashlib.sha256(blobs[rel]).digest())
    h.update(extra)
    return h.hexdigest()


def _slice(lines: list[str], start: int, end: int) -> str:
    return "\n".join(lines[start - 1 : end])


def _records_from_scan(rel: str, text: str, recovery_limit: int) -> list[ClassRecord]:
    _, scanned = scan_java(text, recovery_limit)
    lines = text.split("\n")
    out = []
    for sc in scanned:
        methods = []
        for sm in sc.methods:
            ref = MethodRef(sc.name, sm.name, sm.decl_line)
            methods.append(MethodRecord(ref, rel, (sm.start_line, sm.end_line), _slice(lines, sm.start_line, sm.end_line), sm.doc))
        if not methods:
            log.info("skipping %s: no method bodies", sc.name)
            continue
        methods.sort(key=lambda m: m.ref.decl_line)
        out.append(ClassRecord(sc.name, rel, tuple(methods), _slice(lines, sc.start_line, sc.end_line), sc.start_line))
    return out


def _records_from_manifest(root: Path, manifest: dict, texts: dict[str, str]) -> list[ClassRecord]:
    out = []
    spans_by_file: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for ci, entry in enumerate(manifest["classes"]):
        where = f"$.classes[{ci}]"
        rel = entry["file"]
        if rel not in texts:
            if not (root / rel).is_file():
                raise ManifestInvalid(f"file {rel!r} does not exist", f"{where}.file")
            texts[rel] = (root / rel).read_text(encoding="utf-8")
        lines = texts[rel].split("\n")
        methods = []
        for mi, me in enumerate(entry["methods"]):
            mwhere = f"{where}.methods[{mi}]"
            start, end = me["span"]
            if not 1 <= start <= end <= len(lines):
                raise ManifestInvalid(f"span {me['span']} outside file of {len(lines)} lines", f"{mwhere}.span")
            if not start <= me["decl_line"] <= end:
                raise ManifestInvalid("decl_line outside span", f"{mwhere}.decl_line")
            for s, e, other in spans_by_file[rel]:
                if start <= e and s <= end:
                    raise ManifestInvalid(f"span overlaps {other}", f"{mwhere}.span")
            try:
                ref = MethodRef(entry["name"], me["name"], me["decl_line"])
            except ValidationError as exc:
                raise ManifestInvalid(str(exc), mwhere) from None
            spans_by_file[rel].append((start, end, str(ref)))
            methods.append(MethodRecord(ref, rel, (start, end), _slice(lines, start, end), me.get("doc")))
        methods.sort(key=lambda m: m.ref.decl_line)
        cstart, cend = entry.get("span", [1, len(lines)])
        try:
            out.append(ClassRecord(entry["name"], rel, tuple(methods), _slice(lines, cstart, cend), cstart))
        except ValidationError as exc:
            raise ManifestInvalid(str(exc), where) from None
    return out


def index_tree(
    root: str | Path,
    mode: str = "manifest",
    extensions: Iterable[str] | None = None,
    recovery_limit: int = 2,
) -> ProjectSnapshot:
    """Index a project tree into a deterministic ProjectSnapshot."""
    root = Path(root)
    if not root.is_dir():
        raise ManifestInvalid(f"project root {root} does not exist")
    manifest = read_manifest(root)
    cfg = _index_config(root, manifest, extensions)

    if mode == "manifest":
        if manifest is None:
            raise ManifestInvalid(f"no {MANIFEST_NAME} in {root}")
        if "classes" not in manifest:
            raise ManifestInvalid("manifest mode requires a 'classes' list", "$.classes")
        files = sorted({c["file"] for c in manifest["classes"]})
        missing = [f for f in files if not (root / f).is_file()]
        if missing:
            idx = next(i for i, c in enumerate(manifest["classes"]) if c["file"] == missing[0])
            raise ManifestInvalid(f"file {missing[0]!r} does not exist", f"$.classes[{idx}].file")
        blobs = _read_all(root, [root / f for f in files])
        texts = {rel: b.decode("utf-8") for rel, b in blobs.items()}
        records = _records_from_manifest(root, manifest, texts)
        fp = fingerprint_sources(blobs, json.dumps(manifest["classes"], sort_keys=True).encode())
    elif mode == "builtin":
        files = _source_files(root, cfg.source_roots, cfg.extensions, exclude=cfg.test_roots)
        if not files:
            raise IndexingError(f"no source files with extensions {cfg.extensions} under {root}")
        blobs = _read_all(root, files)
        records = []
        for rel, blob in blobs.items():
            records.extend(_records_from_scan(rel, blob.decode("utf-8"), recovery_limit))
        if not records:
            raise IndexingError(f"no classes with method bodies found under {root}")
        fp = fingerprint_sources(blobs)
    else:
        raise ValueError(f"unknown index mode {mode!r}")

    records.sort(key=lambda c: c.name)
    return ProjectSnapshot(cfg.project_name, tuple(records), fp)


def snapshot_to_json(snapshot: ProjectSnapshot) -> dict:
    return {
        "project_name": snapshot.project_name,
        "index_fingerprint": snapshot.index_fingerprint,
        "classes": [
            {
                "name": c.name,
                "file": c.file,
                "start_line": c.start_line,
                "methods": [
                    {"name": m.ref.method_name, "decl_line": m.ref.decl_line, "span": list(m.body_span)}
                    for m in c.methods
                ],
            }
            for c in snapshot.classes
        ],
    }


# ---------------------------------------------------------------------------
# test sources and bug cases
# ---------------------------------------------------------------------------


def _strip_literals(src: str) -> str:
    src = re.sub(r"/\*.*?\*/", " ", src, flags=re.S)
    src = re.sub(r"//[^\n]*", " ", src)
    return re.sub(r'"(?:\\.|[^"\\\n])*"', '""', src)


@dataclass
class TestIndex:
    """Test methods by full name (``Class::method``) and by simple name."""

    by_full: dict[str, TestMethodSource] = field(default_factory=dict)
    by_name: dict[str, list[str]] = field(default_factory=lambda: defaultdict(list))

    def add(self, class_name: str, method: str, source: str) -> None:
        full = f"{class_name}::{method}"
        if full in self.by_full:
            return  # overloads: first declaration wins
        self.by_full[full] = TestMethodSource(full, source)
        self.by_name[method].append(full)

    def helper_closure(self, test_name: str, depth: int = HELPER_DEPTH) -> list[TestMethodSource]:
        """Test methods reachable from ``test_name`` by name reference, up to ``depth`` hops."""
        if test_name not in self.by_full:
            return []
        visited = {test_name}
        frontier = [test_name]
        out: list[TestMethodSource] = []
        for _ in range(depth):
            nxt: set[str] = set()
            for full in frontier:
                cls = full.split("::", 1)[0]
                for called in _CALL_RE.findall(_strip_literals(self.by_full[full].source)):
                    targets = self.by_name.get(called, [])
                    same = [t for t in targets if t.split("::", 1)[0] == cls]
                    for t in same or targets:
                        if t not in visited:
                            nxt.add(t)
            level = sorted(nxt)
            visited.update(level)
            out.extend(self.by_full[t] for t in level)
            frontier = level
            if not frontier:
                break
        return out


def build_test_index(root: Path, test_roots: Iterable[str], extensions: Iterable[str]) -> TestIndex:
    index = TestIndex()
    files = _source_files(root, test_roots, extensions)
    for rel, blob in _read_all(root, files).items():
        text = blob.decode("utf-8")
        _, scanned = scan_java(text)
        lines = text.split("\n")
        for sc in scanned:
            for sm in sorted(sc.methods, key=lambda m: m.decl_line):
                index.add(sc.name, sm.name, _slice(lines, sm.start_line, sm.end_line))
    return index


def parse_frame(raw: str | dict, snapshot: ProjectSnapshot) -> StackFrame | None:
    if isinstance(raw, dict):
        cls, meth, line = raw["class"], raw["method"], raw.get("line")
    else:
        m = _FRAME_RE.search(raw)
        if not m:
            return None
        cls, meth, loc = m.groups()
        line_match = re.search(r":(\d+)$", loc)
        line = int(line_match.group(1)) if line_match else None
    return StackFrame(cls, meth, line, external=not snapshot.has_class(cls))


def _coverage_for_entry(entry: dict, snapshot: ProjectSnapshot, where: str) -> CoverageProfile:
    outcomes: dict[str, bool] = {}
    covered: dict[str, frozenset[MethodRef]] = {}
    methods_by_file: dict[str, list[MethodRecord]] = defaultdict(list)
    for m in snapshot.iter_methods():
        methods_by_file[m.file].append(m)

    def resolve_all(names: Iterable[str], test: str) -> set[MethodRef]:
        refs = set()
        for name in names:
            try:
                ref = parse_method_ref(name)
            except ValidationError:
                ref = None
            if ref is None or not snapshot.has_ref(ref):
                err = UnresolvedCoverage(f"{where}: test {test} covers unknown method {name!r}; flag dropped")
                log.warning("%s", err)
                continue
            refs.add(ref)
        return refs

    for test, data in sorted(entry.get("tests", {}).items()):
        outcomes[test] = bool(data["passed"])
        refs = resolve_all(data.get("covered", []), test)
        for rel, lines in data.get("covered_lines", {}).items():
            hit = set(lines)
            for m in methods_by_file.get(rel, []):
                if any(m.body_span[0] <= ln <= m.body_span[1] for ln in hit):
                    refs.add(m.ref)
        covered[test] = frozenset(refs)

    for ft in entry.get("failing_tests", []):
        name = ft if isinstance(ft, str) else ft["name"]
        outcomes.setdefault(name, False)
        if outcomes[name]:
            raise ManifestInvalid(f"test {name} listed as failing but recorded as passed", f"{where}.failing_tests")
    shared = entry.get("covered")
    if shared is not None:
        refs = frozenset(resolve_all(shared, "<bug>"))
        for t, passed in outcomes.items():
            if not passed:
                covered[t] = covered.get(t, frozenset()) | refs
    for t in outcomes:
        covered.setdefault(t, frozenset())
    return CoverageProfile(outcomes, covered)


def load_bug_cases(snapshot: ProjectSnapshot, root: str | Path, extensions: Iterable[str] | None = None) -> list[BugCase]:
    """Load one BugCase per manifest bug entry, attaching failing-test helper closures."""
    root = Path(root)
    manifest = read_manifest(root)
    if manifest is None:
        return []
    cfg = _index_config(root, manifest, extensions)
    tests = build_test_index(root, cfg.test_roots, cfg.extensions)
    cases = []
    for bi, entry in enumerate(manifest.get("bugs", [])):
        where = f"$.bugs[{bi}]"
        coverage = _coverage_for_entry(entry, snapshot, where)
        failing_names = coverage.failing_tests
        if not failing_names:
            raise ValidationError(f"{where}: bug {entry['id']} has no failing tests")
        inline = {ft["name"]: ft.get("source", "") for ft in entry.get("failing_tests", []) if isinstance(ft, dict)}
        failing = []
        for name in failing_names:
            if name in tests.by_full:
                source = tests.by_full[name].source
            else:
                source = inline.get(name, "")
                if not source:
                    log.warning("%s: no source found for failing test %s", where, name)
            failing.append(FailingTest(name, source, tuple(tests.helper_closure(name))))
        frames = []
        for raw in entry.get("stack_trace", []):
            frame = parse_frame(raw, snapshot)
            if frame is None:
                log.debug("%s: unparseable stack frame %r skipped", where, raw)
                continue
            frames.append(frame)
        truth = frozenset(parse_method_ref(r) for r in entry.get("ground_truth", []))
        for ref in truth:
            if not snapshot.has_ref(ref):
                log.warning("%s: ground-truth method %s not in snapshot", where, ref)
        patches = {parse_method_ref(k): v for k, v in entry.get("patches", {}).items()} or None
        cases.append(
            BugCase(
                bug_id=entry["id"],
                error_message=entry.get("error_message", ""),
                stack_trace=tuple(frames),
                failing_tests=tuple(failing),
                coverage=coverage,
                ground_truth=truth,
                patched_bodies=patches,
                project=entry.get("project", snapshot.project_name),
            )
        )
    cases.sort(key=lambda b: b.bug_id)
    return cases
