"""Shared domain types and the ``class@method@line`` identifier scheme."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping

from memfl.errors import Ambiguous, MalformedRef, NotFound, ValidationError


@dataclass(frozen=True, order=True)
class MethodRef:
    class_name: str
    method_name: str
    decl_line: int

    def __post_init__(self) -> None:
        for part in (self.class_name, self.method_name):
            if not part or "@" in part or any(c.isspace() for c in part):
                raise MalformedRef(f"invalid name component {part!r}")
        if isinstance(self.decl_line, bool) or not isinstance(self.decl_line, int) or self.decl_line < 1:
            raise MalformedRef(f"decl_line must be a positive integer, got {self.decl_line!r}")

    def __str__(self) -> str:
        return f"{self.class_name}@{self.method_name}@{self.decl_line}"


def parse_method_ref(text: str) -> MethodRef:
    token = text.strip()
    if not token or any(c.isspace() for c in token):
        raise MalformedRef(f"not a single token: {text!r}")
    parts = token.split("@")
    if len(parts) != 3:
        raise MalformedRef(f"expected class@method@line, got {text!r}")
    cls, meth, line = parts
    if not cls or not meth:
        raise MalformedRef(f"empty component in {text!r}")
    if not line.isdigit():
        raise MalformedRef(f"non-numeric line in {text!r}")
    return MethodRef(cls, meth, int(line))


@dataclass(frozen=True)
class MethodRecord:
    ref: MethodRef
    file: str
    body_span: tuple[int, int]
    body_text: str
    doc_text: str | None = None

    def __post_init__(self) -> None:
        start, end = self.body_span
        if not start <= self.ref.decl_line <= end:
            raise ValidationError(f"{self.ref}: span {self.body_span} does not contain decl_line")
        if len(self.body_text.split("\n")) != end - start + 1:
            raise ValidationError(f"{self.ref}: body_text line count does not match span {self.body_span}")

    @property
    def name(self) -> str:
        return self.ref.method_name

    @property
    def signature(self) -> str:
        """Declaration text up to the opening brace, on one line."""
        head = self.body_text.split("{", 1)[0]
        return " ".join(head.split())

    def numbered(self) -> str:
        start = self.body_span[0]
        return "\n".join(f"{start + i:5d}  {line}" for i, line in enumerate(self.body_text.split("\n")))


@dataclass(frozen=True)
class ClassRecord:
    name: str
    file: str
    methods: tuple[MethodRecord, ...]
    source_text: str
    start_line: int = 1

    def __post_init__(self) -> None:
        if not self.methods:
            raise ValidationError(f"class {self.name} has no methods")
        seen = set()
        for m in self.methods:
            key = (m.ref.method_name, m.ref.decl_line)
            if key in seen:
                raise ValidationError(f"duplicate method {m.ref}")
            seen.add(key)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(f"{self.name}\n{self.source_text}".encode()).hexdigest()

    def numbered_source(self) -> str:
        lines = self.source_text.split("\n")
        return "\n".join(f"{self.start_line + i:5d}  {line}" for i, line in enumerate(lines))


@dataclass(frozen=True)
class ProjectSnapshot:
    project_name: str
    classes: tuple[ClassRecord, ...]
    index_fingerprint: str
    _by_class: dict = field(init=False, repr=False, compare=False)
    _by_ref: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_class: dict[str, ClassRecord] = {}
        by_ref: dict[MethodRef, MethodRecord] = {}
        for cls in self.classes:
            if cls.name in by_class:
                raise ValidationError(f"duplicate class name {cls.name}")
            by_class[cls.name] = cls
            for m in cls.methods:
                by_ref[m.ref] = m
        object.__setattr__(self, "_by_class", by_class)
        object.__setattr__(self, "_by_ref", by_ref)

    def get_class(self, name: str) -> ClassRecord:
        try:
            return self._by_class[name]
        except KeyError:
            raise NotFound(f"class {name!r} not in snapshot") from None

    def has_class(self, name: str) -> bool:
        return name in self._by_class

    def has_ref(self, ref: MethodRef) -> bool:
        return ref in self._by_ref

    def method(self, ref: MethodRef) -> MethodRecord:
        try:
            return self._by_ref[ref]
        except KeyError:
            raise NotFound(f"method {ref} not in snapshot") from None

    def iter_methods(self) -> Iterator[MethodRecord]:
        for cls in self.classes:
            yield from cls.methods

    @property
    def method_count(self) -> int:
        return len(self._by_ref)

    def class_of(self, ref: MethodRef) -> ClassRecord:
        return self.get_class(ref.class_name)

    def resolve_ref(self, ref: MethodRef, fuzzy: bool = False) -> MethodRecord:
        return resolve_ref(self, ref, fuzzy)


def nearest_method(candidates: Iterable[MethodRecord], line: int) -> MethodRecord:
    """Pick the candidate whose decl_line is nearest ``line``; ties go to the smaller line."""
    return min(candidates, key=lambda m: (abs(m.ref.decl_line - line), m.ref.decl_line))


def resolve_ref(snapshot: ProjectSnapshot, ref: MethodRef, fuzzy: bool = False) -> MethodRecord:
    if snapshot.has_ref(ref):
        return snapshot.method(ref)
    if not snapshot.has_class(ref.class_name):
        raise NotFound(f"class {ref.class_name!r} not in snapshot")
    same_name = [m for m in snapshot.get_class(ref.class_name).methods if m.ref.method_name == ref.method_name]
    if not same_name:
        raise NotFound(f"method {ref.class_name}.{ref.method_name} not in snapshot")
    if not fuzzy:
        if len(same_name) > 1:
            raise Ambiguous(f"{ref}: {len(same_name)} declarations of {ref.method_name}, none at line {ref.decl_line}")
        raise NotFound(f"{ref}: {ref.method_name} is declared at line {same_name[0].ref.decl_line}")
    return nearest_method(same_name, ref.decl_line)


@dataclass(frozen=True)
class StackFrame:
    class_name: str
    method_name: str
    line: int | None = None
    external: bool = False

    def render(self) -> str:
        loc = f"line {self.line}" if self.line is not None else "Unknown Source"
        suffix = "  [external]" if self.external else ""
        return f"at {self.class_name}.{self.method_name}({loc}){suffix}"


@dataclass(frozen=True)
class TestMethodSource:
    name: str
    source: str


@dataclass(frozen=True)
class FailingTest:
    name: str
    source: str
    helpers: tuple[TestMethodSource, ...] = ()


@dataclass(frozen=True)
class CoverageProfile:
    """Per-test outcomes plus the set of methods each test executed."""

    outcomes: Mapping[str, bool]  # test name -> passed
    covered_by_test: Mapping[str, frozenset[MethodRef]]

    @property
    def failing_tests(self) -> list[str]:
        return sorted(t for t, passed in self.outcomes.items() if not passed)

    @property
    def passing_tests(self) -> list[str]:
        return sorted(t for t, passed in self.outcomes.items() if passed)

    @cached_property
    def covered(self) -> frozenset[MethodRef]:
        """Methods executed by at least one failing test."""
        out: set[MethodRef] = set()
        for t in self.failing_tests:
            out |= self.covered_by_test.get(t, frozenset())
        return frozenset(out)

    def is_covered(self, ref: MethodRef) -> bool:
        return ref in self.covered

    def all_refs(self) -> frozenset[MethodRef]:
        out: set[MethodRef] = set()
        for refs in self.covered_by_test.values():
            out |= refs
        return frozenset(out)


@dataclass(frozen=True)
class BugCase:
    bug_id: str
    error_message: str
    stack_trace: tuple[StackFrame, ...]
    failing_tests: tuple[FailingTest, ...]
    coverage: CoverageProfile
    ground_truth: frozenset[MethodRef] = frozenset()
    patched_bodies: Mapping[MethodRef, str] | None = None
    project: str = ""

    def __post_init__(self) -> None:
        if not self.failing_tests:
            raise ValidationError(f"bug {self.bug_id}: no failing tests")

    @property
    def primary_test(self) -> FailingTest:
        """The single failing test shown to the model: lexicographically smallest name."""
        return min(self.failing_tests, key=lambda t: t.name)

    @property
    def has_patch(self) -> bool:
        return bool(self.patched_bodies) and all(r in self.patched_bodies for r in self.ground_truth)


class PipelineStep(str, enum.Enum):
    REVIEW = "review"
    CONDENSE1 = "condense1"
    CONDENSE2 = "condense2"
    CONDENSE3 = "condense3"
    CONFIRM = "confirm"

    @property
    def is_condense(self) -> bool:
        return self in (PipelineStep.CONDENSE1, PipelineStep.CONDENSE2, PipelineStep.CONDENSE3)


STEPS: tuple[PipelineStep, ...] = tuple(PipelineStep)


@dataclass(frozen=True)
class StaticMemory:
    project_summary: str
    class_summaries: Mapping[str, str]


@dataclass(frozen=True)
class RefinementEvent:
    step: PipelineStep
    version: int  # version after the refinement
    meta: Mapping[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"step": self.step.value, "version": self.version, "meta": dict(self.meta)}

    @classmethod
    def from_json(cls, data: dict) -> "RefinementEvent":
        return cls(PipelineStep(data["step"]), int(data["version"]), dict(data.get("meta", {})))


def empty_guidance() -> dict[PipelineStep, str]:
    return {s: "" for s in STEPS}


@dataclass(frozen=True)
class ExternalMemory:
    static: StaticMemory
    dynamic: Mapping[PipelineStep, str] = field(default_factory=empty_guidance)
    version: int = 0
    provenance: tuple[RefinementEvent, ...] = ()
    snapshot_fingerprint: str = ""

    def __post_init__(self) -> None:
        if set(self.dynamic) != set(STEPS):
            raise ValidationError("dynamic memory must have exactly one entry per pipeline step")

    def guidance(self, step: PipelineStep) -> str:
        return self.dynamic[step]

    def to_json(self) -> dict:
        return {
            "static": {
                "project_summary": self.static.project_summary,
                "class_summaries": {k: self.static.class_summaries[k] for k in sorted(self.static.class_summaries)},
            },
            "dynamic": {s.value: self.dynamic[s] for s in STEPS},
            "version": self.version,
            "provenance": [e.to_json() for e in self.provenance],
            "snapshot_fingerprint": self.snapshot_fingerprint,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExternalMemory":
        static = data["static"]
        return cls(
            static=StaticMemory(static["project_summary"], dict(static["class_summaries"])),
            dynamic={PipelineStep(k): v for k, v in data["dynamic"].items()},
            version=int(data["version"]),
            provenance=tuple(RefinementEvent.from_json(e) for e in data.get("provenance", [])),
            snapshot_fingerprint=data.get("snapshot_fingerprint", ""),
        )

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()

    def without_guidance(self) -> "ExternalMemory":
        return ExternalMemory(self.static, empty_guidance(), self.version, self.provenance, self.snapshot_fingerprint)


@dataclass
class TokenUsage:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_micro: int = 0
    time_us: int = 0

    def add(self, prompt_tokens: int, completion_tokens: int, cost_micro: int, time_us: int) -> None:
        self.calls += 1
        self.prompt_tokens += prompt_tokens
        self.completion_tokens += completion_tokens
        self.cost_micro += cost_micro
        self.time_us += time_us

    @property
    def time_s(self) -> float:
        return self.time_us / 1_000_000

    def to_json(self) -> dict:
        return {
            "calls": self.calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "cost_micro": self.cost_micro,
            "time_us": self.time_us,
        }


@dataclass
class Intermediates:
    bug_review: str = ""
    prefiltered: list[str] = field(default_factory=list)
    kept_classes_1: list[str] = field(default_factory=list)
    kept_classes_2: list[str] = field(default_factory=list)
    kept_methods: list[MethodRef] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "bug_review": self.bug_review,
            "prefiltered": list(self.prefiltered),
            "kept_classes_1": list(self.kept_classes_1),
            "kept_classes_2": list(self.kept_classes_2),
            "kept_methods": [str(r) for r in self.kept_methods],
        }


@dataclass
class RankedSuspects:
    bug_id: str
    ranking: list[MethodRef]
    intermediates: Intermediates = field(default_factory=Intermediates)
    telemetry: TokenUsage = field(default_factory=TokenUsage)
    degraded: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.ranking)) != len(self.ranking):
            raise ValidationError(f"{self.bug_id}: ranking contains duplicates")

    @property
    def is_degraded(self) -> bool:
        return bool(self.degraded)

    def to_json(self) -> dict:
        return {
            "bug_id": self.bug_id,
            "ranking": [str(r) for r in self.ranking],
            "intermediates": self.intermediates.to_json(),
            "telemetry": self.telemetry.to_json(),
            "degraded": list(self.degraded),
        }

    @classmethod
    def from_json(cls, data: dict) -> "RankedSuspects":
        inter = data.get("intermediates", {})
        tel = data.get("telemetry", {})
        return cls(
            bug_id=data["bug_id"],
            ranking=[parse_method_ref(r) for r in data["ranking"]],
            intermediates=Intermediates(
                bug_review=inter.get("bug_review", ""),
                prefiltered=list(inter.get("prefiltered", [])),
                kept_classes_1=list(inter.get("kept_classes_1", [])),
                kept_classes_2=list(inter.get("kept_classes_2", [])),
                kept_methods=[parse_method_ref(r) for r in inter.get("kept_methods", [])],
            ),
            telemetry=TokenUsage(
                calls=tel.get("calls", 0),
                prompt_tokens=tel.get("prompt_tokens", 0),
                completion_tokens=tel.get("completion_tokens", 0),
                cost_micro=tel.get("cost_micro", 0),
                time_us=tel.get("time_us", 0),
            ),
            degraded=list(data.get("degraded", [])),
        )
