"""Three-step localization of one bug: review, condensation, confirmation."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from memfl.errors import MalformedRef, NotFound, UnparseableSelection, ValidationError
from memfl.llm import ChatExchange, Gateway, estimate_tokens
from memfl.model import (
    BugCase,
    ClassRecord,
    CoverageProfile,
    ExternalMemory,
    Intermediates,
    MethodRecord,
    MethodRef,
    PipelineStep,
    ProjectSnapshot,
    RankedSuspects,
    nearest_method,
    resolve_ref,
)
from memfl.prompting import PromptBook, extract_json_array, fenced, guidance_cap, render_bug_info, section

log = logging.getLogger(__name__)

_REF3_RE = re.compile(r"[\w$.]+@[\w$<>]+@\d+")
_REF2_RE = re.compile(r"(?<![\w$.@])[\w$<>]+@\d+")

STRICTNESS = {
    1: "Keep every class that could plausibly be involved in the failure; prefer recall over precision.",
    2: "Be strict: keep only the classes most likely to contain the fault.",
}


@dataclass(frozen=True)
class PipelineConfig:
    prefilter_cap: int = 60
    stage1_cap: int = 20
    stage2_cap: int = 5
    methods_per_class: int = 10
    ranking_cap: int = 10
    prompt_budget: int = 30000
    use_review: bool = True
    use_condensation: bool = True
    use_dynamic: bool = True

    def ablate(self, what: str | None) -> "PipelineConfig":
        if what in (None, "", "none"):
            return self
        flags = {"review": "use_review", "condense": "use_condensation", "dynamic": "use_dynamic"}
        if what not in flags:
            raise ValidationError(f"unknown ablation {what!r}; expected one of {sorted(flags)}")
        return replace(self, **{flags[what]: False})


@dataclass
class CondensationState:
    prefiltered: list[str] = field(default_factory=list)
    stage1: list[str] = field(default_factory=list)
    stage2: list[str] = field(default_factory=list)
    methods: list[MethodRef] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "prefilter": len(self.prefiltered),
            "stage1": len(self.stage1),
            "stage2": len(self.stage2),
            "methods": len(self.methods),
        }

    @classmethod
    def from_intermediates(cls, inter: Intermediates) -> "CondensationState":
        return cls(list(inter.prefiltered), list(inter.kept_classes_1), list(inter.kept_classes_2), list(inter.kept_methods))


def coverage_rate(cls: ClassRecord, coverage: CoverageProfile) -> Fraction:
    """Fraction of the class's methods executed by the failing run."""
    covered = coverage.covered
    return Fraction(sum(1 for m in cls.methods if m.ref in covered), len(cls.methods))


def prefilter_classes(snapshot: ProjectSnapshot, coverage: CoverageProfile, cap: int = 60) -> list[str]:
    """Covered classes by coverage rate (desc), ties by name, at most ``cap``."""
    rated = [(coverage_rate(c, coverage), c.name) for c in snapshot.classes]
    rated = [(r, n) for r, n in rated if r > 0]
    rated.sort(key=lambda rn: (-rn[0], rn[1]))
    return [n for _, n in rated[:cap]]


def _numbered_lines(start: int, text: str) -> list[str]:
    return [f"{start + i:5d}  {line}" for i, line in enumerate(text.split("\n"))]


def _truncate_tail(lines: list[str], budget_tokens: int) -> list[str]:
    """Keep leading lines within ``budget_tokens``; mark the cut."""
    out, used = [], 0
    for line in lines:
        cost = estimate_tokens(line) + 1
        if out and used + cost > budget_tokens:
            out.append("       ... (truncated)")
            break
        out.append(line)
        used += cost
    return out


class Localizer:
    """Runs the pipeline for bugs of one snapshot with one memory and gateway."""

    def __init__(
        self,
        snapshot: ProjectSnapshot,
        memory: ExternalMemory,
        gateway: Gateway,
        prompts: PromptBook | None = None,
        config: PipelineConfig | None = None,
        tag_prefix: str = "",
    ):
        self.snapshot = snapshot
        self.memory = memory
        self.gateway = gateway
        self.prompts = prompts or PromptBook()
        self.config = config or PipelineConfig()
        self.tag_prefix = tag_prefix

    # -- helpers -----------------------------------------------------------

    def _guidance(self, step: PipelineStep) -> str:
        return self.memory.guidance(step) if self.config.use_dynamic else ""

    def _common(self, step: PipelineStep) -> dict[str, str]:
        return {
            "project_section": section("Project summary", self.memory.static.project_summary),
            "guidance_section": section("Debugging guidance for this step", self._guidance(step)),
        }

    def _review_section(self, review: str) -> str:
        return section("Bug review", review)

    def _ask(self, tag: str, step: PipelineStep, bug: BugCase, template: str, result: RankedSuspects | None, **values) -> ChatExchange:
        messages = self.prompts.messages(template, **values)
        ex = self.gateway.ask(f"{self.tag_prefix}{tag}", messages, step=step.value, bug_id=bug.bug_id)
        if result is not None:
            result.telemetry.add(ex.prompt_tokens, ex.completion_tokens, ex.cost_micro, ex.latency_us)
        return ex

    def _fits(self, template: str, **values) -> bool:
        return estimate_tokens("".join(c for _, c in self.prompts.messages(template, **values))) <= self.config.prompt_budget

    def _rates(self, bug: BugCase) -> dict[str, Fraction]:
        return {c.name: coverage_rate(c, bug.coverage) for c in self.snapshot.classes}

    # -- steps ---------------------------------------------------------------

    def bug_review(self, bug: BugCase, result: RankedSuspects | None = None) -> str:
        step = PipelineStep.REVIEW
        ex = self._ask(
            f"review/{bug.bug_id}", step, bug, "review", result,
            bug_info=render_bug_info(bug, with_helpers=True), **self._common(step),
        )
        return ex.reply_text

    def condense_classes(
        self,
        stage: int,
        candidates: Sequence[str],
        bug: BugCase,
        review: str,
        result: RankedSuspects | None = None,
        degraded: list[str] | None = None,
    ) -> list[str]:
        if stage not in (1, 2):
            raise ValueError("class condensation has stages 1 and 2")
        if not candidates:
            raise ValidationError("class condensation needs at least one candidate")
        step = PipelineStep.CONDENSE1 if stage == 1 else PipelineStep.CONDENSE2
        default_cap = self.config.stage1_cap if stage == 1 else self.config.stage2_cap
        cap = guidance_cap(self._guidance(step)) or default_cap
        rates = self._rates(bug)
        summaries = self.memory.static.class_summaries
        shown = list(candidates)

        def values() -> dict:
            blocks = []
            for name in shown:
                cls = self.snapshot.get_class(name)
                covered = sum(1 for m in cls.methods if m.ref in bug.coverage.covered)
                blocks.append(
                    f"### {name}\nCovered methods: {covered} of {len(cls.methods)}\n"
                    f"{summaries.get(name, '(no summary)').strip()}"
                )
            return dict(
                bug_info=render_bug_info(bug, with_helpers=False),
                review_section=self._review_section(review),
                candidates="\n\n".join(blocks),
                strictness=STRICTNESS[stage],
                cap=cap,
                **self._common(step),
            )

        while len(shown) > 1 and not self._fits("condense_classes", **values()):
            victim = sorted(shown, key=lambda n: (-rates[n], n))[-1]
            shown.remove(victim)
            log.info("%s stage %d: dropped candidate %s to fit the prompt budget", bug.bug_id, stage, victim)

        ex = self._ask(f"{step.value}/{bug.bug_id}", step, bug, "condense_classes", result, **values())
        allowed = set(shown)
        try:
            names = extract_json_array(ex.reply_text)
        except UnparseableSelection:
            names = None
        kept: list[str] = []
        if names is not None:
            for name in names:
                if name in allowed and name not in kept:
                    kept.append(name)
                elif name not in allowed:
                    log.warning("%s stage %d: model named unknown class %r; dropped", bug.bug_id, stage, name)
        if not kept:
            log.warning("%s stage %d: no usable selection; keeping top %d by coverage rate", bug.bug_id, stage, cap)
            if degraded is not None:
                degraded.append(step.value)
            return sorted(candidates, key=lambda n: (-rates[n], n))[:cap]
        return kept[:cap]

    def _class_windows(self, cls: ClassRecord, fixed: dict) -> list[str]:
        full = cls.numbered_source()
        if self._fits("condense_methods", source=full, **fixed):
            return [full]
        room = max(1, self.config.prompt_budget - estimate_tokens("".join(
            c for _, c in self.prompts.messages("condense_methods", source="", **fixed))))
        windows: list[list[str]] = [[]]
        used = 0
        for m in cls.methods:
            lines = _numbered_lines(m.body_span[0], m.body_text)
            cost = sum(estimate_tokens(line) + 1 for line in lines)
            if cost > room:
                lines = _truncate_tail(lines, room)
                cost = sum(estimate_tokens(line) + 1 for line in lines)
                log.info("truncated body of %s to fit the prompt budget", m.ref)
            if windows[-1] and used + cost > room:
                windows.append([])
                used = 0
            windows[-1].append("\n".join(lines))
            used += cost
        log.info("class %s split into %d windows", cls.name, len(windows))
        return ["\n\n".join(w) for w in windows]

    def _resolve_in_class(self, cls: ClassRecord, token: str) -> MethodRecord | None:
        parts = token.split("@")
        try:
            if len(parts) == 3:
                if parts[0] != cls.name:
                    return None
                parts = parts[1:]
            if len(parts) == 2:
                return resolve_ref(self.snapshot, MethodRef(cls.name, parts[0], int(parts[1])), fuzzy=True)
            if len(parts) == 1:
                same = [m for m in cls.methods if m.ref.method_name == parts[0]]
                return same[0] if same else None
        except (ValueError, MalformedRef, NotFound):
            return None
        return None

    def condense_methods(
        self,
        cls: ClassRecord,
        bug: BugCase,
        review: str,
        result: RankedSuspects | None = None,
        degraded: list[str] | None = None,
    ) -> list[MethodRef]:
        step = PipelineStep.CONDENSE3
        cap = guidance_cap(self._guidance(step)) or self.config.methods_per_class
        fixed = dict(
            bug_info=render_bug_info(bug, with_helpers=False),
            review_section=self._review_section(review),
            class_name=cls.name,
            class_summary=self.memory.static.class_summaries.get(cls.name, "(no summary)").strip(),
            cap=cap,
            **self._common(step),
        )
        windows = self._class_windows(cls, fixed)
        selected: list[MethodRef] = []
        parsed_any = False
        for wi, source in enumerate(windows, 1):
            tag = f"{step.value}/{bug.bug_id}/{cls.name}" + (f"#w{wi}" if len(windows) > 1 else "")
            ex = self._ask(tag, step, bug, "condense_methods", result, source=source, **fixed)
            try:
                tokens = extract_json_array(ex.reply_text)
            except UnparseableSelection:
                tokens = _REF2_RE.findall(ex.reply_text) or None
            if tokens is None:
                continue
            parsed_any = True
            for token in tokens:
                rec = self._resolve_in_class(cls, token)
                if rec is None:
                    log.warning("%s: %r does not name a method of %s; dropped", bug.bug_id, token, cls.name)
                elif rec.ref not in selected:
                    selected.append(rec.ref)
        if not parsed_any:
            log.warning("%s: unparseable method selection for %s; keeping its covered methods", bug.bug_id, cls.name)
            if degraded is not None:
                degraded.append(step.value)
            return [m.ref for m in cls.methods if m.ref in bug.coverage.covered]
        return selected[:cap]

    def _fallback_ranking(self, selected: Sequence[MethodRef], bug: BugCase) -> list[MethodRef]:
        rates = self._rates(bug)
        return sorted(selected, key=lambda r: (-rates.get(r.class_name, 0), r.decl_line, r.class_name, r.method_name))

    def _render_code(self, methods: Sequence[MethodRef], truncate_to: int | None = None) -> str:
        by_class: dict[str, list[MethodRecord]] = {}
        for ref in methods:
            by_class.setdefault(ref.class_name, []).append(self.snapshot.method(ref))
        blocks = []
        summaries = self.memory.static.class_summaries
        for name, recs in by_class.items():
            bodies = []
            for m in sorted(recs, key=lambda m: m.ref.decl_line):
                lines = _numbered_lines(m.body_span[0], m.body_text)
                if truncate_to is not None:
                    lines = _truncate_tail(lines, truncate_to)
                bodies.append("\n".join(lines))
            summary = summaries.get(name, "").strip()
            head = f"### {name}" + (f"\n{summary}" if summary else "")
            blocks.append(head + "\n" + fenced("\n\n".join(bodies)))
        return "\n\n".join(blocks)

    def _resolve_ranked(self, token: str, selected: Sequence[MethodRef]) -> MethodRef | None:
        try:
            parts = token.split("@")
            if len(parts) != 3:
                return None
            cls, name, line = parts[0], parts[1], int(parts[2])
            ref = MethodRef(cls, name, line)
        except (ValueError, MalformedRef):
            return None
        pool = [self.snapshot.method(r) for r in selected if r.class_name == cls and r.method_name == name]
        if ref in selected:
            return ref
        if pool:
            return nearest_method(pool, line).ref
        try:
            return resolve_ref(self.snapshot, ref, fuzzy=True).ref
        except NotFound:
            return None

    def confirm_faults(
        self,
        selected: Sequence[MethodRef],
        bug: BugCase,
        review: str,
        result: RankedSuspects | None = None,
        degraded: list[str] | None = None,
    ) -> list[MethodRef]:
        step = PipelineStep.CONFIRM
        if not selected:
            raise ValidationError("fault confirmation needs at least one selected method")
        cap = self.config.ranking_cap
        rates = self._rates(bug)
        shown = list(selected)
        fixed = dict(
            bug_info=render_bug_info(bug, with_helpers=False),
            review_section=self._review_section(review),
            cap=cap,
            **self._common(step),
        )
        code = self._render_code(shown)
        while len(shown) > 1 and not self._fits("confirm", code=code, **fixed):
            victim = min(shown, key=lambda r: (rates.get(r.class_name, 0), -r.decl_line))
            shown.remove(victim)
            log.info("%s: dropped %s from confirmation to fit the prompt budget", bug.bug_id, victim)
            code = self._render_code(shown)
        if not self._fits("confirm", code=code, **fixed):
            room = self.config.prompt_budget - estimate_tokens(
                "".join(c for _, c in self.prompts.messages("confirm", code="", **fixed)))
            code = self._render_code(shown, truncate_to=max(1, room))
            log.info("%s: truncated method bodies in the confirmation prompt", bug.bug_id)

        ex = self._ask(f"{step.value}/{bug.bug_id}", step, bug, "confirm", result, code=code, **fixed)
        try:
            tokens = extract_json_array(ex.reply_text)
        except UnparseableSelection:
            tokens = _REF3_RE.findall(ex.reply_text)
        ranking: list[MethodRef] = []
        for token in tokens:
            ref = self._resolve_ranked(token, shown)
            if ref is None:
                log.warning("%s: ranked entry %r does not resolve; dropped", bug.bug_id, token)
            elif ref not in ranking:
                ranking.append(ref)
        if not ranking:
            log.warning("%s: no usable ranking in reply; ranking selected methods by coverage", bug.bug_id)
            if degraded is not None:
                degraded.append(step.value)
            ranking = self._fallback_ranking(selected, bug)
        return ranking[:cap]

    # -- composition --------------------------------------------------------

    def localize(self, bug: BugCase) -> RankedSuspects:
        cfg = self.config
        result = RankedSuspects(bug.bug_id, [])
        degraded: list[str] = []
        inter = result.intermediates

        review = self.bug_review(bug, result) if cfg.use_review else ""
        inter.bug_review = review
        inter.prefiltered = prefilter_classes(self.snapshot, bug.coverage, cfg.prefilter_cap)
        covered = bug.coverage.covered

        if not inter.prefiltered:
            log.warning("%s: no covered classes; nothing to localize", bug.bug_id)
            result.degraded = ["prefilter"]
            return result

        if cfg.use_condensation:
            inter.kept_classes_1 = self.condense_classes(1, inter.prefiltered, bug, review, result, degraded)
            inter.kept_classes_2 = self.condense_classes(2, inter.kept_classes_1, bug, review, result, degraded)
            selected: list[MethodRef] = []
            for name in inter.kept_classes_2:
                for ref in self.condense_methods(self.snapshot.get_class(name), bug, review, result, degraded):
                    if ref not in selected:
                        selected.append(ref)
            if not selected:
                log.warning("%s: condensation kept no methods; using covered methods of kept classes", bug.bug_id)
                degraded.append("condense3")
                selected = [m.ref for n in inter.kept_classes_2 for m in self.snapshot.get_class(n).methods if m.ref in covered]
        else:
            selected = [m.ref for n in inter.prefiltered for m in self.snapshot.get_class(n).methods if m.ref in covered]
        inter.kept_methods = list(selected)

        if selected:
            result.ranking = self.confirm_faults(selected, bug, review, result, degraded)
        else:
            degraded.append("confirm")
        result.degraded = sorted(set(degraded), key=degraded.index)
        self._check(result)
        return result

    def _check(self, result: RankedSuspects) -> None:
        if len(set(result.ranking)) != len(result.ranking):
            raise AssertionError(f"{result.bug_id}: duplicate entries in ranking")
        for ref in result.ranking:
            if not self.snapshot.has_ref(ref):
                raise AssertionError(f"{result.bug_id}: ranked {ref} is not in the snapshot")


def localize(
    bug: BugCase,
    snapshot: ProjectSnapshot,
    memory: ExternalMemory,
    gateway: Gateway,
    config: PipelineConfig | None = None,
    prompts: PromptBook | None = None,
    tag_prefix: str = "",
) -> RankedSuspects:
    return Localizer(snapshot, memory, gateway, prompts, config, tag_prefix).localize(bug)


def localize_many(
    bugs: Iterable[BugCase],
    snapshot: ProjectSnapshot,
    memory: ExternalMemory,
    gateway: Gateway,
    config: PipelineConfig | None = None,
    prompts: PromptBook | None = None,
    tag_prefix: str = "",
    workers: int = 4,
) -> list[RankedSuspects]:
    """Localize bugs concurrently; results come back in input order."""
    localizer = Localizer(snapshot, memory, gateway, prompts, config, tag_prefix)
    bugs = list(bugs)
    if workers <= 1:
        return [localizer.localize(b) for b in bugs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(localizer.localize, bugs))
