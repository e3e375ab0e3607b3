"""Dynamic-memory generation: bug reports, then run/compare/refine iterations.

Within one iteration every batch bug is localized with the current memory.
Refinement then walks the steps in pipeline order; for each step the batch
bugs are shown to the refiner one at a time, in id order, each call seeing the
draft left by the previous one. A step whose draft changed is committed once,
so an iteration bumps the memory version by at most one per step.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from memfl.errors import InvalidBatch, LeakageError, MemflError, MissingPatch, NotFound, ProviderError
from memfl.llm import Gateway
from memfl.memory import apply_refinement
from memfl.model import (
    STEPS,
    BugCase,
    ExternalMemory,
    MethodRef,
    PipelineStep,
    ProjectSnapshot,
    RankedSuspects,
    resolve_ref,
)
from memfl.pipeline import CondensationState, Localizer, PipelineConfig
from memfl.prompting import PromptBook, fenced, render_bug_info, section

log = logging.getLogger(__name__)

NO_UPDATE = "NO_UPDATE"
REPORT_SECTIONS = {
    "failure summary": "failure_summary",
    "root cause": "root_cause",
    "debugging hints": "debugging_hints",
}


@dataclass(frozen=True)
class BuggyMethod:
    ref: MethodRef
    before: str
    after: str


@dataclass
class BugReport:
    bug_id: str
    raw: str
    buggy_methods: list[BuggyMethod] = field(default_factory=list)
    failure_summary: str = ""
    root_cause: str = ""
    debugging_hints: str = ""

    def render(self) -> str:
        return self.raw.strip()


@dataclass(frozen=True)
class StageMetrics:
    selected: int
    relevant: int
    recall: Fraction
    precision: Fraction

    def render(self, unit: str) -> str:
        return (
            f"{unit} selected: {self.selected}\n"
            f"selected {unit} that contain the fault: {self.relevant}\n"
            f"recall: {float(self.recall):.2f}\n"
            f"precision: {float(self.precision):.2f}"
        )

    def to_json(self) -> dict:
        return {
            "selected": self.selected,
            "relevant": self.relevant,
            "recall": float(self.recall),
            "precision": float(self.precision),
        }


@dataclass
class CondenseMetrics:
    stages: dict[PipelineStep, StageMetrics]

    def __getitem__(self, step: PipelineStep) -> StageMetrics:
        return self.stages[step]

    def to_json(self) -> dict:
        return {s.value: m.to_json() for s, m in self.stages.items()}


@dataclass
class MemgenResult:
    memory: ExternalMemory
    batch: list[str]
    iterations_run: int
    converged: bool
    events: list[dict] = field(default_factory=list)
    reports: dict[str, BugReport] = field(default_factory=dict)

    def to_log(self) -> dict:
        return {
            "batch": list(self.batch),
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "final_version": self.memory.version,
            "events": list(self.events),
            "reports": {k: v.raw for k, v in sorted(self.reports.items())},
        }


def _permutation(bugs: Sequence[BugCase], seed: int) -> list[BugCase]:
    ordered = sorted(bugs, key=lambda b: b.bug_id)
    return random.Random(seed).sample(ordered, len(ordered))


def select_training_batch(bugs: Sequence[BugCase], batch_size: int, seed: int) -> list[BugCase]:
    """Uniform sample without replacement, deterministic per seed, returned in id order."""
    if batch_size < 1 or batch_size > len(bugs):
        raise InvalidBatch(f"batch size {batch_size} invalid for {len(bugs)} bugs")
    return sorted(_permutation(bugs, seed)[:batch_size], key=lambda b: b.bug_id)


def _parse_sections(raw: str) -> dict[str, str]:
    out: dict[str, list[str]] = {}
    current = None
    for line in raw.splitlines():
        heading = line.strip().lstrip("#").strip().rstrip(":").lower()
        if line.lstrip().startswith("#") and heading in REPORT_SECTIONS:
            current = REPORT_SECTIONS[heading]
            out[current] = []
        elif current is not None:
            out[current].append(line)
    return {k: "\n".join(v).strip() for k, v in out.items()}


def generate_bug_report(
    bug: BugCase,
    snapshot: ProjectSnapshot,
    memory: ExternalMemory,
    gateway: Gateway,
    prompts: PromptBook | None = None,
    tag_prefix: str = "",
) -> BugReport:
    """Ask for a structured report of a fixed bug, given buggy and patched method bodies."""
    if not bug.ground_truth or not bug.has_patch:
        raise MissingPatch(f"bug {bug.bug_id} has no patched bodies for its buggy methods")
    prompts = prompts or PromptBook()
    buggy = []
    for ref in sorted(bug.ground_truth):
        try:
            before = resolve_ref(snapshot, ref, fuzzy=True).body_text
        except NotFound:
            before = "(source unavailable)"
        buggy.append(BuggyMethod(ref, before, bug.patched_bodies[ref]))
    methods = "\n\n".join(
        f"### {m.ref}\nBuggy version:\n{fenced(m.before)}\nFixed version:\n{fenced(m.after)}" for m in buggy
    )
    classes = sorted({m.ref.class_name for m in buggy})
    summaries = "\n\n".join(
        f"### {c}\n{memory.static.class_summaries.get(c, '(no summary)').strip()}" for c in classes
    )
    messages = prompts.messages(
        "bug_report",
        project_section=section("Project summary", memory.static.project_summary),
        bug_info=render_bug_info(bug, with_helpers=True),
        methods=methods,
        class_summaries=summaries,
    )
    ex = gateway.ask(f"{tag_prefix}report/{bug.bug_id}", messages, step="report", bug_id=bug.bug_id)
    return BugReport(bug.bug_id, ex.reply_text, buggy, **_parse_sections(ex.reply_text))


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def compute_condense_metrics(state: CondensationState, ground_truth: Iterable[MethodRef]) -> CondenseMetrics:
    """Recall and precision of each condensation sub-step against the known buggy methods."""
    truth = set(ground_truth)
    truth_classes = {r.class_name for r in truth}

    def class_stage(kept: Sequence[str]) -> StageMetrics:
        kept_set = set(kept)
        relevant = len(kept_set & truth_classes)
        return StageMetrics(len(kept_set), relevant, _ratio(relevant, len(truth_classes)), _ratio(relevant, len(kept_set)))

    methods = set(state.methods)
    hit = len(methods & truth)
    return CondenseMetrics({
        PipelineStep.CONDENSE1: class_stage(state.stage1),
        PipelineStep.CONDENSE2: class_stage(state.stage2),
        PipelineStep.CONDENSE3: StageMetrics(len(methods), hit, _ratio(hit, len(truth)), _ratio(hit, len(methods))),
    })


def _step_output(step: PipelineStep, result: RankedSuspects) -> str:
    inter = result.intermediates
    if step is PipelineStep.REVIEW:
        return inter.bug_review.strip() or "(no review produced)"
    if step is PipelineStep.CONDENSE1:
        return (f"Candidate classes ({len(inter.prefiltered)}): " + ", ".join(inter.prefiltered)
                + f"\nKept classes ({len(inter.kept_classes_1)}): " + ", ".join(inter.kept_classes_1))
    if step is PipelineStep.CONDENSE2:
        return (f"Candidate classes ({len(inter.kept_classes_1)}): " + ", ".join(inter.kept_classes_1)
                + f"\nKept classes ({len(inter.kept_classes_2)}): " + ", ".join(inter.kept_classes_2))
    if step is PipelineStep.CONDENSE3:
        return f"Kept methods ({len(inter.kept_methods)}):\n" + "\n".join(str(r) for r in inter.kept_methods)
    return "\n".join(f"{i}. {r}" for i, r in enumerate(result.ranking, 1)) or "(empty ranking)"


def refine_step_memory(
    step: PipelineStep,
    output: str,
    bug_report: BugReport,
    current: str,
    gateway: Gateway,
    memory: ExternalMemory,
    metrics: StageMetrics | None = None,
    prompts: PromptBook | None = None,
    tag: str = "",
    bug_id: str = "",
) -> str | None:
    """New guidance text for ``step``, or ``None`` when the model answers ``NO_UPDATE``."""
    step = PipelineStep(step)
    prompts = prompts or PromptBook()
    common = dict(
        project_section=section("Project summary", memory.static.project_summary),
        bug_report=bug_report.render(),
        output=output,
        current=current.strip() or "(none yet)",
    )
    if step.is_condense:
        if metrics is None:
            raise ValueError("condensation refinement needs metrics")
        unit = "methods" if step is PipelineStep.CONDENSE3 else "classes"
        stage_name = {
            PipelineStep.CONDENSE1: "sub-step 1 (class selection)",
            PipelineStep.CONDENSE2: "sub-step 2 (class selection)",
            PipelineStep.CONDENSE3: "sub-step 3 (method selection)",
        }[step]
        messages = prompts.messages("refine_condense", stage_name=stage_name, metrics=metrics.render(unit), **common)
    else:
        template = "refine_review" if step is PipelineStep.REVIEW else "refine_confirm"
        messages = prompts.messages(template, **common)
    ex = gateway.ask(tag or f"refine/{step.value}/{bug_report.bug_id}", messages, step=f"refine-{step.value}",
                     bug_id=bug_id or bug_report.bug_id)
    reply = ex.reply_text.strip()
    if reply.startswith(NO_UPDATE):
        return None
    return reply


def build_dynamic_memory(
    training: Sequence[BugCase],
    snapshot: ProjectSnapshot,
    memory: ExternalMemory,
    gateway: Gateway,
    batch_size: int = 5,
    iterations: int = 3,
    seed: int = 0,
    evaluation_ids: Iterable[str] = (),
    config: PipelineConfig | None = None,
    prompts: PromptBook | None = None,
    tag_prefix: str = "memgen/",
    resample: bool = False,
    start_iteration: int = 1,
    workers: int = 4,
) -> MemgenResult:
    """Refine per-step guidance over a training batch for up to ``iterations`` passes."""
    leaked = {b.bug_id for b in training} & set(evaluation_ids)
    if leaked:
        raise LeakageError(f"training bugs overlap the evaluation set: {sorted(leaked)}")
    if not memory.static.project_summary and not memory.static.class_summaries:
        raise MemflError("dynamic memory generation needs static memory first")
    if batch_size < 1 or batch_size > len(training):
        raise InvalidBatch(f"batch size {batch_size} invalid for {len(training)} training bugs")
    prompts = prompts or PromptBook()
    config = config or PipelineConfig()

    reports: dict[str, BugReport] = {}
    rng_seed = seed

    def fill_batch(pool_seed: int) -> list[BugCase]:
        batch: list[BugCase] = []
        for bug in _permutation(training, pool_seed):
            if len(batch) == batch_size:
                break
            if bug.bug_id not in reports:
                try:
                    reports[bug.bug_id] = generate_bug_report(bug, snapshot, memory, gateway, prompts, tag_prefix)
                except MissingPatch as exc:
                    log.warning("%s; excluded from the batch", exc)
                    continue
            batch.append(bug)
        if not batch:
            raise InvalidBatch("no training bug has a patch; cannot build a batch")
        if len(batch) < batch_size:
            log.warning("only %d of %d batch slots could be filled", len(batch), batch_size)
        return sorted(batch, key=lambda b: b.bug_id)

    batch = fill_batch(rng_seed)
    events: list[dict] = []
    converged = False
    iterations_run = 0
    for it in range(start_iteration, start_iteration + iterations):
        if resample and it > start_iteration:
            batch = fill_batch(rng_seed + it)
        iterations_run += 1
        localizer = Localizer(snapshot, memory, gateway, prompts, config, tag_prefix=f"{tag_prefix}it{it}/")

        def run(bug: BugCase) -> RankedSuspects | None:
            try:
                return localizer.localize(bug)
            except ProviderError:
                raise
            except MemflError as exc:
                log.warning("iteration %d: localization of %s failed (%s); skipped", it, bug.bug_id, exc)
                return None

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = dict(zip((b.bug_id for b in batch), pool.map(run, batch)))

        any_update = False
        for step in STEPS:
            draft = memory.guidance(step)
            contributors: list[str] = []
            for bug in batch:
                result = results[bug.bug_id]
                if result is None:
                    continue
                metrics = None
                if step.is_condense:
                    metrics = compute_condense_metrics(
                        CondensationState.from_intermediates(result.intermediates), bug.ground_truth
                    )[step]
                reply = refine_step_memory(
                    step, _step_output(step, result), reports[bug.bug_id], draft, gateway, memory, metrics, prompts,
                    tag=f"{tag_prefix}it{it}/refine/{step.value}/{bug.bug_id}", bug_id=bug.bug_id,
                )
                changed = reply is not None and reply != draft
                events.append({
                    "iteration": it,
                    "step": step.value,
                    "bug_id": bug.bug_id,
                    "decision": "update" if changed else "no_update",
                    "metrics": metrics.to_json() if metrics else None,
                    "degraded": list(result.degraded),
                })
                if changed:
                    draft = reply
                    contributors.append(bug.bug_id)
            if contributors:
                memory = apply_refinement(memory, step, draft, {"iteration": it, "bugs": contributors})
                any_update = True
        if not any_update:
            converged = True
            log.info("dynamic memory converged in iteration %d", it)
            break

    return MemgenResult(memory, [b.bug_id for b in batch], iterations_run, converged, events, reports)
