"""Evaluation: acc@k, k-fold cross-validation with per-fold memory generation, overlap."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from memfl.errors import LeakageError, MissingTruth, ValidationError
from memfl.llm import CostLine, Gateway
from memfl.memgen import build_dynamic_memory
from memfl.model import BugCase, ExternalMemory, MethodRef, ProjectSnapshot, RankedSuspects
from memfl.pipeline import PipelineConfig, localize_many, prefilter_classes
from memfl.prompting import PromptBook
from memfl.sbfl import sbfl_rank

log = logging.getLogger(__name__)

TOP_KS = (1, 3, 5)


def ref_matches(ref: MethodRef, truth: MethodRef, tolerance: int = 2) -> bool:
    return (
        ref.class_name == truth.class_name
        and ref.method_name == truth.method_name
        and abs(ref.decl_line - truth.decl_line) <= tolerance
    )


def hit_within(ranking: Sequence[MethodRef], truth: Iterable[MethodRef], k: int, tolerance: int = 2) -> bool:
    truth = list(truth)
    return any(ref_matches(r, t, tolerance) for r in ranking[:k] for t in truth)


def acc_at_k(
    results: Iterable[RankedSuspects],
    truths: Mapping[str, Iterable[MethodRef]],
    k: int,
    tolerance: int = 2,
) -> int:
    """Number of bugs with a ground-truth method among the first ``k`` ranked entries."""
    count = 0
    for res in results:
        truth = truths.get(res.bug_id)
        if not truth:
            raise MissingTruth(f"no ground truth for {res.bug_id}")
        if hit_within(res.ranking, truth, k, tolerance):
            count += 1
    return count


def solved(results: Iterable[RankedSuspects], truths: Mapping[str, Iterable[MethodRef]], k: int = 1,
           tolerance: int = 2) -> set[str]:
    return {r.bug_id for r in results if hit_within(r.ranking, truths[r.bug_id], k, tolerance)}


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: Mapping[str, int]
    seed: int

    def fold(self, i: int) -> list[str]:
        return sorted(b for b, f in self.assignment.items() if f == i)

    def train(self, i: int) -> list[str]:
        return sorted(b for b, f in self.assignment.items() if f != i)

    @property
    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.k)]


def make_folds(bug_ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle ids with ``seed`` and deal them round-robin into ``k`` folds."""
    ids = sorted(set(bug_ids))
    if k < 2 or k > len(ids):
        raise ValidationError(f"cannot split {len(ids)} bugs into {k} folds")
    order = random.Random(seed).sample(ids, len(ids))
    return FoldPlan(k, {b: i % k for i, b in enumerate(order)}, seed)


def check_disjoint(train_ids: Iterable[str], test_ids: Iterable[str]) -> None:
    shared = set(train_ids) & set(test_ids)
    if shared:
        raise LeakageError(f"bugs in both training and test sets: {sorted(shared)}")


def overlap_analysis(sets: Mapping[str, Iterable[str]]) -> dict[str, int]:
    """Venn region sizes for up to three named sets.

    Keys join the member names with ``&`` in input order; ``"A"`` counts the
    elements found only in A.
    """
    names = list(sets)
    if not 1 <= len(names) <= 3:
        raise ValidationError("overlap analysis supports one to three sets")
    members = [set(sets[n]) for n in names]
    counts = [0] * (1 << len(names))
    for item in set().union(*members):
        mask = sum(1 << i for i, s in enumerate(members) if item in s)
        counts[mask] += 1
    regions = {}
    for mask in sorted(range(1, 1 << len(names)), key=lambda m: (bin(m).count("1"), m)):
        regions["&".join(n for i, n in enumerate(names) if mask >> i & 1)] = counts[mask]
    return regions


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 5
    seed: int = 0
    batch_size: int = 5
    iterations: int = 3
    no_cv: bool = False
    tolerance: int = 2
    workers: int = 4
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    label: str = "MemFL"


@dataclass
class FoldOutcome:
    index: int | str
    train_ids: list[str]
    test_ids: list[str]
    results: list[RankedSuspects]
    acc: dict[int, int]
    localize_cost: CostLine
    memgen_cost: CostLine
    memory_version: int


@dataclass
class EvalReport:
    config: EvalConfig
    folds: list[FoldOutcome]
    truths: dict[str, frozenset[MethodRef]]
    projects: dict[str, str]
    baseline: dict[str, RankedSuspects] = field(default_factory=dict)
    retention: tuple[int, int] = (0, 0)

    @property
    def results(self) -> list[RankedSuspects]:
        return sorted((r for f in self.folds for r in f.results), key=lambda r: r.bug_id)

    @property
    def acc(self) -> dict[int, int]:
        return {k: sum(f.acc[k] for f in self.folds) for k in TOP_KS}


def _cost_line(gateway: Gateway, prefix: str) -> CostLine:
    line = CostLine()
    for e in gateway.exchanges(prefix):
        line.add(e)
    return line


def _retention(snapshot: ProjectSnapshot, bugs: Sequence[BugCase], cap: int) -> tuple[int, int]:
    kept = 0
    for bug in bugs:
        classes = set(prefilter_classes(snapshot, bug.coverage, cap))
        if any(r.class_name in classes for r in bug.ground_truth):
            kept += 1
    return kept, len(bugs)


def cross_validate(
    snapshot: ProjectSnapshot,
    bugs: Sequence[BugCase],
    memory: ExternalMemory,
    gateway: Gateway,
    config: EvalConfig | None = None,
    prompts: PromptBook | None = None,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """Per fold: build dynamic memory on the other folds, localize the held-out fold."""
    config = config or EvalConfig()
    prompts = prompts or PromptBook()
    if not memory.static.class_summaries:
        raise ValidationError("evaluation needs static memory; run `memfl summarize` first")
    by_id = {b.bug_id: b for b in bugs}
    for b in bugs:
        if not b.ground_truth:
            raise MissingTruth(f"bug {b.bug_id} has no ground truth")
    truths = {b.bug_id: b.ground_truth for b in bugs}
    if config.no_cv:
        splits = [("all", sorted(by_id), sorted(by_id))]
    else:
        plan = make_folds(by_id, config.folds, config.seed)
        splits = [(i, plan.train(i), plan.fold(i)) for i in range(plan.k)]

    report = EvalReport(
        config, [], truths, {b.bug_id: b.project for b in bugs},
        baseline=sbfl_rank(list(bugs), snapshot),
        retention=_retention(snapshot, bugs, config.pipeline.prefilter_cap),
    )
    for index, train_ids, test_ids in splits:
        if not config.no_cv:
            check_disjoint(train_ids, test_ids)
        prefix = f"f{index}/"
        try:
            fold_memory = memory.without_guidance()
            if config.pipeline.use_dynamic:
                memgen = build_dynamic_memory(
                    [by_id[b] for b in train_ids], snapshot, fold_memory, gateway,
                    batch_size=min(config.batch_size, len(train_ids)), iterations=config.iterations,
                    seed=config.seed + (index if isinstance(index, int) else 0),
                    evaluation_ids=() if config.no_cv else test_ids,
                    config=replace(config.pipeline, use_dynamic=True), prompts=prompts,
                    tag_prefix=f"{prefix}memgen/", workers=config.workers,
                )
                fold_memory = memgen.memory
            results = localize_many(
                [by_id[b] for b in test_ids], snapshot, fold_memory, gateway, config.pipeline, prompts,
                tag_prefix=f"{prefix}eval/", workers=config.workers,
            )
        except Exception:
            if out_dir is not None:
                write_eval_outputs(report, out_dir, partial=True)
            raise
        acc = {k: acc_at_k(results, truths, k, config.tolerance) for k in TOP_KS}
        report.folds.append(FoldOutcome(
            index, list(train_ids), list(test_ids), results, acc,
            _cost_line(gateway, f"{prefix}eval/"), _cost_line(gateway, f"{prefix}memgen/"), fold_memory.version,
        ))
        log.info("fold %s: acc@1=%d acc@3=%d acc@5=%d", index, acc[1], acc[3], acc[5])
    if out_dir is not None:
        write_eval_outputs(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _money(micro: int) -> str:
    return f"{micro / 1_000_000:.6f}"


def eval_acc_rows(report: EvalReport) -> tuple[dict[str, int], dict[str, dict[str, tuple[int, int, int]]]]:
    """Bug counts per project and acc@{1,3,5} per tool and project."""
    from memfl.reports import OVERALL

    bug_counts: dict[str, int] = {}
    for bug_id, project in report.projects.items():
        bug_counts[project] = bug_counts.get(project, 0) + 1
    bug_counts[OVERALL] = len(report.projects)
    tools = {report.config.label: {r.bug_id: r for r in report.results}}
    if report.baseline:
        tools["Ochiai"] = report.baseline
    table: dict[str, dict[str, tuple[int, int, int]]] = {}
    for tool, res in tools.items():
        rows = {}
        for project in [p for p in bug_counts if p != OVERALL] + [OVERALL]:
            subset = [r for b, r in res.items() if project == OVERALL or report.projects.get(b) == project]
            rows[project] = tuple(acc_at_k(subset, report.truths, k, report.config.tolerance) for k in TOP_KS)
        table[tool] = rows
    return bug_counts, table


def write_eval_outputs(report: EvalReport, out_dir: str | Path, partial: bool = False) -> None:
    from memfl.reports import write_acc_by_tool_csv, write_acc_csv, write_acc_text, write_csv

    out = Path(out_dir)
    (out / "results").mkdir(parents=True, exist_ok=True)
    for res in report.results:
        (out / "results" / f"{res.bug_id}.json").write_text(
            json.dumps(res.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    bug_counts, table = eval_acc_rows(report)
    write_acc_csv(out / "acc.csv", bug_counts, table)
    write_acc_by_tool_csv(out / "acc_by_tool.csv", bug_counts, table)
    write_acc_text(out / "acc.txt", bug_counts, table, title="Fault localization results")

    cost_rows = []
    total_loc, total_gen = CostLine(), CostLine()
    for f in report.folds:
        n = len(f.test_ids)
        cost_rows.append([
            f"fold-{f.index}", n, f.localize_cost.calls, f.localize_cost.prompt_tokens,
            f.localize_cost.completion_tokens, _money(f.localize_cost.cost_micro),
            _money(f.localize_cost.cost_micro // n if n else 0),
            f"{f.localize_cost.time_s:.3f}", f"{f.localize_cost.time_s / n if n else 0:.3f}",
            f.memgen_cost.calls, _money(f.memgen_cost.cost_micro), f.memory_version,
        ])
        for attr in ("calls", "prompt_tokens", "completion_tokens", "cost_micro", "time_us", "retries"):
            setattr(total_loc, attr, getattr(total_loc, attr) + getattr(f.localize_cost, attr))
            setattr(total_gen, attr, getattr(total_gen, attr) + getattr(f.memgen_cost, attr))
    n = sum(len(f.test_ids) for f in report.folds)
    cost_rows.append([
        "overall", n, total_loc.calls, total_loc.prompt_tokens, total_loc.completion_tokens,
        _money(total_loc.cost_micro), _money(total_loc.cost_micro // n if n else 0),
        f"{total_loc.time_s:.3f}", f"{total_loc.time_s / n if n else 0:.3f}",
        total_gen.calls, _money(total_gen.cost_micro), "",
    ])
    write_csv(out / "cost.csv", [
        "scope", "bugs", "calls", "prompt_tokens", "completion_tokens", "cost_usd", "cost_per_bug_usd",
        "time_s", "time_per_bug_s", "memgen_calls", "memgen_cost_usd", "memory_version",
    ], cost_rows)

    sets = {report.config.label: sorted(solved(report.results, report.truths, 1, report.config.tolerance))}
    if report.baseline:
        fold_ids = {r.bug_id for r in report.results}
        base = [r for b, r in report.baseline.items() if b in fold_ids]
        sets["Ochiai"] = sorted(solved(base, report.truths, 1, report.config.tolerance))
    overlap = {"k": 1, "regions": overlap_analysis(sets), "solved": sets}
    (out / "overlap.json").write_text(json.dumps(overlap, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    summary = {
        "partial": partial,
        "cross_validation": not report.config.no_cv,
        "folds": [
            {"fold": f.index, "test": f.test_ids, "acc": {f"top{k}": v for k, v in f.acc.items()},
             "memory_version": f.memory_version}
            for f in report.folds
        ],
        "acc": {f"top{k}": v for k, v in report.acc.items()},
        "prefilter_retention": {"kept": report.retention[0], "bugs": report.retention[1]},
        "degraded": sorted(r.bug_id for r in report.results if r.degraded),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sweep(
    snapshot: ProjectSnapshot,
    bugs: Sequence[BugCase],
    memory: ExternalMemory,
    gateway: Gateway,
    batch_sizes: Sequence[int],
    iteration_counts: Sequence[int],
    config: EvalConfig | None = None,
    prompts: PromptBook | None = None,
) -> list[tuple[int, int, dict[int, int]]]:
    """Cross-validated acc@k for every (batch size, iterations) memory-generation policy."""
    config = config or EvalConfig()
    rows = []
    for b in batch_sizes:
        for it in iteration_counts:
            cfg = replace(config, batch_size=b, iterations=it)
            sub = _PrefixedGateway(gateway, f"b{b}i{it}/")
            rep = cross_validate(snapshot, bugs, memory, sub, cfg, prompts)  # type: ignore[arg-type]
            rows.append((b, it, rep.acc))
    return rows


class _PrefixedGateway:
    """Namespaces request tags so several runs can share one gateway and cassette."""

    def __init__(self, inner: Gateway, prefix: str):
        self.inner = inner
        self.prefix = prefix

    def ask(self, tag, messages, step="", bug_id=""):
        return self.inner.ask(self.prefix + tag, messages, step=step, bug_id=bug_id)

    def exchanges(self, tag_prefix: str = ""):
        return self.inner.exchanges(self.prefix + tag_prefix)
