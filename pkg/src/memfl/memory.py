"""Static memory generation, dynamic-memory refinement and persistence."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, MutableMapping

from memfl.errors import CorruptMemoryFile, InvalidInput, NotFound, ValidationError
from memfl.llm import Gateway, estimate_tokens
from memfl.model import (
    ClassRecord,
    ExternalMemory,
    MethodRecord,
    PipelineStep,
    ProjectSnapshot,
    RefinementEvent,
    StaticMemory,
    empty_guidance,
)
from memfl.prompting import PromptBook, fenced

log = logging.getLogger(__name__)

SUMMARY_BUDGET = 6000  # tokens per summarization prompt
PROJECT_GROUP_SIZE = 20


def _method_chunk_text(m: MethodRecord, budget_left: int) -> tuple[str, bool]:
    """Numbered body, or signature plus doc when the body alone blows the budget."""
    text = m.numbered()
    if estimate_tokens(text) <= budget_left:
        return text, False
    head = f"{m.ref.decl_line:5d}  {m.signature} {{ ... }}"
    if m.doc_text:
        head = m.doc_text.strip() + "\n" + head
    return head, True


def _summarize_one(
    cls: ClassRecord,
    project_name: str,
    gateway: Gateway,
    prompts: PromptBook,
    budget: int,
    flagged: set[str],
) -> str:
    tag = f"summarize/class/{cls.name}"
    messages = prompts.messages(
        "summarize_class", project_name=project_name, class_name=cls.name, source=cls.numbered_source()
    )
    if estimate_tokens("".join(c for _, c in messages)) <= budget:
        return gateway.ask(tag, messages, step="summarize").reply_text.strip()

    overhead = estimate_tokens(
        "".join(c for _, c in prompts.messages("summarize_class_chunk", project_name=project_name,
                                               class_name=cls.name, source="", part=99, parts=99))
    )
    room = max(1, budget - overhead)
    chunks: list[list[str]] = [[]]
    used = 0
    for m in cls.methods:
        text, oversized = _method_chunk_text(m, room)
        if oversized:
            flagged.add(str(m.ref))
            log.warning("method %s exceeds the summary budget; using signature and doc only", m.ref)
        cost = estimate_tokens(text) + 1
        if chunks[-1] and used + cost > room:
            chunks.append([])
            used = 0
        chunks[-1].append(text)
        used += cost
    if len(chunks) == 1:
        messages = prompts.messages(
            "summarize_class_chunk", project_name=project_name, class_name=cls.name,
            source="\n\n".join(chunks[0]), part=1, parts=1,
        )
        return gateway.ask(tag, messages, step="summarize").reply_text.strip()
    partials = []
    for i, chunk in enumerate(chunks, 1):
        messages = prompts.messages(
            "summarize_class_chunk", project_name=project_name, class_name=cls.name,
            source="\n\n".join(chunk), part=i, parts=len(chunks),
        )
        partials.append(gateway.ask(f"{tag}/chunk{i}", messages, step="summarize").reply_text.strip())
    merged = "\n\n".join(f"Part {i}: {p}" for i, p in enumerate(partials, 1))
    messages = prompts.messages("merge_class_summary", project_name=project_name, class_name=cls.name, partials=merged)
    return gateway.ask(f"{tag}/merge", messages, step="summarize").reply_text.strip()


def generate_class_summaries(
    snapshot: ProjectSnapshot,
    gateway: Gateway,
    prompts: PromptBook | None = None,
    cache: MutableMapping[str, str] | None = None,
    budget: int = SUMMARY_BUDGET,
    max_workers: int = 4,
    flagged: set[str] | None = None,
) -> dict[str, str]:
    """One summary per class, reusing ``cache`` entries keyed by class content hash.

    Methods too large to fit in a prompt are described by signature and doc
    comment only; their refs are added to ``flagged``.
    """
    if not snapshot.classes:
        raise InvalidInput("snapshot has no classes")
    prompts = prompts or PromptBook()
    cache = cache if cache is not None else {}
    flagged = flagged if flagged is not None else set()
    todo = [c for c in snapshot.classes if c.content_hash not in cache]

    def work(cls: ClassRecord) -> tuple[str, str]:
        return cls.content_hash, _summarize_one(cls, snapshot.project_name, gateway, prompts, budget, flagged)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for key, summary in pool.map(work, todo):
            cache[key] = summary
    return {c.name: cache[c.content_hash] for c in sorted(snapshot.classes, key=lambda c: c.name)}


def _aggregate(summaries: Mapping[str, str]) -> str:
    return "\n\n".join(f"### {name}\n{summaries[name].strip()}" for name in sorted(summaries))


def generate_project_summary(
    project_name: str,
    class_summaries: Mapping[str, str],
    gateway: Gateway,
    prompts: PromptBook | None = None,
    budget: int = SUMMARY_BUDGET,
    group_size: int = PROJECT_GROUP_SIZE,
) -> str:
    """Project overview from class summaries; merged hierarchically when they do not fit one prompt."""
    if not class_summaries:
        raise InvalidInput("no class summaries to aggregate")
    prompts = prompts or PromptBook()
    tag = "summarize/project"
    messages = prompts.messages("summarize_project", project_name=project_name, summaries=_aggregate(class_summaries))
    if estimate_tokens("".join(c for _, c in messages)) <= budget:
        return gateway.ask(tag, messages, step="summarize").reply_text.strip()

    names = sorted(class_summaries)
    partials = []
    for gi, start in enumerate(range(0, len(names), group_size), 1):
        group = {n: class_summaries[n] for n in names[start : start + group_size]}
        msgs = prompts.messages("summarize_project", project_name=project_name, summaries=_aggregate(group))
        partials.append(gateway.ask(f"{tag}/group{gi}", msgs, step="summarize").reply_text.strip())
    level = 1
    while True:
        blocks = [f"### Part {i}\n{p}" for i, p in enumerate(partials, 1)]
        msgs = prompts.messages("merge_project", project_name=project_name, partials="\n\n".join(blocks))
        if len(partials) <= group_size or estimate_tokens("".join(c for _, c in msgs)) <= budget:
            suffix = "merge" if level == 1 else f"merge{level}"
            return gateway.ask(f"{tag}/{suffix}", msgs, step="summarize").reply_text.strip()
        merged = []
        for gi, start in enumerate(range(0, len(partials), group_size), 1):
            part_blocks = [f"### Part {i}\n{p}" for i, p in enumerate(partials[start : start + group_size], 1)]
            msgs = prompts.messages("merge_project", project_name=project_name, partials="\n\n".join(part_blocks))
            merged.append(gateway.ask(f"{tag}/merge{level}/group{gi}", msgs, step="summarize").reply_text.strip())
        partials = merged
        level += 1


def build_static_memory(
    snapshot: ProjectSnapshot,
    gateway: Gateway,
    prompts: PromptBook | None = None,
    cache: MutableMapping[str, str] | None = None,
    budget: int = SUMMARY_BUDGET,
) -> ExternalMemory:
    summaries = generate_class_summaries(snapshot, gateway, prompts, cache, budget)
    project = generate_project_summary(snapshot.project_name, summaries, gateway, prompts, budget)
    return ExternalMemory(StaticMemory(project, summaries), empty_guidance(), 0, (), snapshot.index_fingerprint)


def apply_refinement(
    memory: ExternalMemory,
    step: PipelineStep,
    new_guidance: str | None,
    meta: Mapping[str, object] | None = None,
) -> ExternalMemory:
    """Replace one step's guidance; ``None`` means no update and returns ``memory`` unchanged."""
    step = PipelineStep(step)
    if new_guidance is None:
        return memory
    dynamic = dict(memory.dynamic)
    dynamic[step] = new_guidance
    version = memory.version + 1
    event = RefinementEvent(step, version, dict(meta or {}))
    return ExternalMemory(memory.static, dynamic, version, memory.provenance + (event,), memory.snapshot_fingerprint)


def _checksum(body: dict) -> str:
    blob = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_memory(memory: ExternalMemory, path: str | Path) -> None:
    body = memory.to_json()
    doc = dict(body, checksum=_checksum(body))
    Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_memory(path: str | Path, expected_fingerprint: str | None = None) -> ExternalMemory:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"memory file {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptMemoryFile(f"{path}: not valid JSON ({exc})") from None
    checksum = doc.pop("checksum", None)
    if checksum is None or checksum != _checksum(doc):
        raise CorruptMemoryFile(f"{path}: checksum mismatch")
    try:
        memory = ExternalMemory.from_json(doc)
    except (KeyError, ValueError, ValidationError) as exc:
        raise CorruptMemoryFile(f"{path}: {exc}") from None
    if expected_fingerprint and memory.snapshot_fingerprint and memory.snapshot_fingerprint != expected_fingerprint:
        log.warning("memory %s was built for a different snapshot; static summaries may be stale", path)
    return memory
