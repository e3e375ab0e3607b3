"""``memfl`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from memfl import __version__
from memfl.config import PROVIDERS, RunConfig, load_config
from memfl.errors import MemflError, NotFound, ProviderUnavailable, ValidationError
from memfl.evaluation import EvalConfig, cross_validate, make_folds, sweep
from memfl.index import index_tree, load_bug_cases, snapshot_to_json
from memfl.llm import (
    DryRunProvider,
    Gateway,
    LiveProvider,
    PriceTable,
    RecordingProvider,
    ReplayProvider,
    ScriptedProvider,
)
from memfl.memgen import build_dynamic_memory
from memfl.memory import build_static_memory, load_memory, save_memory
from memfl.model import BugCase, ProjectSnapshot
from memfl.pipeline import PipelineConfig, localize_many
from memfl.prompting import PromptBook
from memfl.reports import write_csv, write_reference_reports

log = logging.getLogger("memfl")

EXIT_OK, EXIT_VALIDATION, EXIT_PROVIDER, EXIT_DEGRADED = 0, 1, 2, 3
STATE_DIR = ".memfl"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 like every other validation failure."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error[usage]: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def _write_json(path: Path, doc: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


class Run:
    """Everything one invocation needs: config, snapshot, bugs and a gateway."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.project = Path(args.project)
        flags = {
            "provider": getattr(args, "provider", None),
            "cassette": getattr(args, "cassette", None),
            "script": getattr(args, "script", None),
            "record": getattr(args, "record", None),
            "prompts": getattr(args, "prompts", None),
            "model": getattr(args, "model", None),
            "seed": getattr(args, "seed", None),
            "workers": getattr(args, "workers", None),
            "batch_size": getattr(args, "batch", None),
            "iterations": getattr(args, "iters", None),
            "folds": getattr(args, "folds", None),
            "index_mode": getattr(args, "mode", None),
        }
        if getattr(args, "dry_run", False):
            flags["provider"] = "dry-run"
        self.config: RunConfig = load_config(self.project, flags, config_path=getattr(args, "config", None))
        self.prompts = PromptBook(self.config.prompts)
        self._snapshot: ProjectSnapshot | None = None
        self._bugs: list[BugCase] | None = None
        self._recorder: RecordingProvider | None = None
        self.gateway: Gateway | None = None

    @property
    def state_dir(self) -> Path:
        return self.project / STATE_DIR

    @property
    def snapshot(self) -> ProjectSnapshot:
        if self._snapshot is None:
            exts = getattr(self.args, "ext", None)
            self._snapshot = index_tree(self.project, self.config.index_mode, exts)
        return self._snapshot

    @property
    def bugs(self) -> list[BugCase]:
        if self._bugs is None:
            self._bugs = load_bug_cases(self.snapshot, self.project, getattr(self.args, "ext", None))
        return self._bugs

    def bug_map(self) -> dict[str, BugCase]:
        return {b.bug_id: b for b in self.bugs}

    def pipeline_config(self) -> PipelineConfig:
        cfg = PipelineConfig(prefilter_cap=self.config.prefilter_cap, prompt_budget=self.config.prompt_budget)
        for what in getattr(self.args, "ablate", None) or ():
            cfg = cfg.ablate(what)
        return cfg

    def open_gateway(self, sink=None) -> Gateway:
        cfg = self.config
        if cfg.provider == "replay":
            if not cfg.cassette:
                raise ValidationError("replay provider needs --cassette")
            if not Path(cfg.cassette).is_file():
                raise NotFound(f"cassette {cfg.cassette} does not exist")
            provider = ReplayProvider.from_file(cfg.cassette)
        elif cfg.provider == "scripted":
            if not cfg.script:
                raise ValidationError("scripted provider needs --script")
            provider = ScriptedProvider.from_file(cfg.script)
        elif cfg.provider == "dry-run":
            provider = DryRunProvider(sink)
        else:
            if not cfg.api_key:
                raise ProviderUnavailable("live provider needs MEMFL_API_KEY in the environment")
            provider = LiveProvider(cfg.base_url, cfg.api_key, cfg.timeout, cfg.max_retries, rng=cfg.rng())
        if cfg.record:
            self._recorder = RecordingProvider(provider)
            provider = self._recorder
        self.gateway = Gateway(
            provider,
            model=cfg.model,
            prices=PriceTable(cfg.prices),
            temperature=cfg.temperature,
            max_output_tokens=cfg.max_output_tokens,
            max_in_flight=cfg.max_in_flight,
        )
        return self.gateway

    def close(self) -> None:
        if self._recorder is not None and self.config.record:
            self._recorder.save(self.config.record)
            log.info("cassette with %d exchanges written to %s", len(self._recorder.entries), self.config.record)

    def memory_path(self) -> Path:
        given = getattr(self.args, "memory", None)
        return Path(given) if given else self.state_dir / "memory.json"

    def load_memory(self):
        return load_memory(self.memory_path(), self.snapshot.index_fingerprint)


def _select_bugs(run: Run, spec: str) -> list[BugCase]:
    """``all``, comma-separated ids, ``fold=i/k`` (the bugs of fold i) or ``train=i/k`` (all others)."""
    by_id = run.bug_map()
    if spec == "all":
        return list(run.bugs)
    for key in ("fold=", "train="):
        if spec.startswith(key):
            try:
                i, k = (int(x) for x in spec[len(key):].split("/"))
            except ValueError:
                raise ValidationError(f"bad fold spec {spec!r}; expected {key}i/k") from None
            if not 0 <= i < k:
                raise ValidationError(f"fold index {i} outside 0..{k - 1}")
            plan = make_folds(by_id, k, run.config.seed)
            ids = plan.fold(i) if key == "fold=" else plan.train(i)
            return [by_id[b] for b in ids]
    ids = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = [b for b in ids if b not in by_id]
    if unknown:
        raise NotFound(f"unknown bug ids: {', '.join(unknown)}")
    return [by_id[b] for b in ids]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_index(run: Run) -> int:
    snap = run.snapshot
    out = run.state_dir / "snapshot.json"
    _write_json(out, snapshot_to_json(snap))
    methods = sum(len(c.methods) for c in snap.classes)
    print(f"indexed {len(snap.classes)} classes, {methods} methods; fingerprint {snap.index_fingerprint[:12]}")
    print(f"snapshot written to {out}")
    return EXIT_OK


def cmd_summarize(run: Run) -> int:
    gateway = run.open_gateway()
    cache_path = run.state_dir / "summary-cache.json"
    cache = json.loads(cache_path.read_text(encoding="utf-8")) if cache_path.is_file() else {}
    memory = build_static_memory(run.snapshot, gateway, run.prompts, cache, run.config.summary_budget)
    out = run.memory_path()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_memory(memory, out)
    _write_json(cache_path, cache)
    print(f"static memory for {len(memory.static.class_summaries)} classes written to {out}")
    return EXIT_OK


def cmd_memgen(run: Run) -> int:
    memory = run.load_memory()
    training = _select_bugs(run, run.args.train_bugs)
    held_out: list[str] = []
    if run.args.eval_bugs:
        held_out = [b.bug_id for b in _select_bugs(run, run.args.eval_bugs)]
    gateway = run.open_gateway()
    result = build_dynamic_memory(
        training, run.snapshot, memory, gateway,
        batch_size=run.config.batch_size, iterations=run.config.iterations, seed=run.config.seed,
        evaluation_ids=held_out, config=replace(run.pipeline_config(), use_dynamic=True), prompts=run.prompts,
        resample=run.args.resample, workers=run.config.workers,
    )
    out = Path(run.args.out) if run.args.out else run.memory_path()
    save_memory(result.memory, out)
    _write_json(out.parent / "memgen-log.json", result.to_log())
    state = "converged" if result.converged else "stopped"
    print(f"memory version {memory.version} -> {result.memory.version} after {result.iterations_run} iteration(s) ({state})")
    return EXIT_OK


def cmd_localize(run: Run) -> int:
    memory = run.load_memory()
    bugs = _select_bugs(run, run.args.bug)
    if run.config.provider == "dry-run":
        def show(req) -> None:
            print(f"===== {req.tag} =====")
            for role, content in req.messages:
                print(f"--- {role} ---")
                print(content.rstrip("\n"))
        gateway = run.open_gateway(sink=show)
    else:
        gateway = run.open_gateway()
    results = localize_many(bugs, run.snapshot, memory, gateway, run.pipeline_config(), run.prompts,
                            workers=run.config.workers)
    if run.config.provider == "dry-run":
        return EXIT_OK
    out = Path(run.args.out)
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        _write_json(out / f"{res.bug_id}.json", res.to_json())
        top = ", ".join(str(r) for r in res.ranking[:3]) or "(empty)"
        flag = f"  [degraded: {', '.join(res.degraded)}]" if res.degraded else ""
        print(f"{res.bug_id}: {top}{flag}")
    return EXIT_DEGRADED if any(r.degraded for r in results) else EXIT_OK


def _eval_config(run: Run) -> EvalConfig:
    return EvalConfig(
        folds=run.config.folds, seed=run.config.seed, batch_size=run.config.batch_size,
        iterations=run.config.iterations, no_cv=run.args.no_cv,
        tolerance=0 if run.args.strict_match else 2, workers=run.config.workers,
        pipeline=run.pipeline_config(),
    )


def cmd_eval(run: Run) -> int:
    memory = run.load_memory()
    gateway = run.open_gateway()
    report = cross_validate(run.snapshot, run.bugs, memory, gateway, _eval_config(run), run.prompts, run.args.out)
    acc = report.acc
    print(f"acc@1={acc[1]} acc@3={acc[3]} acc@5={acc[5]} over {len(report.results)} bugs; report in {run.args.out}")
    return EXIT_DEGRADED if any(r.degraded for r in report.results) else EXIT_OK


def cmd_sweep(run: Run) -> int:
    memory = run.load_memory()
    gateway = run.open_gateway()
    batches = [int(x) for x in run.args.batches.split(",")]
    iters = [int(x) for x in run.args.iter_counts.split(",")]
    rows = sweep(run.snapshot, run.bugs, memory, gateway, batches, iters, _eval_config(run), run.prompts)
    out = Path(run.args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", ["batch", "iterations", "Top1", "Top3", "Top5"],
              [[b, it, acc[1], acc[3], acc[5]] for b, it, acc in rows])
    for b, it, acc in rows:
        print(f"batch={b} iterations={it}: acc@1={acc[1]}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.reference:
        paths = write_reference_reports(out)
        print((paths["text"]).read_text(encoding="utf-8"), end="")
        return EXIT_OK
    if not args.eval:
        raise ValidationError("report needs --reference or --eval <dir>")
    text = Path(args.eval) / "acc.txt"
    if not text.is_file():
        raise NotFound(f"{text} does not exist; run `memfl eval --out {args.eval}` first")
    write_reference_reports(out)
    print(text.read_text(encoding="utf-8"), end="")
    print()
    print((out / "acc.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--project", required=True, help="project root (contains manifest.json)")
    common.add_argument("--config", help="config file (default: <project>/memfl.toml)")
    common.add_argument("--mode", choices=("manifest", "builtin"), help="indexing mode")
    common.add_argument("--ext", action="append", help="source extension for builtin indexing (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    llm = argparse.ArgumentParser(add_help=False)
    llm.add_argument("--provider", choices=PROVIDERS)
    llm.add_argument("--cassette", help="replay cassette (JSON lines)")
    llm.add_argument("--script", help="scripted-provider rule file")
    llm.add_argument("--record", help="write every exchange to this cassette")
    llm.add_argument("--prompts", help="directory of template overrides")
    llm.add_argument("--model")
    llm.add_argument("--seed", type=int)
    llm.add_argument("--workers", type=int)

    memory = argparse.ArgumentParser(add_help=False)
    memory.add_argument("--memory", help="memory file (default: <project>/.memfl/memory.json)")

    ablate = argparse.ArgumentParser(add_help=False)
    ablate.add_argument("--ablate", action="append", choices=("review", "condense", "dynamic"),
                        help="disable one pipeline component (repeatable)")

    parser = _Parser(prog="memfl", description="Memory-augmented LLM fault localization.")
    parser.add_argument("--version", action="version", version=f"memfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("index", parents=[common], help="index sources and cache the snapshot")
    sub.add_parser("summarize", parents=[common, llm, memory], help="generate static memory")

    p = sub.add_parser("memgen", parents=[common, llm, memory, ablate], help="refine dynamic memory on training bugs")
    p.add_argument("--train-bugs", default="all", help="'all', comma-separated ids, 'fold=i/k' or 'train=i/k'")
    p.add_argument("--eval-bugs", help="held-out bugs; memgen refuses to train on any of them")
    p.add_argument("--batch", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--resample", action="store_true", help="draw a fresh batch every iteration")
    p.add_argument("--out", help="output memory file (default: overwrite --memory)")

    p = sub.add_parser("localize", parents=[common, llm, memory, ablate], help="rank suspicious methods")
    p.add_argument("--bug", default="all", help="bug id, comma-separated ids or 'all'")
    p.add_argument("--out", default="results")
    p.add_argument("--dry-run", action="store_true", help="print prompts instead of calling a model")

    for name, helptext in (("eval", "cross-validated evaluation"), ("sweep", "batch-size / iteration sweep")):
        p = sub.add_parser(name, parents=[common, llm, memory, ablate], help=helptext)
        p.add_argument("--folds", type=int)
        p.add_argument("--no-cv", action="store_true", help="build memory from all bugs and evaluate all")
        p.add_argument("--strict-match", action="store_true", help="require exact declaration lines")
        p.add_argument("--out", default="report")
        if name == "eval":
            p.add_argument("--batch", type=int)
            p.add_argument("--iters", type=int)
        else:
            p.add_argument("--batches", default="1,2,5,10")
            p.add_argument("--iter-counts", default="1,2,3")

    p = sub.add_parser("report", help="render published reference tables")
    p.add_argument("--reference", action="store_true", help="render the bundled published constants")
    p.add_argument("--eval", help="eval output directory to show next to the reference tables")
    p.add_argument("--out", default="report-reference")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


COMMANDS = {
    "index": cmd_index,
    "summarize": cmd_summarize,
    "memgen": cmd_memgen,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    run: Run | None = None
    try:
        if args.command == "report":
            return cmd_report(args)
        run = Run(args)
        return COMMANDS[args.command](run)
    except MemflError as exc:
        sys.stderr.write(f"error[{exc.code}]: {exc}\n")
        return exc.exit_code
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
