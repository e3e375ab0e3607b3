"""Table writers (CSV and aligned text) and the bundled published reference constants."""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

OVERALL = "Overall"
METRICS = ("Top1", "Top3", "Top5")

AccTable = Mapping[str, Mapping[str, Sequence[int]]]  # tool -> project -> (top1, top3, top5)


def load_published() -> dict:
    text = resources.files("memfl.data").joinpath("published_results.json").read_text(encoding="utf-8")
    return json.loads(text)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _projects(bug_counts: Mapping[str, int]) -> list[str]:
    return [p for p in bug_counts if p != OVERALL] + [OVERALL]


def acc_rows(bug_counts: Mapping[str, int], table: AccTable) -> tuple[list[str], list[list[object]]]:
    """Project-per-row layout: project, bugs, then Top1/3/5 for each tool."""
    header = ["project", "bugs"] + [f"{tool} {m}" for tool in table for m in METRICS]
    rows = []
    for project in _projects(bug_counts):
        row: list[object] = [project, bug_counts[project]]
        for tool in table:
            row.extend(table[tool][project])
        rows.append(row)
    return header, rows


def acc_by_tool_rows(bug_counts: Mapping[str, int], table: AccTable) -> tuple[list[str], list[list[object]]]:
    """Tool-per-block layout: one row per (tool, metric) with projects as columns."""
    projects = _projects(bug_counts)
    header = ["tool", "metric"] + projects
    rows: list[list[object]] = [["# Bugs", ""] + [bug_counts[p] for p in projects]]
    for tool in table:
        for i, metric in enumerate(METRICS):
            rows.append([tool, metric] + [table[tool][p][i] for p in projects])
    return header, rows


def write_acc_csv(path: str | Path, bug_counts: Mapping[str, int], table: AccTable) -> None:
    write_csv(path, *acc_rows(bug_counts, table))


def write_acc_by_tool_csv(path: str | Path, bug_counts: Mapping[str, int], table: AccTable) -> None:
    write_csv(path, *acc_by_tool_rows(bug_counts, table))


def align(header: Sequence[object], rows: Sequence[Sequence[object]]) -> str:
    cells = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]

    def fmt(r: list[str]) -> str:
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()

    rule = "-" * len(fmt(cells[0]))
    return "\n".join([fmt(cells[0]), rule] + [fmt(r) for r in cells[1:]]) + "\n"


def write_acc_text(
    path: str | Path,
    bug_counts: Mapping[str, int],
    table: AccTable,
    title: str,
    notes: Sequence[str] = (),
) -> None:
    parts = [title, "", align(*acc_rows(bug_counts, table))]
    parts += [align(*acc_by_tool_rows(bug_counts, table))]
    parts += [f"note: {n}" for n in notes]
    Path(path).write_text("\n".join(parts).rstrip("\n") + "\n", encoding="utf-8")


def _published_table(section: Mapping) -> dict[str, dict[str, tuple[int, ...]]]:
    return {tool: {p: tuple(v) for p, v in rows.items()} for tool, rows in section["tools"].items()}


def write_reference_reports(out_dir: str | Path) -> dict[str, Path]:
    """Render the bundled published constants in the same layouts `memfl eval` writes."""
    data = load_published()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bug_counts = dict(data["bugs"])
    bug_counts[OVERALL] = sum(data["bugs"].values())
    llm = _published_table(data["llm_baselines"])
    every = _published_table(data["all_baselines"])
    paths = {
        "acc": out / "acc.csv",
        "acc_by_tool": out / "acc_by_tool.csv",
        "cost": out / "cost.csv",
        "ablation": out / "ablation.csv",
        "text": out / "acc.txt",
    }
    write_acc_csv(paths["acc"], bug_counts, llm)
    write_acc_by_tool_csv(paths["acc_by_tool"], bug_counts, every)
    write_csv(paths["cost"], ["tool", "cost_per_bug_usd", "time_per_bug_s"],
              [[t, v["usd"], v["seconds"]] for t, v in data["cost_per_bug"].items()])
    ablation_rows = [[name, *vals] for name, vals in data["ablation"].items()]
    ablation_rows += [[name, *vals] for name, vals in data["cross_validation"].items()]
    write_csv(paths["ablation"], ["variant", *METRICS], ablation_rows)
    notes = list(data["llm_baselines"]["notes"]) + list(data["all_baselines"]["notes"])
    parts = [
        "Published reference results",
        "",
        align(*acc_rows(bug_counts, llm)),
        align(*acc_by_tool_rows(bug_counts, every)),
        align(["tool", "cost_per_bug_usd", "time_per_bug_s"],
              [[t, v["usd"], v["seconds"]] for t, v in data["cost_per_bug"].items()]),
        align(["variant", *METRICS], ablation_rows),
        align(["batch", "iter1", "iter2", "iter3"],
              [[b, *v] for b, v in data["iteration_sweep_top1"].items()]),
    ]
    parts += [f"note: {n}" for n in notes]
    paths["text"].write_text("\n".join(parts).rstrip("\n") + "\n", encoding="utf-8")
    return paths


def read_acc_csv(path: str | Path) -> tuple[dict[str, int], dict[str, dict[str, tuple[int, int, int]]]]:
    """Inverse of :func:`write_acc_csv`."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    tools = []
    for col in header[2:]:
        tool = col.rsplit(" ", 1)[0]
        if tool not in tools:
            tools.append(tool)
    bug_counts = {r[0]: int(r[1]) for r in body}
    table: dict[str, dict[str, tuple[int, int, int]]] = {t: {} for t in tools}
    for r in body:
        for i, tool in enumerate(tools):
            a, b, c = (int(x) for x in r[2 + 3 * i : 5 + 3 * i])
            table[tool][r[0]] = (a, b, c)
    return bug_counts, table
