from __future__ import annotations

import json
import shutil
import subprocess
import sys

from memfl.cli import main

from conftest import MINI


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _localize(mini, out, *extra):
    return ["localize", "--project", mini, "--memory", mini / "memory.json", "--out", out, *extra]


def test_index_writes_snapshot(capsys, mini):
    code, out, _ = _run(capsys, "index", "--project", mini)
    assert code == 0 and "8 classes, 49 methods" in out
    snap = json.loads((mini / ".memfl" / "snapshot.json").read_text())
    assert len(snap["classes"]) == 8


def test_unknown_flag_is_usage_error(capsys, mini):
    code, _, err = _run(capsys, "index", "--project", mini, "--frobnicate")
    assert code == 1 and "usage: memfl" in err and "error[usage]" in err
    code, _, err = _run(capsys, "localize", "--project", mini, "--provider", "carrier-pigeon")
    assert code == 1


def test_missing_project_is_validation_error(capsys, tmp_path):
    code, _, err = _run(capsys, "index", "--project", tmp_path / "nope")
    assert code == 1 and err.startswith("error[")


def test_localize_replay_is_deterministic(capsys, mini, tmp_path):
    cassette = mini / "cassette-localize.jsonl"
    outputs = []
    for name in ("a", "b"):
        code, out, _ = _run(capsys, *_localize(mini, tmp_path / name, "--cassette", cassette))
        assert code == 0
        outputs.append(out)
    assert outputs[0] == outputs[1]
    assert outputs[0].splitlines()[0].startswith("B01: org.mini.text.StringUtils@isBlank@17")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert len(list((tmp_path / "a").iterdir())) == 10


def test_cassette_miss_exits_two(capsys, mini, tmp_path):
    lines = (mini / "cassette-localize.jsonl").read_text().splitlines()
    dropped = json.loads(lines[7])
    (tmp_path / "short.jsonl").write_text("\n".join(lines[:7] + lines[8:]) + "\n")
    code, _, err = _run(capsys, *_localize(mini, tmp_path / "o", "--cassette", tmp_path / "short.jsonl"))
    assert code == 2 and "error[cassette_miss]" in err and dropped["tag"] in err


def test_replay_needs_cassette(capsys, mini, tmp_path):
    code, _, err = _run(capsys, *_localize(mini, tmp_path / "o"))
    assert code == 1 and "--cassette" in err


def test_live_without_key_exits_two(capsys, mini, tmp_path, monkeypatch):
    monkeypatch.delenv("MEMFL_API_KEY", raising=False)
    code, _, err = _run(capsys, *_localize(mini, tmp_path / "o", "--provider", "live"))
    assert code == 2 and "MEMFL_API_KEY" in err


def test_dry_run_prints_prompts(capsys, mini, tmp_path):
    code, out, _ = _run(capsys, *_localize(mini, tmp_path / "o", "--bug", "B02", "--dry-run"))
    assert code == 0
    assert "===== review/B02 =====" in out and "--- system ---" in out
    assert not (tmp_path / "o").exists()


def test_degraded_exit_three(capsys, mini, tmp_path):
    doc = json.loads((mini / "script.json").read_text())
    doc["rules"].insert(0, {"match": "condense1/B03", "replies": ["I cannot decide."], "repeat": True})
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code, out, _ = _run(capsys, *_localize(mini, tmp_path / "o", "--bug", "B03,B04", "--provider", "scripted",
                                           "--script", tmp_path / "bad.json"))
    assert code == 3 and "degraded" in out
    assert json.loads((tmp_path / "o" / "B03.json").read_text())["degraded"]


def test_summarize_then_memgen(capsys, mini, tmp_path):
    mem = tmp_path / "mem.json"
    code, out, _ = _run(capsys, "summarize", "--project", mini, "--provider", "scripted",
                        "--script", mini / "script.json", "--memory", mem)
    assert code == 0 and "8 classes" in out
    assert (mini / ".memfl" / "summary-cache.json").is_file()
    code, out, _ = _run(capsys, "memgen", "--project", mini, "--provider", "scripted", "--script",
                        mini / "script.json", "--memory", mem, "--train-bugs", "train=0/5",
                        "--eval-bugs", "fold=0/5", "--out", tmp_path / "dyn.json")
    assert code == 0 and "version 0 -> 2" in out
    assert json.loads((tmp_path / "dyn.json").read_text())["version"] == 2
    assert (tmp_path / "memgen-log.json").is_file()


def test_memgen_refuses_overlap(capsys, mini, tmp_path):
    code, _, err = _run(capsys, "memgen", "--project", mini, "--provider", "scripted", "--script",
                        mini / "script.json", "--memory", mini / "memory.json", "--train-bugs", "B01,B02",
                        "--eval-bugs", "B02", "--out", tmp_path / "dyn.json")
    assert code == 1 and "B02" in err


def test_eval_replay(capsys, mini, tmp_path):
    code, out, _ = _run(capsys, "eval", "--project", mini, "--memory", mini / "memory.json",
                        "--cassette", mini / "cassette-eval.jsonl", "--out", tmp_path / "rep")
    assert code == 0 and "acc@1=8 acc@3=9 acc@5=9" in out
    for name in ("acc.csv", "acc_by_tool.csv", "acc.txt", "cost.csv", "overlap.json", "summary.json"):
        assert (tmp_path / "rep" / name).is_file()


def test_report_reference(capsys, tmp_path):
    code, out, _ = _run(capsys, "report", "--reference", "--out", tmp_path / "ref")
    assert code == 0 and "178" in out
    assert (tmp_path / "ref" / "acc.csv").is_file()
    code, _, err = _run(capsys, "report", "--out", tmp_path / "ref")
    assert code == 1


def test_console_script_entry_point(mini):
    exe = shutil.which("memfl")
    cmd = [exe] if exe else [sys.executable, "-m", "memfl.cli"]
    proc = subprocess.run(cmd + ["index", "--project", str(mini)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
