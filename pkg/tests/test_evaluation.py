from __future__ import annotations

import itertools
import json
import math
import random

import pytest

from memfl.config import DEFAULT_PRICES
from memfl.errors import LeakageError, MissingTruth, ProviderError, ValidationError
from memfl.evaluation import (
    EvalConfig,
    acc_at_k,
    check_disjoint,
    cross_validate,
    make_folds,
    overlap_analysis,
)
from memfl.llm import Gateway, PriceTable, ReplayProvider
from memfl.model import CoverageProfile, MethodRef, RankedSuspects
from memfl.sbfl import SpectrumCounts, ochiai, sbfl_rank

import oracles
from conftest import MINI


def _replay() -> Gateway:
    return Gateway(ReplayProvider.from_file(MINI / "cassette-eval.jsonl"), prices=PriceTable(DEFAULT_PRICES))


@pytest.mark.parametrize("n", [7, 70, 350])
def test_folds_partition(n):
    ids = [f"P-{i}" for i in range(n)]
    plan = make_folds(ids, 5, seed=3)
    folds = [set(plan.fold(i)) for i in range(5)]
    assert set().union(*folds) == set(ids)
    assert sum(map(len, folds)) == n
    assert max(plan.sizes) - min(plan.sizes) <= 1
    for i in range(5):
        assert set(plan.train(i)) == set(ids) - folds[i]
    if n == 350:
        assert plan.sizes == [70] * 5
    assert make_folds(reversed(ids), 5, seed=3).assignment == plan.assignment
    assert make_folds(ids, 5, seed=4).assignment != plan.assignment


def test_fold_count_validated():
    with pytest.raises(ValidationError):
        make_folds(["a", "b"], 3)
    with pytest.raises(ValidationError):
        make_folds(["a", "b"], 1)


def test_leakage_probe():
    with pytest.raises(LeakageError):
        check_disjoint(["B01", "B02"], ["B02"])
    check_disjoint(["B01"], ["B02"])


def _random_case(rng: random.Random, bug_id: str):
    pool = [MethodRef(c, m, line) for c in "XYZ" for m in ("f", "g") for line in (10, 11, 13, 20)]
    ranking = rng.sample(pool, rng.randint(0, 8))
    truth = set(rng.sample(pool, rng.randint(1, 2)))
    return RankedSuspects(bug_id, ranking), truth


def test_acc_at_k_matches_recount_oracle():
    rng = random.Random(11)
    cases = [_random_case(rng, f"b{i}") for i in range(200)]
    results = [r for r, _ in cases]
    truths = {r.bug_id: t for r, t in cases}
    prev = -1
    for k in range(1, 9):
        for tol in (0, 2):
            expected = sum(oracles.recount_hits(r.ranking, truths[r.bug_id], k, tol) for r in results)
            assert acc_at_k(results, truths, k, tol) == expected
        cur = acc_at_k(results, truths, k)
        assert cur >= prev
        prev = cur


def test_acc_line_tolerance():
    truth = {"b": {MethodRef("A", "f", 10)}}
    near = [RankedSuspects("b", [MethodRef("A", "f", 12)])]
    assert acc_at_k(near, truth, 1) == 1
    assert acc_at_k(near, truth, 1, tolerance=0) == 0
    assert acc_at_k([RankedSuspects("b", [MethodRef("A", "f", 13)])], truth, 1) == 0
    assert acc_at_k([RankedSuspects("b", [MethodRef("A", "g", 10)])], truth, 1) == 0
    with pytest.raises(MissingTruth):
        acc_at_k([RankedSuspects("c", [])], truth, 1)


def test_overlap_matches_subset_oracle():
    rng = random.Random(5)
    for _ in range(100):
        names = ["A", "B", "C"][: rng.randint(1, 3)]
        sets = {n: set(rng.sample(range(30), rng.randint(0, 15))) for n in names}
        regions = overlap_analysis(sets)
        expected = oracles.venn_regions(sets)
        assert {frozenset(k.split("&")): v for k, v in regions.items()} == expected
        assert sum(regions.values()) == len(set().union(*sets.values()))
    with pytest.raises(ValidationError):
        overlap_analysis({})


def test_ochiai_values():
    assert math.isclose(ochiai(SpectrumCounts(2, 1, 3, 0)), 2 / math.sqrt(15), abs_tol=1e-9)
    assert ochiai(SpectrumCounts(0, 2, 5, 1)) == 0.0
    assert ochiai(SpectrumCounts(1, 0, 0, 9)) == 1.0
    with pytest.raises(ValidationError):
        SpectrumCounts(-1, 0, 0, 0)
    grid = range(11)
    for ef, nf, ep in itertools.product(grid, grid, grid):
        v = ochiai(SpectrumCounts(ef, nf, ep, 0))
        assert math.isclose(v, oracles.ochiai(ef, nf, ep), abs_tol=1e-12)
        assert 0.0 <= v <= 1.0
        if ef < 10:
            assert ochiai(SpectrumCounts(ef + 1, nf, ep, 0)) >= v
        if ep < 10:
            assert ochiai(SpectrumCounts(ef, nf, ep + 1, 0)) <= v
        if nf < 10:
            assert ochiai(SpectrumCounts(ef, nf + 1, ep, 0)) <= v


def test_sbfl_rank_against_sort_oracle(snapshot, bugs):
    ranked = sbfl_rank(list(bugs), snapshot)
    refs = [m.ref for m in snapshot.iter_methods()]
    for bug in bugs:
        cov: CoverageProfile = bug.coverage
        def score(r):
            ef = sum(r in cov.covered_by_test.get(t, ()) for t in cov.failing_tests)
            ep = sum(r in cov.covered_by_test.get(t, ()) for t in cov.passing_tests)
            return oracles.ochiai(ef, len(cov.failing_tests) - ef, ep)
        expected = sorted(refs, key=lambda r: (-score(r), r.class_name, r.decl_line, r.method_name))
        assert ranked[bug.bug_id].ranking == expected


def test_cross_validate_replay(tmp_path, snapshot, bugs, memory):
    report = cross_validate(snapshot, bugs, memory, _replay(), EvalConfig(), out_dir=tmp_path)
    assert len(report.folds) == 5
    tested = [b for f in report.folds for b in f.test_ids]
    assert sorted(tested) == sorted(b.bug_id for b in bugs)
    for f in report.folds:
        assert not set(f.train_ids) & set(f.test_ids)
        for k in (1, 3, 5):
            assert f.acc[k] == sum(oracles.recount_hits(r.ranking, report.truths[r.bug_id], k) for r in f.results)
    assert report.acc == {1: 8, 3: 9, 5: 9}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["acc"] == {"top1": 8, "top3": 9, "top5": 9} and not summary["partial"]
    assert summary["prefilter_retention"] == {"kept": 10, "bugs": 10}
    assert len(list((tmp_path / "results").glob("*.json"))) == 10
    overlap = json.loads((tmp_path / "overlap.json").read_text())
    assert sum(overlap["regions"].values()) == len(set().union(*map(set, overlap["solved"].values())))
    cost = (tmp_path / "cost.csv").read_text().splitlines()
    assert cost[0].startswith("scope,bugs,calls") and cost[-1].startswith("overall,10,")


def test_no_cv_mode(scripted, snapshot, bugs, memory):
    report = cross_validate(snapshot, bugs, memory, scripted(), EvalConfig(no_cv=True))
    assert [f.index for f in report.folds] == ["all"]
    assert report.folds[0].train_ids == report.folds[0].test_ids
    assert report.acc[1] >= 8


class _FailOnFold(Gateway):
    def ask(self, tag, messages, step="", bug_id=""):
        if tag.startswith("f2/eval/"):
            raise ProviderError("provider went away")
        return super().ask(tag, messages, step=step, bug_id=bug_id)


def test_partial_results_persisted(tmp_path, snapshot, bugs, memory):
    gw = _FailOnFold(ReplayProvider.from_file(MINI / "cassette-eval.jsonl"))
    with pytest.raises(ProviderError):
        cross_validate(snapshot, bugs, memory, gw, EvalConfig(), out_dir=tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["partial"] and [f["fold"] for f in summary["folds"]] == [0, 1]
    assert len(list((tmp_path / "results").glob("*.json"))) == 4


def test_missing_truth_rejected(snapshot, bugs, memory, scripted):
    from dataclasses import replace
    broken = [replace(bugs[0], ground_truth=frozenset())] + list(bugs[1:])
    with pytest.raises(MissingTruth):
        cross_validate(snapshot, broken, memory, scripted(), EvalConfig())
