"""Ochiai spectrum-based baseline at method granularity."""

from __future__ import annotations

import math
from dataclasses import dataclass

from memfl.errors import ValidationError
from memfl.model import BugCase, CoverageProfile, MethodRef, ProjectSnapshot, RankedSuspects


@dataclass(frozen=True)
class SpectrumCounts:
    ef: int  # failing tests that execute the method
    nf: int  # failing tests that do not
    ep: int  # passing tests that execute the method
    np: int  # passing tests that do not

    def __post_init__(self) -> None:
        if min(self.ef, self.nf, self.ep, self.np) < 0:
            raise ValidationError(f"negative spectrum count in {self}")


def ochiai(counts: SpectrumCounts) -> float:
    """ef / sqrt((ef + nf) * (ef + ep)); zero when nothing failing touches the method."""
    if counts.ef == 0:
        return 0.0
    denom = math.sqrt((counts.ef + counts.nf) * (counts.ef + counts.ep))
    if denom == 0:
        return 0.0
    return counts.ef / denom


def spectrum_counts(coverage: CoverageProfile, refs: list[MethodRef]) -> dict[MethodRef, SpectrumCounts]:
    failing = coverage.failing_tests
    passing = coverage.passing_tests
    out = {}
    for ref in refs:
        ef = sum(1 for t in failing if ref in coverage.covered_by_test.get(t, ()))
        ep = sum(1 for t in passing if ref in coverage.covered_by_test.get(t, ()))
        out[ref] = SpectrumCounts(ef, len(failing) - ef, ep, len(passing) - ep)
    return out


def sbfl_rank(bugs: list[BugCase], snapshot: ProjectSnapshot) -> dict[str, RankedSuspects]:
    """Rank every snapshot method per bug by Ochiai, ties by class name then declaration line."""
    refs = [m.ref for m in snapshot.iter_methods()]
    out = {}
    for bug in bugs:
        scores = {r: ochiai(c) for r, c in spectrum_counts(bug.coverage, refs).items()}
        ranking = sorted(refs, key=lambda r: (-scores[r], r.class_name, r.decl_line, r.method_name))
        out[bug.bug_id] = RankedSuspects(bug.bug_id, ranking)
    return out
