from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from memfl.config import DEFAULT_PRICES
from memfl.index import index_tree, load_bug_cases
from memfl.llm import Gateway, PriceTable, ScriptedProvider
from memfl.memory import load_memory

REPO = Path(__file__).resolve().parents[1]
MINI = REPO / "fixtures" / "mini"


@pytest.fixture
def mini(tmp_path: Path) -> Path:
    """A private copy of the mini project, so commands may write next to it."""
    dest = tmp_path / "mini"
    shutil.copytree(MINI, dest, ignore=shutil.ignore_patterns(".memfl", "scripts"))
    return dest


@pytest.fixture(scope="session")
def snapshot():
    return index_tree(MINI)


@pytest.fixture(scope="session")
def bugs(snapshot):
    return load_bug_cases(snapshot, MINI)


@pytest.fixture(scope="session")
def memory(snapshot):
    return load_memory(MINI / "memory.json", snapshot.index_fingerprint)


@pytest.fixture
def scripted():
    """Factory: a gateway over the committed script (or another script file)."""

    def make(script: str | Path = MINI / "script.json", **kwargs) -> Gateway:
        kwargs.setdefault("prices", PriceTable(DEFAULT_PRICES))
        return Gateway(ScriptedProvider.from_file(script), **kwargs)

    return make
