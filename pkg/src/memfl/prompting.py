"""Prompt templates, section rendering and parsing of model selections."""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path
from string import Template

from memfl.errors import UnparseableSelection
from memfl.model import BugCase

_FENCE_RE = re.compile(r"```[a-zA-Z]*[ \t]*\n?(.*?)```", re.S)
_ARRAY_RE = re.compile(r"\[[^\[\]]*\]", re.S)
_CAP_RE = re.compile(r"(?im)^\s*(?:[-*]\s*)?cap\s*[:=]\s*(\d+)\s*$")
_BLANKS_RE = re.compile(r"\n{3,}")


class PromptBook:
    """Plain-text templates with ``${name}`` placeholders.

    Templates ship in ``memfl/prompts``; a directory passed as ``override_dir``
    shadows individual files by name.
    """

    def __init__(self, override_dir: str | Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, Template] = {}

    def template(self, name: str) -> Template:
        if name not in self._cache:
            text = None
            if self.override_dir is not None:
                candidate = self.override_dir / f"{name}.txt"
                if candidate.is_file():
                    text = candidate.read_text(encoding="utf-8")
            if text is None:
                text = resources.files("memfl.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
            self._cache[name] = Template(text)
        return self._cache[name]

    def render(self, name: str, **values: object) -> str:
        text = self.template(name).substitute({k: str(v) for k, v in values.items()})
        return _BLANKS_RE.sub("\n\n", text).strip() + "\n"

    def messages(self, name: str, **values: object) -> list[tuple[str, str]]:
        return [("system", self.render("system")), ("user", self.render(name, **values))]


def section(title: str, body: str) -> str:
    """A markdown section, or nothing at all when ``body`` is blank."""
    body = body.strip("\n")
    if not body.strip():
        return ""
    return f"## {title}\n{body}"


def fenced(code: str, lang: str = "java") -> str:
    return f"```{lang}\n{code}\n```"


def render_bug_info(bug: BugCase, with_helpers: bool = True) -> str:
    test = bug.primary_test
    parts = [f"Error message:\n{bug.error_message.strip() or '(none)'}"]
    if bug.stack_trace:
        parts.append("Stack trace:\n" + "\n".join("  " + f.render() for f in bug.stack_trace))
    parts.append(f"Failing test {test.name}:\n" + fenced(test.source.strip("\n")))
    if with_helpers and test.helpers:
        helpers = "\n\n".join(f"// {h.name}\n{h.source.strip()}" for h in test.helpers)
        parts.append("Other test methods called by the failing test:\n" + fenced(helpers))
    return "\n\n".join(parts)


def extract_json_array(text: str) -> list[str]:
    """Pull a JSON array of strings out of a model reply.

    Fenced blocks are tried first, then any bare ``[...]`` span. Non-string
    items are ignored.
    """
    candidates = _FENCE_RE.findall(text) + _ARRAY_RE.findall(text)
    for blob in candidates:
        blob = blob.strip()
        try:
            value = json.loads(blob)
        except json.JSONDecodeError:
            inner = _ARRAY_RE.search(blob)
            if not inner:
                continue
            try:
                value = json.loads(inner.group(0))
            except json.JSONDecodeError:
                continue
        if isinstance(value, list):
            return [v.strip() for v in value if isinstance(v, str)]
    raise UnparseableSelection(f"no JSON array in reply: {text[:120]!r}")


def guidance_cap(guidance: str) -> int | None:
    """A ``cap: N`` line in step guidance overrides the default selection size."""
    matches = _CAP_RE.findall(guidance)
    if not matches:
        return None
    cap = int(matches[-1])
    return cap if cap > 0 else None
