"""Layered run configuration: command-line flags > environment > ``memfl.toml`` > defaults."""

from __future__ import annotations

import os
import random
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from memfl.errors import ValidationError

CONFIG_FILE = "memfl.toml"
PROVIDERS = ("live", "replay", "scripted", "dry-run")

# dollars per 1M tokens (input, output)
DEFAULT_PRICES: dict[str, tuple[str, str]] = {
    "gpt-4o-mini": ("0.15", "0.60"),
    "gpt-4.1-mini": ("0.40", "1.60"),
}


@dataclass(frozen=True)
class RunConfig:
    provider: str = "replay"
    model: str = "gpt-4o-mini"
    base_url: str = "https://api.openai.com/v1"
    api_key: str | None = field(default=None, repr=False)
    cassette: str | None = None
    script: str | None = None
    record: str | None = None
    prompts: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 2048
    max_in_flight: int = 4
    timeout: float = 60.0
    max_retries: int = 5
    workers: int = 4
    seed: int = 0
    prompt_budget: int = 30000
    summary_budget: int = 6000
    prefilter_cap: int = 60
    batch_size: int = 5
    iterations: int = 3
    folds: int = 5
    index_mode: str = "manifest"
    prices: Mapping[str, tuple[str, str]] = field(default_factory=lambda: dict(DEFAULT_PRICES))

    def rng(self) -> random.Random:
        """The run's single source of randomness."""
        return random.Random(self.seed)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_KNOWN = set(_FIELD_TYPES) - {"prices", "api_key"}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            if isinstance(value, bool):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"config key {key!r}: expected {kind}, got {value!r}") from None
    return None if value is None else str(value)


def read_config_file(path: Path) -> dict[str, Any]:
    if not path.is_file():
        return {}
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if "api_key" in doc or "api_key" in doc.get("provider", {}):
        raise ValidationError(f"{path}: api keys belong in the MEMFL_API_KEY environment variable")
    out: dict[str, Any] = {}
    sections = [doc] + [doc[s] for s in ("provider", "run", "pipeline", "memgen") if isinstance(doc.get(s), dict)]
    for sec in sections:
        for key, value in sec.items():
            if isinstance(value, dict):
                continue
            if key not in _KNOWN:
                raise ValidationError(f"{path}: unknown config key {key!r}")
            out[key] = _coerce(key, value)
    prices = doc.get("prices")
    if prices is not None:
        table = {}
        for model, entry in prices.items():
            if not isinstance(entry, dict) or not {"input", "output"} <= set(entry):
                raise ValidationError(f"{path}: prices.{model} needs input and output")
            table[model] = (str(entry["input"]), str(entry["output"]))
        out["prices"] = {**DEFAULT_PRICES, **table}
    return out


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if environ.get("MEMFL_API_KEY"):
        out["api_key"] = environ["MEMFL_API_KEY"]
    if environ.get("MEMFL_BASE_URL"):
        out["base_url"] = environ["MEMFL_BASE_URL"]
    if environ.get("MEMFL_PROVIDER"):
        out["provider"] = environ["MEMFL_PROVIDER"]
    return out


def load_config(
    project: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    config_path: str | Path | None = None,
) -> RunConfig:
    """Merge the layers; ``None`` flag values mean "not given"."""
    environ = os.environ if environ is None else environ
    path = Path(config_path) if config_path else (Path(project) / CONFIG_FILE if project else None)
    merged: dict[str, Any] = {}
    if path is not None:
        if config_path and not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        merged.update(read_config_file(path))
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None and k in _FIELD_TYPES})
    cfg = replace(RunConfig(), **merged)
    if cfg.provider not in PROVIDERS:
        raise ValidationError(f"unknown provider {cfg.provider!r}; expected one of {', '.join(PROVIDERS)}")
    return cfg
