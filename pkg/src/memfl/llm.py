"""Model access: providers, cassettes, retries and cost accounting.

All model calls go through :class:`Gateway`. Providers only turn a
:class:`ChatRequest` into a :class:`ProviderReply`; the gateway owns the ledger,
the optional prompt cache, pricing and the in-flight limit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from memfl.errors import CassetteMiss, ProviderUnavailable, ScriptExhausted, ValidationError

log = logging.getLogger(__name__)

MICRO = Decimal(1_000_000)


def estimate_tokens(text: str) -> int:
    """Byte heuristic used when no provider-side count exists: tokens ~ bytes / 4."""
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048
    tag: str = ""
    step: str = ""
    bug_id: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValidationError("a chat request needs at least one message")
        if not 0 <= self.temperature <= 2:
            raise ValidationError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ValidationError("max_output_tokens must be positive")

    @property
    def prompt_hash(self) -> str:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [[r, c] for r, c in self.messages],
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def prompt_text(self) -> str:
        return "\n\n".join(c for _, c in self.messages)


@dataclass(frozen=True)
class ProviderReply:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float
    retries: int = 0


@dataclass(frozen=True)
class ChatExchange:
    request: ChatRequest
    reply_text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float
    cost_micro: int
    retries: int = 0
    cached: bool = False

    @property
    def cost(self) -> Decimal:
        return Decimal(self.cost_micro) / MICRO

    @property
    def latency_us(self) -> int:
        return round(self.latency * 1_000_000)


class PriceTable:
    """Model name -> (input, output) price in dollars per 1M tokens."""

    def __init__(self, prices: Mapping[str, tuple[float | str | Decimal, float | str | Decimal]] | None = None):
        self.prices: dict[str, tuple[Decimal, Decimal]] = {}
        for model, (p_in, p_out) in (prices or {}).items():
            d_in, d_out = Decimal(str(p_in)), Decimal(str(p_out))
            if d_in < 0 or d_out < 0:
                raise ValidationError(f"negative price for {model}")
            self.prices[model] = (d_in, d_out)

    def cost_micro(self, model: str, prompt_tokens: int, completion_tokens: int) -> int:
        # dollars per 1M tokens == micro-dollars per token
        p_in, p_out = self.prices.get(model, (Decimal(0), Decimal(0)))
        exact = p_in * prompt_tokens + p_out * completion_tokens
        return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


class Provider(Protocol):
    def send(self, request: ChatRequest) -> ProviderReply: ...


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


@dataclass
class _Rule:
    pattern: re.Pattern
    replies: list[str]
    repeat: bool = False
    used: int = 0


class ScriptedProvider:
    """Queued replies selected by a regex over the request tag.

    A script is a list of rules ``{"match": regex, "replies": [...], "repeat": bool}``.
    The first rule whose pattern fully matches the tag and still has a reply
    answers; ``repeat`` rules keep returning their last reply. A bare list of
    strings is shorthand for one catch-all queue.
    """

    def __init__(
        self,
        rules: Sequence[Mapping] | Sequence[str],
        prompt_tokens: int | None = None,
        completion_tokens: int | None = None,
        latency: float = 0.0,
    ):
        if rules and all(isinstance(r, str) for r in rules):
            rules = [{"match": ".*", "replies": list(rules)}]
        self.rules = [
            _Rule(re.compile(r["match"]), list(r["replies"]), bool(r.get("repeat", False))) for r in rules
        ]
        self.prompt_tokens = prompt_tokens
        self.completion_tokens = completion_tokens
        self.latency = latency
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, list):
            return cls(data)
        tokens = data.get("tokens", {})
        return cls(
            data["rules"],
            prompt_tokens=tokens.get("prompt"),
            completion_tokens=tokens.get("completion"),
            latency=float(data.get("latency", 0.0)),
        )

    def send(self, request: ChatRequest) -> ProviderReply:
        with self._lock:
            self.requests.append(request)
            for rule in self.rules:
                if not rule.pattern.fullmatch(request.tag):
                    continue
                if rule.used < len(rule.replies):
                    text = rule.replies[rule.used]
                    rule.used += 1
                elif rule.repeat and rule.replies:
                    text = rule.replies[-1]
                else:
                    continue
                pt = self.prompt_tokens if self.prompt_tokens is not None else estimate_tokens(request.prompt_text)
                ct = self.completion_tokens if self.completion_tokens is not None else estimate_tokens(text)
                return ProviderReply(text, pt, ct, self.latency)
        raise ScriptExhausted(f"no scripted reply left for tag {request.tag!r}")


@dataclass(frozen=True)
class CassetteEntry:
    tag: str
    prompt_hash: str
    reply: str
    prompt_tokens: int
    completion_tokens: int
    latency: float = 0.0

    def to_json(self) -> dict:
        return {
            "tag": self.tag,
            "prompt_hash": self.prompt_hash,
            "reply": self.reply,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency": self.latency,
        }


def read_cassette(path: str | Path) -> list[CassetteEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            entries.append(
                CassetteEntry(
                    d["tag"], d["prompt_hash"], d["reply"],
                    int(d["prompt_tokens"]), int(d["completion_tokens"]), float(d.get("latency", 0.0)),
                )
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad cassette line ({exc})") from None
    return entries


def write_cassette(path: str | Path, entries: Iterable[CassetteEntry]) -> None:
    ordered = sorted(entries, key=lambda e: (e.tag, e.prompt_hash))
    text = "".join(json.dumps(e.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for e in ordered)
    Path(path).write_text(text, encoding="utf-8")


class ReplayProvider:
    """Serves recorded exchanges keyed by (tag, prompt hash)."""

    def __init__(self, entries: Iterable[CassetteEntry]):
        self.entries = {(e.tag, e.prompt_hash): e for e in entries}

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayProvider":
        return cls(read_cassette(path))

    def send(self, request: ChatRequest) -> ProviderReply:
        h = request.prompt_hash
        entry = self.entries.get((request.tag, h))
        if entry is None:
            raise CassetteMiss(request.tag, h)
        return ProviderReply(entry.reply, entry.prompt_tokens, entry.completion_tokens, entry.latency)


class RecordingProvider:
    """Wraps another provider and collects cassette entries; call :meth:`save` when done."""

    def __init__(self, inner: Provider):
        self.inner = inner
        self.entries: list[CassetteEntry] = []
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> ProviderReply:
        reply = self.inner.send(request)
        with self._lock:
            self.entries.append(
                CassetteEntry(request.tag, request.prompt_hash, reply.text, reply.prompt_tokens, reply.completion_tokens, reply.latency)
            )
        return reply

    def save(self, path: str | Path) -> None:
        write_cassette(path, self.entries)


class DryRunProvider:
    """Collects prompts without contacting any model; every reply is empty."""

    def __init__(self, sink: Callable[[ChatRequest], None] | None = None):
        self.requests: list[ChatRequest] = []
        self.sink = sink

    def send(self, request: ChatRequest) -> ProviderReply:
        self.requests.append(request)
        if self.sink is not None:
            self.sink(request)
        return ProviderReply("", 0, 0, 0.0)


class _Transient(Exception):
    pass


class LiveProvider:
    """Chat-completion HTTP client with bounded exponential backoff.

    Timeouts, 429 and 5xx responses are retried up to ``max_retries`` times,
    sleeping ``backoff_base * 2**k`` seconds plus up to ``backoff_base`` of
    jitter before retry ``k``.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        timeout: float = 60.0,
        max_retries: int = 5,
        backoff_base: float = 1.0,
        rng: random.Random | None = None,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.rng = rng or random.Random(0)
        self.sleep = sleep
        self.client = client or httpx.Client(timeout=timeout)

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.client.post(self.url, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise _Transient(f"timeout: {exc}") from None
        except httpx.HTTPError as exc:
            raise ProviderUnavailable(f"request to {self.url} failed: {exc}") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def send(self, request: ChatRequest) -> ProviderReply:
        payload = {
            "model": request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        start = time.perf_counter()
        retries = 0
        while True:
            try:
                data = self._post(payload)
                break
            except _Transient as exc:
                if retries >= self.max_retries:
                    raise ProviderUnavailable(f"{request.tag}: retries exhausted after {retries} ({exc})") from None
                delay = self.backoff_base * 2**retries + self.rng.uniform(0, self.backoff_base)
                log.info("transient failure on %s (%s); retry %d in %.2fs", request.tag, exc, retries + 1, delay)
                self.sleep(delay)
                retries += 1
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ProviderUnavailable(f"malformed completion payload for {request.tag}") from None
        usage = data.get("usage") or {}
        pt = int(usage.get("prompt_tokens", estimate_tokens(request.prompt_text)))
        ct = int(usage.get("completion_tokens", estimate_tokens(text)))
        return ProviderReply(text, pt, ct, time.perf_counter() - start, retries)


# ---------------------------------------------------------------------------
# gateway
# ---------------------------------------------------------------------------


class Gateway:
    """The single choke-point for model calls; safe to share between threads."""

    def __init__(
        self,
        provider: Provider,
        model: str = "gpt-4o-mini",
        prices: PriceTable | None = None,
        temperature: float = 0.0,
        max_output_tokens: int = 2048,
        max_in_flight: int = 4,
        cache: bool = False,
    ):
        self.provider = provider
        self.model = model
        self.prices = prices or PriceTable()
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens
        self.ledger: list[ChatExchange] = []
        self._tags: set[str] = set()
        self._cache: dict[str, ChatExchange] | None = {} if cache else None
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def ask(self, tag: str, messages: Sequence[tuple[str, str]], step: str = "", bug_id: str = "") -> ChatExchange:
        request = ChatRequest(
            model=self.model,
            messages=tuple((r, c) for r, c in messages),
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            tag=tag,
            step=step,
            bug_id=bug_id,
        )
        return self.complete(request)

    def complete(self, request: ChatRequest) -> ChatExchange:
        with self._lock:
            if request.tag in self._tags:
                raise ValidationError(f"request tag {request.tag!r} reused within one run")
            self._tags.add(request.tag)
            cached = self._cache.get(request.prompt_hash) if self._cache is not None else None
        if cached is not None:
            exchange = ChatExchange(request, cached.reply_text, 0, 0, 0.0, 0, cached=True)
        else:
            with self._slots:
                reply = self.provider.send(request)
            cost = self.prices.cost_micro(request.model, reply.prompt_tokens, reply.completion_tokens)
            exchange = ChatExchange(
                request, reply.text, reply.prompt_tokens, reply.completion_tokens, reply.latency, cost, reply.retries
            )
        with self._lock:
            self.ledger.append(exchange)
            if self._cache is not None and not exchange.cached:
                self._cache.setdefault(request.prompt_hash, exchange)
        return exchange

    def exchanges(self, tag_prefix: str = "") -> list[ChatExchange]:
        with self._lock:
            return [e for e in self.ledger if e.request.tag.startswith(tag_prefix)]


@dataclass
class CostLine:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_micro: int = 0
    time_us: int = 0
    retries: int = 0

    def add(self, e: ChatExchange) -> None:
        self.calls += 1
        self.prompt_tokens += e.prompt_tokens
        self.completion_tokens += e.completion_tokens
        self.cost_micro += e.cost_micro
        self.time_us += e.latency_us
        self.retries += e.retries

    @property
    def time_s(self) -> float:
        return self.time_us / 1_000_000

    @property
    def cost(self) -> Decimal:
        return Decimal(self.cost_micro) / MICRO


@dataclass
class CostReport:
    total: CostLine
    per_step: dict[str, CostLine] = field(default_factory=dict)
    per_bug: dict[str, CostLine] = field(default_factory=dict)

    @property
    def bug_count(self) -> int:
        return len(self.per_bug)

    @property
    def mean_cost_per_bug(self) -> Decimal:
        """Mean dollars per bug, over exchanges attributed to a bug."""
        if not self.per_bug:
            return Decimal(0)
        return Decimal(sum(c.cost_micro for c in self.per_bug.values())) / MICRO / len(self.per_bug)

    @property
    def mean_time_per_bug(self) -> float:
        if not self.per_bug:
            return 0.0
        return sum(c.time_us for c in self.per_bug.values()) / 1_000_000 / len(self.per_bug)


def run_cost_report(ledger: Sequence[ChatExchange]) -> CostReport:
    if not ledger:
        raise ValidationError("cost report needs at least one exchange")
    total = CostLine()
    per_step: dict[str, CostLine] = defaultdict(CostLine)
    per_bug: dict[str, CostLine] = defaultdict(CostLine)
    for e in ledger:
        total.add(e)
        per_step[e.request.step or "other"].add(e)
        if e.request.bug_id:
            per_bug[e.request.bug_id].add(e)
    return CostReport(total, dict(sorted(per_step.items())), dict(sorted(per_bug.items())))
