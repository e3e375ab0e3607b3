from __future__ import annotations

import json
import threading
import time
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from memfl.errors import CassetteMiss, ProviderUnavailable, ScriptExhausted, ValidationError
from memfl.llm import (
    ChatRequest,
    DryRunProvider,
    Gateway,
    LiveProvider,
    PriceTable,
    ProviderReply,
    RecordingProvider,
    ReplayProvider,
    ScriptedProvider,
    estimate_tokens,
    read_cassette,
    run_cost_report,
    write_cassette,
)

MSG = [("system", "sys"), ("user", "hello")]


def test_estimate_tokens_is_ceiling_of_bytes_over_four():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
    assert estimate_tokens("é") == 1  # two bytes


def test_price_table_rounds_half_even():
    prices = PriceTable({"m": ("0.5", "0")})
    assert prices.cost_micro("m", 1, 0) == 0  # 0.5 -> 0
    assert prices.cost_micro("m", 3, 0) == 2  # 1.5 -> 2
    assert prices.cost_micro("unknown", 100, 100) == 0
    with pytest.raises(ValidationError):
        PriceTable({"m": ("-1", "0")})


def test_prompt_hash_ignores_tag():
    a = ChatRequest("m", tuple(MSG), tag="x")
    b = ChatRequest("m", tuple(MSG), tag="y")
    c = ChatRequest("m", (("user", "other"),), tag="x")
    assert a.prompt_hash == b.prompt_hash != c.prompt_hash


def test_scripted_rules_and_exhaustion():
    p = ScriptedProvider([
        {"match": "a/.*", "replies": ["one", "two"]},
        {"match": "b", "replies": ["bee"], "repeat": True},
    ])
    gw = Gateway(p)
    assert gw.ask("a/1", MSG).reply_text == "one"
    assert gw.ask("a/2", MSG).reply_text == "two"
    assert gw.ask("b", MSG).reply_text == "bee"
    with pytest.raises(ScriptExhausted):
        gw.ask("a/3", MSG)


def test_tags_must_be_unique():
    gw = Gateway(ScriptedProvider(["x", "y"]))
    gw.ask("t", MSG)
    with pytest.raises(ValidationError):
        gw.ask("t", MSG)


def test_record_then_replay(tmp_path):
    rec = RecordingProvider(ScriptedProvider(["r1", "r2"], latency=0.5))
    gw = Gateway(rec)
    gw.ask("t1", MSG)
    gw.ask("t2", [("user", "different")])
    path = tmp_path / "c.jsonl"
    rec.save(path)
    entries = read_cassette(path)
    assert [e.tag for e in entries] == ["t1", "t2"]

    replay = Gateway(ReplayProvider.from_file(path))
    assert replay.ask("t1", MSG).reply_text == "r1"
    ex = replay.ask("t2", [("user", "different")])
    assert ex.reply_text == "r2" and ex.latency == 0.5
    with pytest.raises(CassetteMiss) as info:
        replay.ask("t3", MSG)
    assert info.value.tag == "t3"


def test_replay_misses_on_prompt_change(tmp_path):
    rec = RecordingProvider(ScriptedProvider(["r1"]))
    Gateway(rec).ask("t1", MSG)
    write_cassette(tmp_path / "c.jsonl", rec.entries)
    with pytest.raises(CassetteMiss):
        Gateway(ReplayProvider.from_file(tmp_path / "c.jsonl")).ask("t1", [("user", "changed")])


def test_bad_cassette_line(tmp_path):
    (tmp_path / "c.jsonl").write_text('{"tag": "x"}\n')
    with pytest.raises(ValidationError):
        read_cassette(tmp_path / "c.jsonl")


def test_dry_run_collects_requests():
    seen = []
    p = DryRunProvider(seen.append)
    ex = Gateway(p).ask("t", MSG)
    assert ex.reply_text == "" and ex.cost_micro == 0
    assert [r.tag for r in seen] == ["t"] == [r.tag for r in p.requests]


def test_cache_hits_are_free():
    p = ScriptedProvider(["once"], prompt_tokens=100, completion_tokens=10)
    gw = Gateway(p, prices=PriceTable({"gpt-4o-mini": ("1", "1")}), cache=True)
    first = gw.ask("a", MSG)
    second = gw.ask("b", MSG)
    assert second.cached and second.reply_text == "once" and second.cost_micro == 0
    assert first.cost_micro == 110
    assert len(p.requests) == 1


def test_in_flight_limit():
    class Slow:
        def __init__(self):
            self.active = 0
            self.peak = 0
            self.lock = threading.Lock()

        def send(self, request):
            with self.lock:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(0.02)
            with self.lock:
                self.active -= 1
            return ProviderReply("ok", 1, 1, 0.0)

    slow = Slow()
    gw = Gateway(slow, max_in_flight=2)
    threads = [threading.Thread(target=gw.ask, args=(f"t{i}", MSG)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert slow.peak == 2
    assert len(gw.ledger) == 8


def test_cost_report_exact_over_fifty_calls():
    p = ScriptedProvider([f"reply {i}" * (i % 7 + 1) for i in range(50)], latency=0.123457)
    gw = Gateway(p, prices=PriceTable({"gpt-4o-mini": ("0.15", "0.60")}))
    for i in range(50):
        gw.ask(f"s{i % 3}/b{i % 5}/{i}", [("user", "x" * (i * 13 + 1))], step=f"s{i % 3}", bug_id=f"b{i % 5}")
    report = run_cost_report(gw.ledger)
    assert report.total.cost_micro == sum(e.cost_micro for e in gw.ledger)
    assert report.total.calls == 50
    assert sum(c.cost_micro for c in report.per_step.values()) == report.total.cost_micro
    assert sum(c.time_us for c in report.per_bug.values()) == 50 * 123457
    assert report.mean_cost_per_bug == Decimal(report.total.cost_micro) / Decimal(10**6) / 5
    with pytest.raises(ValidationError):
        run_cost_report([])


# -- live provider against a local stub -------------------------------------


class _Stub(BaseHTTPRequestHandler):
    script: list[int] = []
    calls: list[dict] = []

    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).calls.append({"body": body, "auth": self.headers.get("Authorization")})
        status = type(self).script.pop(0) if type(self).script else 200
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if status == 200:
            payload = {"choices": [{"message": {"content": "pong"}}],
                       "usage": {"prompt_tokens": 7, "completion_tokens": 2}}
            self.wfile.write(json.dumps(payload).encode())
        else:
            self.wfile.write(b'{"error": "nope"}')

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _Stub.script = []
    _Stub.calls = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1"
    server.shutdown()


def test_live_retries_transient_errors(stub_server):
    _Stub.script = [500, 503, 429]
    sleeps = []
    provider = LiveProvider(stub_server, "k3y", sleep=sleeps.append, backoff_base=0.5)
    ex = Gateway(provider).ask("t", MSG)
    assert ex.reply_text == "pong"
    assert ex.retries == 3
    assert (ex.prompt_tokens, ex.completion_tokens) == (7, 2)
    assert len(_Stub.calls) == 4
    assert _Stub.calls[0]["auth"] == "Bearer k3y"
    assert _Stub.calls[0]["body"]["messages"][1] == {"role": "user", "content": "hello"}
    for k, delay in enumerate(sleeps):
        assert 0.5 * 2**k <= delay <= 0.5 * 2**k + 0.5


def test_live_gives_up_after_max_retries(stub_server):
    _Stub.script = [500] * 10
    provider = LiveProvider(stub_server, None, sleep=lambda s: None, max_retries=5)
    with pytest.raises(ProviderUnavailable):
        Gateway(provider).ask("t", MSG)
    assert len(_Stub.calls) == 6


def test_live_does_not_retry_client_errors(stub_server):
    _Stub.script = [400]
    provider = LiveProvider(stub_server, None, sleep=lambda s: None)
    with pytest.raises(ProviderUnavailable):
        Gateway(provider).ask("t", MSG)
    assert len(_Stub.calls) == 1


def test_live_unreachable_endpoint():
    provider = LiveProvider("http://127.0.0.1:9", None, timeout=1.0, sleep=lambda s: None)
    with pytest.raises(ProviderUnavailable):
        Gateway(provider).ask("t", MSG)
