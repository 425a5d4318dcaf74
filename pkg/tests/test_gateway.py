from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings, strategies as st

from looplab.core import TokenPrices, TokenUsage
from looplab.errors import AuthError, ScriptExhausted, TranscriptError, TransportError
from looplab.gateway import (
    CallTags,
    ChatRequest,
    Gateway,
    LiveChatProvider,
    Message,
    Role,
    ScriptedProvider,
    ScriptedTranscript,
    TokenLedger,
    estimate_usage,
    ledger_report,
    transcript_from_recording,
)

TAGS = CallTags("data_understanding", 1, 0)


def request_with(content: str = "hello") -> ChatRequest:
    return ChatRequest(model="m", messages=(Message(Role.USER, content),))


# -- request validation -----------------------------------------------------------


def test_empty_messages_rejected():
    with pytest.raises(ValueError):
        ChatRequest(model="m", messages=())


def test_system_message_must_be_first_and_single():
    with pytest.raises(ValueError):
        ChatRequest(
            model="m",
            messages=(Message(Role.USER, "u"), Message(Role.SYSTEM, "s")),
        )
    with pytest.raises(ValueError):
        ChatRequest(
            model="m",
            messages=(Message(Role.SYSTEM, "a"), Message(Role.SYSTEM, "b")),
        )


# -- scripted provider --------------------------------------------------------------


def test_scripted_match_and_usage():
    transcript = ScriptedTranscript().add(
        "data_understanding", 1, "*", "canned reply", TokenUsage(10, 5, 0)
    )
    provider = ScriptedProvider(transcript)
    gateway = Gateway(provider)
    response = gateway.chat(request_with(), TAGS)
    assert response.content == "canned reply"
    report = ledger_report(gateway.ledger)
    assert report.stages["data_understanding"] == TokenUsage(10, 5, 0)
    assert report.total.total_tokens == 15


def test_scripted_specificity_beats_order():
    transcript = (
        ScriptedTranscript()
        .add("*", "*", "*", "generic")
        .add("data_understanding", 1, 0, "specific")
    )
    provider = ScriptedProvider(transcript)
    assert provider.complete(request_with(), TAGS).content == "specific"
    assert provider.complete(request_with(), TAGS).content == "generic"


def test_scripted_duplicate_selectors_consume_in_order():
    transcript = (
        ScriptedTranscript()
        .add("data_understanding", 1, "*", "first")
        .add("data_understanding", 1, "*", "second")
    )
    provider = ScriptedProvider(transcript)
    assert provider.complete(request_with(), TAGS).content == "first"
    assert provider.complete(request_with(), TAGS).content == "second"
    with pytest.raises(ScriptExhausted):
        provider.complete(request_with(), TAGS)


def test_scripted_determinism():
    def run() -> list[str]:
        transcript = (
            ScriptedTranscript()
            .add("*", "*", "*", "a")
            .add("*", "*", "*", "b")
        )
        provider = ScriptedProvider(transcript)
        return [provider.complete(request_with(), TAGS).content for _ in range(2)]

    assert run() == run()


def test_estimated_usage_deterministic():
    request = request_with("x" * 41)
    transcript = ScriptedTranscript().add(reply="y" * 10)
    provider = ScriptedProvider(transcript)
    response = provider.complete(request, TAGS)
    assert response.usage == estimate_usage(request, "y" * 10)
    assert response.usage.input_tokens == 11  # ceil(41 / 4)


def test_transcript_file_round_trip(tmp_path):
    transcript = (
        ScriptedTranscript()
        .add("planning", 2, 1, "body with\n```python\nfences\n```", TokenUsage(7, 3, 1))
        .add("*", "*", "*", "wild ~~~~ tilde line")
    )
    path = tmp_path / "t.transcript"
    transcript.dump(path)
    loaded = ScriptedTranscript.load(path)
    assert loaded.entries == transcript.entries


def test_transcript_missing_header(tmp_path):
    path = tmp_path / "bad.transcript"
    path.write_text("@ stage=x\n~~~~~~~~\nhi\n~~~~~~~~\n", encoding="utf-8")
    with pytest.raises(TranscriptError):
        ScriptedTranscript.load(path)


# -- ledger ---------------------------------------------------------------------------

stage_names = st.sampled_from(["data_understanding", "planning", "code_execution", "meta"])
usage_values = st.builds(
    TokenUsage,
    input_tokens=st.integers(0, 1000),
    output_tokens=st.integers(0, 1000),
    cache_hit_tokens=st.just(0),
)
events = st.lists(st.tuples(stage_names, usage_values), max_size=20)


@given(events, events)
@settings(max_examples=100)
def test_ledger_additivity(batch_a, batch_b):
    separate = TokenLedger()
    combined = TokenLedger()
    for stage, usage in batch_a:
        separate.record(stage, usage)
        combined.record(stage, usage)
    report_a = separate.report()
    for stage, usage in batch_b:
        combined.record(stage, usage)
    report_b = TokenLedger()
    for stage, usage in batch_b:
        report_b.record(stage, usage)
    merged = combined.report()
    for stage in set(report_a.stages) | set(report_b.report().stages):
        expected = report_a.stages.get(stage, TokenUsage()) + report_b.report().stages.get(
            stage, TokenUsage()
        )
        assert merged.stages[stage] == expected
    assert merged.total == sum(merged.stages.values(), TokenUsage())


def test_zero_calls_zero_report():
    report = ledger_report(TokenLedger())
    assert report.stages == {}
    assert report.total == TokenUsage()


def test_gateway_prices_usage():
    transcript = ScriptedTranscript().add(reply="r", usage=TokenUsage(100, 50, 20))
    gateway = Gateway(ScriptedProvider(transcript), TokenPrices(0.01, 0.02, 0.001))
    response = gateway.chat(request_with(), TAGS)
    assert response.usage.cost == pytest.approx(100 * 0.01 + 50 * 0.02 + 20 * 0.001)


def test_token_cost_fixture_totals(tmp_path):
    from conftest import FIXTURES

    ledger = TokenLedger()
    rows = []
    for line in (FIXTURES / "benchmark" / "token_cost.tsv").read_text().splitlines():
        if line.startswith("#") or line.startswith("task") or not line.strip():
            continue
        cells = line.split("\t")
        usage = TokenUsage(
            int(float(cells[2]) * 1e6), int(float(cells[3]) * 1e6), int(float(cells[4]) * 1e6)
        )
        rows.append(usage)
        ledger.record("code_execution", usage)
    report = ledger.report()
    assert report.total.input_tokens == sum(u.input_tokens for u in rows)
    assert report.total.total_tokens == sum(u.total_tokens for u in rows)


# -- recording and replay ----------------------------------------------------------


def test_recording_and_replay_round_trip(tmp_path):
    transcript = ScriptedTranscript().add(
        "planning", 1, 0, "recorded reply", TokenUsage(9, 4, 2)
    )
    record_dir = tmp_path / "round_01" / "llm_calls"
    gateway = Gateway(ScriptedProvider(transcript), record_dir=record_dir)
    gateway.chat(request_with(), CallTags("planning", 1, 0))
    files = list(record_dir.glob("*.json"))
    assert len(files) == 1
    payload = json.loads(files[0].read_text())
    assert payload["response"]["content"] == "recorded reply"
    assert "latency" not in payload["response"]

    rebuilt = transcript_from_recording(tmp_path)
    assert len(rebuilt.entries) == 1
    entry = rebuilt.entries[0]
    assert entry.reply == "recorded reply"
    assert entry.stage == "planning" and entry.round_idx == 1
    assert entry.usage == TokenUsage(9, 4, 2)


# -- live provider against a local stub endpoint ---------------------------------------


class _Handler(BaseHTTPRequestHandler):
    script: list[tuple[int, dict]] = []
    cursor = 0

    def do_POST(self):  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        status, body = self.script[min(type(self).cursor, len(self.script) - 1)]
        type(self).cursor += 1
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):  # quiet
        pass


@pytest.fixture
def stub_endpoint():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1"
    server.shutdown()


_OK_BODY = {
    "choices": [{"message": {"content": "live says hi"}}],
    "usage": {"prompt_tokens": 12, "completion_tokens": 4, "prompt_cache_hit_tokens": 3},
}


def test_live_happy_path(stub_endpoint):
    _Handler.script, _Handler.cursor = [(200, _OK_BODY)], 0
    provider = LiveChatProvider(stub_endpoint, "secret-key", retries=0, timeout=5)
    response = provider.complete(request_with(), TAGS)
    assert response.content == "live says hi"
    assert response.usage == TokenUsage(12, 4, 3)
    assert response.latency >= 0


def test_live_retries_then_succeeds(stub_endpoint):
    _Handler.script, _Handler.cursor = [(500, {}), (200, _OK_BODY)], 0
    provider = LiveChatProvider(stub_endpoint, "k", retries=1, timeout=5, backoff_base=0.0)
    assert provider.complete(request_with(), TAGS).content == "live says hi"
    assert _Handler.cursor == 2


def test_live_auth_error_no_retry(stub_endpoint):
    _Handler.script, _Handler.cursor = [(401, {})], 0
    provider = LiveChatProvider(stub_endpoint, "bad-key", retries=3, timeout=5, backoff_base=0.0)
    with pytest.raises(AuthError):
        provider.complete(request_with(), TAGS)
    assert _Handler.cursor == 1


def test_live_unreachable_transport_error_after_retries(caplog):
    provider = LiveChatProvider(
        "http://127.0.0.1:9/v1", "topsecret-credential", retries=2, timeout=0.2, backoff_base=0.0
    )
    with caplog.at_level(logging.DEBUG):
        with pytest.raises(TransportError) as err:
            provider.complete(request_with(), TAGS)
    assert "3 attempts" in str(err.value)
    # the credential never leaks into the error or any log record
    assert "topsecret-credential" not in str(err.value)
    assert all("topsecret-credential" not in record.getMessage() for record in caplog.records)
