"""Uniform chat-completion interface with two interchangeable providers.

``LiveChatProvider`` speaks the OpenAI-compatible HTTP wire format;
``ScriptedProvider`` replays a transcript deterministically so the whole
pipeline can run offline. A :class:`Gateway` wraps either one with a
per-stage token ledger and optional verbatim request/response recording.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Sequence

import requests

from .core import TokenPrices, TokenUsage
from .errors import AuthError, ScriptExhausted, TranscriptError, TransportError

TRANSCRIPT_HEADER = "#looplab-transcript v1"


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 4096
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        system_positions = [i for i, m in enumerate(self.messages) if m.role is Role.SYSTEM]
        if len(system_positions) > 1 or (system_positions and system_positions[0] != 0):
            raise ValueError("at most one system message, and it must come first")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if not 0.0 <= self.top_p <= 1.0:
            raise ValueError("top_p must be in [0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [{"role": m.role.value, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "extra": dict(self.extra),
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: TokenUsage
    latency: float = 0.0


@dataclass(frozen=True)
class CallTags:
    """Stage/round/step labels a call is accounted under."""

    stage: str
    round_idx: int
    step_idx: int


class ChatProvider(Protocol):
    def complete(self, request: ChatRequest, tags: CallTags) -> ChatResponse: ...


# --- token ledger -------------------------------------------------------------


@dataclass(frozen=True)
class LedgerReport:
    stages: Mapping[str, TokenUsage]
    total: TokenUsage


class TokenLedger:
    """Per-stage usage accumulator; safe for concurrent recording."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._stages: dict[str, TokenUsage] = {}

    def record(self, stage: str, usage: TokenUsage) -> None:
        with self._lock:
            self._stages[stage] = self._stages.get(stage, TokenUsage()) + usage

    def report(self) -> LedgerReport:
        with self._lock:
            stages = dict(self._stages)
        total = TokenUsage()
        for usage in stages.values():
            total = total + usage
        return LedgerReport(stages=stages, total=total)


def ledger_report(ledger: TokenLedger) -> LedgerReport:
    """Per-stage sums plus a grand total."""
    return ledger.report()


# --- live provider ------------------------------------------------------------

_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class LiveChatProvider:
    """OpenAI-compatible chat-completions client.

    Credentials are held privately and never logged or echoed into error
    messages. Transient transport failures are retried with exponential
    backoff up to ``retries`` additional attempts.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        retries: int = 3,
        timeout: float = 120.0,
        backoff_base: float = 0.5,
    ) -> None:
        if not base_url:
            raise AuthError("no base URL configured")
        if not api_key:
            raise AuthError("no API key configured")
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self.retries = retries
        self.timeout = timeout
        self.backoff_base = backoff_base

    def complete(self, request: ChatRequest, tags: CallTags) -> ChatResponse:
        payload: dict[str, Any] = {
            "model": request.model,
            "messages": [
                {"role": m.role.value, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        payload.update(request.extra)
        headers = {"Authorization": f"Bearer {self._api_key}"}
        url = f"{self.base_url}/chat/completions"

        last_error = "unknown transport failure"
        start = time.monotonic()
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                response = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__} contacting {url}"
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credential (HTTP {response.status_code})")
            if response.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {response.status_code} from {url}"
                continue
            if response.status_code != 200:
                raise TransportError(f"HTTP {response.status_code} from {url}")
            return self._parse(response, time.monotonic() - start)
        raise TransportError(f"{last_error} after {self.retries + 1} attempts")

    @staticmethod
    def _parse(response: requests.Response, latency: float) -> ChatResponse:
        try:
            data = response.json()
            content = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {type(exc).__name__}") from None
        usage_raw = data.get("usage") or {}
        details = usage_raw.get("prompt_tokens_details") or {}
        cache = int(
            usage_raw.get("prompt_cache_hit_tokens") or details.get("cached_tokens") or 0
        )
        input_tokens = int(usage_raw.get("prompt_tokens", 0))
        usage = TokenUsage(
            input_tokens=input_tokens,
            output_tokens=int(usage_raw.get("completion_tokens", 0)),
            cache_hit_tokens=min(cache, input_tokens),
        )
        return ChatResponse(content=content, usage=usage, latency=latency)


# --- scripted provider ----------------------------------------------------------

WILDCARD = "*"


@dataclass(frozen=True)
class TranscriptEntry:
    """One canned reply, addressed by a (stage, round, step) selector.

    Selector fields may be the literal ``"*"`` to match anything. Explicit
    usage counts are optional; absent ones are estimated deterministically
    from text lengths.
    """

    stage: str = WILDCARD
    round_idx: int | str = WILDCARD
    step_idx: int | str = WILDCARD
    reply: str = ""
    usage: Optional[TokenUsage] = None

    def matches(self, tags: CallTags) -> bool:
        if self.stage != WILDCARD and self.stage != tags.stage:
            return False
        if self.round_idx != WILDCARD and self.round_idx != tags.round_idx:
            return False
        if self.step_idx != WILDCARD and self.step_idx != tags.step_idx:
            return False
        return True

    def specificity(self) -> int:
        return sum(
            1 for part in (self.stage, self.round_idx, self.step_idx) if part != WILDCARD
        )


def estimate_usage(request: ChatRequest, reply: str) -> TokenUsage:
    """Deterministic stand-in counts for entries without explicit usage."""
    prompt_chars = sum(len(m.content) for m in request.messages)
    return TokenUsage(
        input_tokens=math.ceil(prompt_chars / 4),
        output_tokens=math.ceil(len(reply) / 4),
        cache_hit_tokens=0,
    )


class ScriptedTranscript:
    """Ordered canned replies for a deterministic offline run."""

    def __init__(self, entries: Sequence[TranscriptEntry] = ()) -> None:
        self.entries: list[TranscriptEntry] = list(entries)

    def add(
        self,
        stage: str = WILDCARD,
        round_idx: int | str = WILDCARD,
        step_idx: int | str = WILDCARD,
        reply: str = "",
        usage: Optional[TokenUsage] = None,
    ) -> "ScriptedTranscript":
        self.entries.append(TranscriptEntry(stage, round_idx, step_idx, reply, usage))
        return self

    @staticmethod
    def _parse_selector_field(value: str) -> int | str:
        return WILDCARD if value == WILDCARD else int(value)

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedTranscript":
        """Parse the transcript file format documented in PROTOCOL.md."""
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if not lines or lines[0].strip() != TRANSCRIPT_HEADER:
            raise TranscriptError(f"missing header line {TRANSCRIPT_HEADER!r} in {path}")
        entries: list[TranscriptEntry] = []
        i = 1
        while i < len(lines):
            line = lines[i].strip()
            i += 1
            if not line or line.startswith("#"):
                continue
            if not line.startswith("@"):
                raise TranscriptError(f"expected selector header at line {i}, got {line!r}")
            fields: dict[str, str] = {}
            for token in line[1:].split():
                if "=" not in token:
                    raise TranscriptError(f"bad selector token {token!r} at line {i}")
                key, value = token.split("=", 1)
                fields[key] = value
            if i >= len(lines) or not _is_fence(lines[i]):
                raise TranscriptError(f"expected reply fence after selector at line {i}")
            fence = lines[i].strip()
            i += 1
            body: list[str] = []
            while i < len(lines) and lines[i].strip() != fence:
                body.append(lines[i])
                i += 1
            if i >= len(lines):
                raise TranscriptError("unterminated reply fence at end of transcript")
            i += 1
            usage = None
            if "usage" in fields:
                parts = fields["usage"].split(",")
                if len(parts) != 3:
                    raise TranscriptError(f"usage must be in,out,cache; got {fields['usage']!r}")
                usage = TokenUsage(int(parts[0]), int(parts[1]), int(parts[2]))
            try:
                entries.append(
                    TranscriptEntry(
                        stage=fields.get("stage", WILDCARD),
                        round_idx=cls._parse_selector_field(fields.get("round", WILDCARD)),
                        step_idx=cls._parse_selector_field(fields.get("step", WILDCARD)),
                        reply="\n".join(body),
                        usage=usage,
                    )
                )
            except ValueError as exc:
                raise TranscriptError(f"bad selector near line {i}: {exc}") from None
        return cls(entries)

    def dump(self, path: str | Path) -> None:
        out = [TRANSCRIPT_HEADER]
        for entry in self.entries:
            header = f"@ stage={entry.stage} round={entry.round_idx} step={entry.step_idx}"
            if entry.usage is not None:
                u = entry.usage
                header += f" usage={u.input_tokens},{u.output_tokens},{u.cache_hit_tokens}"
            fence = "~" * 8
            while fence in entry.reply:
                fence += "~"
            out.extend([header, fence, entry.reply, fence])
        Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def _is_fence(line: str) -> bool:
    stripped = line.strip()
    return len(stripped) >= 4 and set(stripped) == {"~"}


class ScriptedProvider:
    """Replays a transcript; every call consumes exactly one entry.

    Among unconsumed matching entries the most specific selector wins, and
    ties go to document order, so one transcript can carry a wildcard happy
    path with targeted overrides for failure injection.
    """

    def __init__(self, transcript: ScriptedTranscript) -> None:
        self._transcript = transcript
        self._consumed: set[int] = set()
        self.calls: list[CallTags] = []

    def complete(self, request: ChatRequest, tags: CallTags) -> ChatResponse:
        best_index: Optional[int] = None
        best_specificity = -1
        for index, entry in enumerate(self._transcript.entries):
            if index in self._consumed or not entry.matches(tags):
                continue
            if entry.specificity() > best_specificity:
                best_index = index
                best_specificity = entry.specificity()
        if best_index is None:
            raise ScriptExhausted(
                f"no transcript entry for stage={tags.stage} "
                f"round={tags.round_idx} step={tags.step_idx}"
            )
        self._consumed.add(best_index)
        self.calls.append(tags)
        entry = self._transcript.entries[best_index]
        usage = entry.usage if entry.usage is not None else estimate_usage(request, entry.reply)
        return ChatResponse(content=entry.reply, usage=usage, latency=0.0)


# --- gateway --------------------------------------------------------------------


class Gateway:
    """Provider plus ledger plus optional verbatim call recording.

    ``record_dir`` may be repointed between stages; when set, every
    request/response pair lands there as a JSON file (no wall-clock data,
    so recorded trees stay byte-reproducible).
    """

    def __init__(
        self,
        provider: ChatProvider,
        token_prices: TokenPrices = TokenPrices(),
        record_dir: Optional[Path] = None,
    ) -> None:
        self.provider = provider
        self.token_prices = token_prices
        self.record_dir = record_dir
        self.ledger = TokenLedger()
        self._seq = 0

    def chat(self, request: ChatRequest, tags: CallTags) -> ChatResponse:
        response = self.provider.complete(request, tags)
        usage = TokenUsage.priced(
            response.usage.input_tokens,
            response.usage.output_tokens,
            response.usage.cache_hit_tokens,
            self.token_prices,
        )
        priced = ChatResponse(content=response.content, usage=usage, latency=response.latency)
        self.ledger.record(tags.stage, usage)
        if self.record_dir is not None:
            self._record(request, priced, tags)
        return priced

    def _record(self, request: ChatRequest, response: ChatResponse, tags: CallTags) -> None:
        assert self.record_dir is not None
        self.record_dir.mkdir(parents=True, exist_ok=True)
        self._seq += 1
        name = f"{self._seq:04d}_{tags.stage}_r{tags.round_idx:02d}_s{tags.step_idx:02d}.json"
        payload = {
            "tags": {"stage": tags.stage, "round_idx": tags.round_idx, "step_idx": tags.step_idx},
            "request": request.to_dict(),
            "response": {"content": response.content, "usage": response.usage.to_dict()},
        }
        (self.record_dir / name).write_text(
            json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def transcript_from_recording(root: Path) -> ScriptedTranscript:
    """Rebuild a transcript from a previous run's recorded call files.

    Scans ``root`` recursively for the JSON files written by
    :meth:`Gateway._record`, ordered by their sequence-numbered names.
    """
    calls = sorted(root.rglob("llm_calls/*.json"), key=lambda p: p.name)
    transcript = ScriptedTranscript()
    for path in calls:
        data = json.loads(path.read_text(encoding="utf-8"))
        tags = data["tags"]
        usage = TokenUsage.from_dict(data["response"].get("usage", {}))
        transcript.add(
            stage=tags["stage"],
            round_idx=tags["round_idx"],
            step_idx=tags["step_idx"],
            reply=data["response"]["content"],
            usage=TokenUsage(usage.input_tokens, usage.output_tokens, usage.cache_hit_tokens),
        )
    return transcript
