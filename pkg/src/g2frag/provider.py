"""Multimodal completion backends behind one client.

Two backends speak the same interface: an HTTP client using the
OpenAI-compatible chat-completions wire format (images as data-URL content
blocks), and a deterministic scripted mock so the whole pipeline runs
offline. Retry with exponential backoff and a shared token-bucket rate
limiter live in the client, not the backends.
"""

from __future__ import annotations

import base64
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "G2F_API_KEY"
API_BASE_ENV = "G2F_API_BASE"


# ---------------------------------------------------------------------------
# Request / response types
# ---------------------------------------------------------------------------


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"


Part = TextPart | ImagePart


@dataclass(frozen=True)
class Message:
    role: Role
    parts: tuple[Part, ...]


@dataclass(frozen=True)
class ProviderRequest:
    model_name: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        for msg in self.messages:
            for part in msg.parts:
                if isinstance(part, ImagePart) and not part.media_type.startswith("image/"):
                    raise ValueError(f"bad media type {part.media_type!r}")

    def text_content(self) -> str:
        """All text parts joined, prefixed by role — what mock matchers see."""
        chunks = []
        for msg in self.messages:
            for part in msg.parts:
                if isinstance(part, TextPart):
                    chunks.append(f"[{msg.role.value}] {part.text}")
        return "\n".join(chunks)

    def image_parts(self) -> list[ImagePart]:
        return [p for m in self.messages for p in m.parts if isinstance(p, ImagePart)]


def text_request(model_name: str, system: str | None, user: str, max_tokens: int = 1024) -> ProviderRequest:
    """Convenience constructor for text-only requests."""
    messages: list[Message] = []
    if system:
        messages.append(Message(Role.SYSTEM, (TextPart(system),)))
    messages.append(Message(Role.USER, (TextPart(user),)))
    return ProviderRequest(model_name=model_name, messages=tuple(messages), max_tokens=max_tokens)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    usage: Usage = Usage()
    latency_ms: int = 0


# ---------------------------------------------------------------------------
# Errors and retry policy
# ---------------------------------------------------------------------------


class FailureKind(str, Enum):
    TIMEOUT = "Timeout"
    RATE_LIMITED = "RateLimited"
    SERVER_ERROR = "ServerError"


class ProviderError(Exception):
    """Base provider failure; `failure_kind` is set on retryable subclasses."""

    failure_kind: FailureKind | None = None


class AuthError(ProviderError):
    """Bad credential; never retried."""


class RateLimitedError(ProviderError):
    failure_kind = FailureKind.RATE_LIMITED


class ProviderTimeout(ProviderError):
    failure_kind = FailureKind.TIMEOUT


class ServerError(ProviderError):
    failure_kind = FailureKind.SERVER_ERROR


class MalformedResponse(ProviderError):
    """Backend reply did not match the expected wire shape."""


class MissingFactor(ProviderError):
    def __init__(self, factor: str):
        super().__init__(f"reply omitted factor {factor!r}")
        self.factor = factor


class ScoreParseError(ProviderError):
    pass


class UnmatchedRequest(ProviderError):
    """Mock script had no entry for this request (scripts never default silently)."""


_ERROR_BY_NAME = {
    "AuthError": AuthError,
    "RateLimited": RateLimitedError,
    "Timeout": ProviderTimeout,
    "ServerError": ServerError,
    "MalformedResponse": MalformedResponse,
}


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: int = 200
    backoff_multiplier: float = 2.0
    retry_on: frozenset[FailureKind] = frozenset(
        {FailureKind.TIMEOUT, FailureKind.RATE_LIMITED, FailureKind.SERVER_ERROR}
    )

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff_ms <= 0:
            raise ValueError("base_backoff_ms must be positive")
        if self.backoff_multiplier < 1:
            raise ValueError("backoff_multiplier must be >= 1")

    def backoff_ms_before(self, attempt: int) -> float:
        """Delay inserted before attempt k (k >= 2): base * multiplier^(k-2)."""
        if attempt < 2:
            return 0.0
        return self.base_backoff_ms * self.backoff_multiplier ** (attempt - 2)


# ---------------------------------------------------------------------------
# Rate limiting
# ---------------------------------------------------------------------------


class TokenBucket:
    """Requests-per-minute token bucket shared across callers of one client."""

    def __init__(self, per_minute: int, clock: Callable[[], float] = time.monotonic, sleep=time.sleep):
        if per_minute < 1:
            raise ValueError("per_minute must be >= 1")
        self.per_minute = per_minute
        self._tokens = float(per_minute)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.per_minute, self._tokens + (now - self._last) * self.per_minute / 60.0)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) * 60.0 / self.per_minute
            self._sleep(wait)


# ---------------------------------------------------------------------------
# HTTP backend (OpenAI-compatible chat completions)
# ---------------------------------------------------------------------------


def _to_wire(request: ProviderRequest) -> dict:
    messages = []
    for msg in request.messages:
        content = []
        for part in msg.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                b64 = base64.b64encode(part.data).decode("ascii")
                content.append(
                    {"type": "image_url", "image_url": {"url": f"data:{part.media_type};base64,{b64}"}}
                )
        messages.append({"role": msg.role.value, "content": content})
    return {
        "model": request.model_name,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }


class HttpBackend:
    """Chat-completions client for any OpenAI-compatible serving endpoint."""

    def __init__(self, base_url: str, api_key: str, timeout_s: float = 120.0):
        if not base_url:
            raise AuthError(f"no API base configured (set {API_BASE_ENV})")
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self.timeout_s = timeout_s

    @classmethod
    def from_env(cls, environ=None) -> "HttpBackend":
        import os

        env = environ if environ is not None else os.environ
        key = env.get(API_KEY_ENV, "")
        base = env.get(API_BASE_ENV, "")
        if not key:
            raise AuthError(f"no API key configured (set {API_KEY_ENV})")
        return cls(base_url=base, api_key=key)

    def __repr__(self) -> str:  # never leak the credential
        return f"HttpBackend(base_url={self.base_url!r}, api_key=***)"

    def send(self, request: ProviderRequest) -> ProviderResponse:
        started = time.monotonic()
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                headers={"Authorization": f"Bearer {self._api_key}"},
                json=_to_wire(request),
                timeout=self.timeout_s,
            )
        except requests.exceptions.Timeout:
            raise ProviderTimeout(f"request timed out after {self.timeout_s}s") from None
        except requests.exceptions.ConnectionError as exc:
            raise ServerError(f"connection failed: {exc}") from None

        if resp.status_code in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {resp.status_code})")
        if resp.status_code == 429:
            raise RateLimitedError("rate limited (HTTP 429)")
        if resp.status_code >= 500:
            raise ServerError(f"server error (HTTP {resp.status_code})")
        if resp.status_code != 200:
            raise MalformedResponse(f"unexpected HTTP {resp.status_code}")

        latency_ms = int((time.monotonic() - started) * 1000)
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"cannot extract completion text: {exc}") from None
        if not isinstance(text, str):
            raise MalformedResponse(f"completion text is {type(text).__name__}, not str")
        return ProviderResponse(
            text=text,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
            latency_ms=latency_ms,
        )


# ---------------------------------------------------------------------------
# Scripted mock backend
# ---------------------------------------------------------------------------


@dataclass
class ScriptEntry:
    """One (matcher, canned reply) pair.

    `contains` substrings must all appear in the request's text content.
    `times` bounds how often the entry fires (None = unlimited); `error`
    raises the named provider error instead of replying.
    """

    contains: tuple[str, ...] = ()
    reply: str | None = None
    error: str | None = None
    times: int | None = None
    used: int = 0

    def matches(self, text: str) -> bool:
        if self.times is not None and self.used >= self.times:
            return False
        return all(c in text for c in self.contains)


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load a mock script: JSON list of {match: {contains}, reply | error, times?}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("mock script must be a JSON list")
    entries = []
    for i, item in enumerate(raw):
        match = item.get("match", {})
        contains = match.get("contains", "")
        if isinstance(contains, str):
            contains = (contains,) if contains else ()
        else:
            contains = tuple(contains)
        if "reply" not in item and "error" not in item:
            raise ValueError(f"script entry {i} needs a 'reply' or an 'error'")
        error = item.get("error")
        if error is not None and error not in _ERROR_BY_NAME:
            raise ValueError(f"script entry {i}: unknown error {error!r}")
        entries.append(ScriptEntry(contains=contains, reply=item.get("reply"), error=error, times=item.get("times")))
    return entries


class MockBackend:
    """Deterministic scripted backend; matching is serialized under a lock.

    Accepts either pre-built script entries or a `responder` callable
    (request -> reply text, or raise a ProviderError) for tests that need to
    inspect image parts programmatically.
    """

    def __init__(
        self,
        entries: Sequence[ScriptEntry] = (),
        responder: Callable[[ProviderRequest], str] | None = None,
    ):
        self.entries = list(entries)
        self.responder = responder
        self.call_count = 0
        self.requests_seen: list[ProviderRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script_file(cls, path: str | Path) -> "MockBackend":
        return cls(entries=load_script(path))

    def send(self, request: ProviderRequest) -> ProviderResponse:
        with self._lock:
            self.call_count += 1
            self.requests_seen.append(request)
            if self.responder is not None:
                reply = self.responder(request)
                return self._respond(request, reply)
            text = request.text_content()
            for entry in self.entries:
                if entry.matches(text):
                    entry.used += 1
                    if entry.error is not None:
                        raise _ERROR_BY_NAME[entry.error](f"scripted {entry.error}")
                    return self._respond(request, entry.reply or "")
            raise UnmatchedRequest(f"no script entry matches request: {text[:200]!r}")

    @staticmethod
    def _respond(request: ProviderRequest, reply: str) -> ProviderResponse:
        prompt_tokens = len(request.text_content().split()) + 16 * len(request.image_parts())
        return ProviderResponse(
            text=reply,
            usage=Usage(prompt_tokens=prompt_tokens, completion_tokens=len(reply.split())),
            latency_ms=0,
        )


# ---------------------------------------------------------------------------
# Client: retries, rate limiting, score parsing
# ---------------------------------------------------------------------------

_SCORE_LINE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[:=]\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*$")


def parse_scores(text: str, schema: Sequence[str]) -> dict[str, float]:
    """Parse `factor: value` lines for every schema factor, clamped to [0, 1]."""
    found: dict[str, float] = {}
    for line in text.splitlines():
        m = _SCORE_LINE_RE.match(line)
        if m:
            found[m.group(1).lower()] = float(m.group(2))
    out: dict[str, float] = {}
    for factor in schema:
        if factor.lower() not in found:
            raise MissingFactor(factor)
        out[factor] = min(1.0, max(0.0, found[factor.lower()]))
    return out


class ProviderClient:
    """Completion client with retry/backoff and an optional shared rate limiter."""

    def __init__(
        self,
        backend,
        retry: RetryPolicy | None = None,
        rate_limiter: TokenBucket | None = None,
        sleep=time.sleep,
    ):
        self.backend = backend
        self.retry = retry or RetryPolicy()
        self.rate_limiter = rate_limiter
        self._sleep = sleep

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        last_error: ProviderError | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if attempt > 1:
                self._sleep(self.retry.backoff_ms_before(attempt) / 1000.0)
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                return self.backend.send(request)
            except AuthError:
                raise
            except ProviderError as exc:
                last_error = exc
                kind = exc.failure_kind
                if kind is None or kind not in self.retry.retry_on:
                    raise
                logger.warning("provider attempt %d/%d failed (%s), retrying", attempt, self.retry.max_attempts, kind.value)
        assert last_error is not None
        raise last_error

    def complete_scored(self, request: ProviderRequest, score_schema: Sequence[str]) -> dict[str, float]:
        """Elicit one `factor: value` line per schema factor; values clamped to [0, 1]."""
        response = self.complete(request)
        return parse_scores(response.text, score_schema)
