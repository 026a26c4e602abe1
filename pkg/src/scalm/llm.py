"""Chat-completion backends: remote HTTP, fixture replay and fixture recording.

Fixture files are JSON Lines of ``{"digest", "content"}`` where ``digest`` is
the SHA-256 of the canonical request encoding.  A request with no recorded
digest raises :class:`FixtureMiss`; replay never falls back to the network.
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import httpx

from . import _http
from ._util import write_atomic
from .errors import DigestConflict, FixtureMiss, RemoteError

log = logging.getLogger(__name__)

ROLES = ("user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    system: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    model_name: str = "default"

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "messages", tuple(self.messages))

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": float(self.temperature),
            "max_tokens": int(self.max_tokens),
            "model_name": self.model_name,
        }

    def canonical(self) -> bytes:
        return json.dumps(
            self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False
        ).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()

    def summary(self) -> str:
        last = self.messages[-1].content.strip().splitlines()
        head = last[0][:60] if last else ""
        return f"model={self.model_name} messages={len(self.messages)} first_line={head!r}"


@dataclass(frozen=True)
class ChatResponse:
    content: str
    provider_id: str
    latency_ms: int = 0
    token_counts: dict | None = None


class ChatProvider(Protocol):
    provider_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def complete(request: ChatRequest, provider: ChatProvider) -> ChatResponse:
    return provider.complete(request)


def load_fixtures(path: str | Path) -> dict[str, str]:
    fixtures: dict[str, str] = {}
    path = Path(path)
    if not path.exists():
        return fixtures
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            digest, content = row["digest"], row["content"]
            if digest in fixtures and fixtures[digest] != content:
                raise DigestConflict(digest)
            fixtures[digest] = content
    return fixtures


def dump_fixtures(fixtures: Mapping[str, str]) -> str:
    return "".join(
        json.dumps({"digest": d, "content": c}, ensure_ascii=False) + "\n" for d, c in fixtures.items()
    )


class FixtureProvider:
    provider_id = "fixture"

    def __init__(self, fixtures: str | Path | Mapping[str, str]):
        if isinstance(fixtures, (str, Path)):
            fixtures = load_fixtures(fixtures)
        self.fixtures = dict(fixtures)

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request.digest()
        try:
            return ChatResponse(self.fixtures[digest], self.provider_id)
        except KeyError:
            raise FixtureMiss(digest, request.summary()) from None


class RecordingProvider:
    """Wraps a provider and appends every successful reply to a fixture file."""

    def __init__(self, inner: ChatProvider, fixture_path: str | Path):
        self.inner = inner
        self.path = Path(fixture_path)
        self.fixtures = load_fixtures(self.path)
        self.provider_id = getattr(inner, "provider_id", "unknown")
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        digest = request.digest()
        with self._lock:
            known = self.fixtures.get(digest)
            if known is not None and known != response.content:
                raise DigestConflict(digest)
            if known is None:
                self.fixtures[digest] = response.content
                write_atomic(self.path, dump_fixtures(self.fixtures))
        return response


def record_mode(provider: ChatProvider, fixture_path: str | Path) -> RecordingProvider:
    return RecordingProvider(provider, fixture_path)


@dataclass(frozen=True)
class RemoteChatConfig:
    endpoint_url: str
    api_key_env: str | None = None
    timeout_ms: int = 120_000
    max_attempts: int = 5
    max_in_flight: int = 2
    requests_per_minute: int | None = None
    extra_headers: tuple[tuple[str, str], ...] = field(default_factory=tuple)


class _MinuteBudget:
    def __init__(self, per_minute: int | None, clock=time.monotonic, sleep=time.sleep):
        self.per_minute = per_minute
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def acquire(self) -> None:
        if not self.per_minute:
            return
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(wait)


class RemoteChatProvider:
    provider_id = "remote"

    def __init__(self, config: RemoteChatConfig, client: httpx.Client | None = None, sleep=time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_ms / 1000)
        self._gate = threading.BoundedSemaphore(max(1, config.max_in_flight))
        self._budget = _MinuteBudget(config.requests_per_minute, sleep=sleep)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = dict(self.config.extra_headers)
        env = self.config.api_key_env
        if env and os.environ.get(env):
            headers["Authorization"] = f"Bearer {os.environ[env]}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        messages = [{"role": "system", "content": request.system}] if request.system else []
        messages += [{"role": m.role, "content": m.content} for m in request.messages]
        payload = {
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        self._budget.acquire()
        started = time.monotonic()
        with self._gate:
            resp = _http.post_json(
                self._client,
                self.config.endpoint_url,
                payload,
                headers=self._headers(),
                max_attempts=self.config.max_attempts,
                sleep=self._sleep,
            )
        latency = int((time.monotonic() - started) * 1000)
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise RemoteError(resp.status_code, f"malformed chat reply: {resp.text}") from exc
        if not isinstance(content, str) or not content:
            raise RemoteError(resp.status_code, "empty completion")
        usage = body.get("usage") or None
        counts = None
        if isinstance(usage, dict):
            counts = {"prompt": usage.get("prompt_tokens"), "completion": usage.get("completion_tokens")}
        return ChatResponse(content, self.provider_id, latency, counts)
