"""Chat-completion transport: HTTP client with retry and rate limiting, an on-disk
response cache, and deterministic mock backends for offline runs."""

from __future__ import annotations

import json
import hashlib
import logging
import os
import random
import re
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import requests

logger = logging.getLogger(__name__)

_ROLES = ("system", "user", "assistant")


class BackendError(Exception):
    pass


class BackendExhausted(BackendError):
    """Transient failures persisted through every retry, or a scripted mock ran dry."""


class PermanentRequestError(BackendError):
    """A 4xx other than 429; retrying would not help."""


class ProtocolError(BackendError):
    """The remote answered, but not in the chat-completions shape."""


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]  # (role, content) pairs
    temperature: float = 0.0
    seed: int | None = None
    max_output_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for role, content in self.messages:
            if role not in _ROLES:
                raise ValueError(f"unknown role {role!r}")
            if not isinstance(content, str):
                raise ValueError("message content must be a string")
        if self.messages[0][0] == "assistant":
            raise ValueError("first message must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def make_request(
    model: str,
    messages: Sequence[tuple[str, str]] | Sequence[dict[str, str]],
    temperature: float = 0.0,
    seed: int | None = None,
    max_output_tokens: int | None = None,
) -> ChatRequest:
    pairs = []
    for m in messages:
        if isinstance(m, dict):
            pairs.append((m["role"], m["content"]))
        else:
            pairs.append((m[0], m[1]))
    return ChatRequest(
        model=model,
        messages=tuple(pairs),
        temperature=temperature,
        seed=seed,
        max_output_tokens=max_output_tokens,
    )


@dataclass
class ChatResponse:
    content: str
    finish_reason: str  # stop | length | error
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    from_cache: bool = False

    def __post_init__(self) -> None:
        if self.finish_reason == "stop" and not self.content:
            raise ValueError("content must be non-empty when finish_reason is stop")


def cache_key(request: ChatRequest) -> str:
    """Hex digest of the canonical request serialization."""
    payload = {
        "model": request.model,
        "messages": [{"role": r, "content": c} for r, c in request.messages],
        "temperature": request.temperature,
        "seed": request.seed,
        "max_output_tokens": request.max_output_tokens,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class _Stats:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.counts: dict[str, int] = {}

    def bump(self, key: str, by: int = 1) -> None:
        with self._lock:
            self.counts[key] = self.counts.get(key, 0) + by

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self.counts)


class RateLimiter:
    """Token bucket; capacity and refill both expressed as requests per minute."""

    def __init__(self, requests_per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.rate = requests_per_minute / 60.0
        self.capacity = float(requests_per_minute)
        self._tokens = float(requests_per_minute)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class RetryPolicy:
    base_delay: float = 1.0
    factor: float = 2.0
    max_attempts: int = 6
    jitter: float = 0.25

    def delay(self, attempt: int, rng: random.Random) -> float:
        # attempt is 1-based; jitter spreads concurrent retries apart
        raw = self.base_delay * self.factor ** (attempt - 1)
        return raw * (1.0 + rng.uniform(-self.jitter, self.jitter))


class HttpBackend:
    """POSTs chat-completion bodies to a base URL with bearer-token auth."""

    def __init__(
        self,
        base_url: str,
        model: str | None = None,
        api_key_env: str = "MULTISFT_API_KEY",
        retry: RetryPolicy | None = None,
        rate_limiter: RateLimiter | None = None,
        timeout: float = 120.0,
        session: Any = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        key = os.getenv(api_key_env)
        if not key:
            raise ValueError(f"missing API credential: set ${api_key_env}")
        self._key = key
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.retry = retry or RetryPolicy()
        self.rate_limiter = rate_limiter
        self.timeout = timeout
        self._session = session or requests.Session()
        self._sleep = sleep
        self._rng = rng or random.Random()
        self.stats = _Stats()

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            self.stats.bump("remote_calls")
            try:
                resp = self._session.post(
                    url,
                    json=body,
                    headers={"Authorization": f"Bearer {self._key}"},
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport error (attempt %d/%d): %s", attempt, self.retry.max_attempts, exc)
                self._backoff(attempt)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = BackendError(f"HTTP {resp.status_code}")
                logger.warning("HTTP %d (attempt %d/%d)", resp.status_code, attempt, self.retry.max_attempts)
                self.stats.bump("retried_status")
                self._backoff(attempt)
                continue
            if resp.status_code >= 400:
                raise PermanentRequestError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            self.stats.bump("attempts_used", attempt)
            return self._parse(resp)
        raise BackendExhausted(f"gave up after {self.retry.max_attempts} attempts: {last_error}")

    def _backoff(self, attempt: int) -> None:
        if attempt < self.retry.max_attempts:
            self._sleep(self.retry.delay(attempt, self._rng))

    @staticmethod
    def _parse(resp: Any) -> ChatResponse:
        try:
            data = resp.json()
            choice = data["choices"][0]
            content = choice["message"]["content"]
            finish = choice.get("finish_reason", "stop")
            usage = data.get("usage", {})
            return ChatResponse(
                content=content,
                finish_reason=finish if finish in ("stop", "length") else "error",
                usage={
                    "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                    "completion_tokens": int(usage.get("completion_tokens", 0)),
                },
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat-completions response: {exc}") from exc


class CachingBackend:
    """Content-addressed response cache in front of any backend.

    Layout: <cache_dir>/<hh>/<digest>.json, written via temp file + atomic rename.
    """

    def __init__(self, inner: Any, cache_dir: str | Path) -> None:
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.stats = _Stats()

    def _path(self, digest: str) -> Path:
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = cache_key(request)
        path = self._path(digest)
        if path.exists():
            payload = json.loads(path.read_text(encoding="utf-8"))
            self.stats.bump("cache_hits")
            return ChatResponse(
                content=payload["content"],
                finish_reason=payload["finish_reason"],
                usage=payload.get("usage", {"prompt_tokens": 0, "completion_tokens": 0}),
                from_cache=True,
            )
        response = self.inner.complete(request)
        self.stats.bump("cache_misses")
        payload = {
            "digest": digest,
            "content": response.content,
            "finish_reason": response.finish_reason,
            "usage": response.usage,
            "timestamp": time.time(),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".{digest}.{uuid.uuid4().hex}.tmp"
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)
        return response


class ScriptedBackend:
    """Returns a fixed list of responses in order; errors when exhausted."""

    def __init__(self, replies: Sequence[str]) -> None:
        if not replies:
            raise ValueError("scripted backend needs a non-empty reply list")
        self._replies = list(replies)
        self._next = 0
        self._lock = threading.Lock()
        self.requests_seen: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests_seen.append(request)
            if self._next >= len(self._replies):
                raise BackendExhausted(f"script exhausted after {len(self._replies)} replies")
            reply = self._replies[self._next]
            self._next += 1
        return ChatResponse(content=reply, finish_reason="stop")


class EchoBackend:
    """Returns the final user message verbatim."""

    def __init__(self) -> None:
        self.requests_seen: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests_seen.append(request)
        for role, content in reversed(request.messages):
            if role == "user":
                return ChatResponse(content=content, finish_reason="stop")
        raise PermanentRequestError("echo backend needs at least one user message")


class TemplateBackend:
    """Returns the response of the first regex that matches the request text."""

    def __init__(self, rules: dict[str, str] | Sequence[tuple[str, str]]) -> None:
        items = rules.items() if isinstance(rules, dict) else rules
        self._rules = [(re.compile(pattern, re.DOTALL), reply) for pattern, reply in items]
        self.requests_seen: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests_seen.append(request)
        text = "\n".join(content for _, content in request.messages)
        for pattern, reply in self._rules:
            if pattern.search(text):
                return ChatResponse(content=reply, finish_reason="stop")
        raise PermanentRequestError("no template rule matched the request")


def make_mock(kind: str, payload: Any = None) -> Any:
    if kind == "scripted":
        return ScriptedBackend(payload)
    if kind == "echo":
        return EchoBackend()
    if kind == "template":
        return TemplateBackend(payload)
    raise ValueError(f"unknown mock kind {kind!r}")


def parallel_map(fn: Callable[[Any], Any], items: Iterable[Any], parallelism: int = 1) -> list[Any]:
    """Order-preserving map; item failures come back as the exception object."""
    items = list(items)
    if parallelism <= 1:
        results = []
        for item in items:
            try:
                results.append(fn(item))
            except Exception as exc:  # per-item failures are data, not aborts
                results.append(exc)
        return results
    out: list[Any] = [None] * len(items)

    def run(idx_item: tuple[int, Any]) -> None:
        idx, item = idx_item
        try:
            out[idx] = fn(item)
        except Exception as exc:
            out[idx] = exc

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        list(pool.map(run, enumerate(items)))
    return out
