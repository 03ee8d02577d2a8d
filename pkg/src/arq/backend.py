"""Chat-completion backends: a shared retry/concurrency core, an HTTP client
speaking the OpenAI-compatible wire shape, and a deterministic mock.

All request/response types are frozen; backend handles are shareable across
threads. Retry policy: 429, 5xx, and transport timeouts are transient and
retried with exponential backoff; 401/403 raise AuthError immediately; other
4xx raise BackendUnavailable without retry.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import httpx

ROLES = ("system", "user", "assistant")
REASONING_EFFORTS = ("low", "medium", "high", "none")


class BackendError(Exception):
    """Base class for completion failures."""


class AuthError(BackendError):
    """Credentials rejected (HTTP 401/403). Never retried."""


class BackendUnavailable(BackendError):
    """Retries exhausted, or a non-retryable client error."""


class MalformedResponse(BackendError):
    """Response body does not match the wire contract."""


class TransientError(BackendError):
    """Retryable fault: HTTP 429, 5xx, or a transport timeout."""

    def __init__(self, message: str, status: int | None = None) -> None:
        super().__init__(message)
        self.status = status


class UnmatchedPrompt(BackendError):
    """Mock schedule exhausted or no matcher applies and no default exists."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 8192
    reasoning_effort: str = "high"
    seed_index: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.reasoning_effort not in REASONING_EFFORTS:
            raise ValueError(f"reasoning_effort must be one of {REASONING_EFFORTS}")
        if self.seed_index < 0:
            raise ValueError("seed_index must be non-negative")

    def with_seed(self, seed_index: int) -> SamplingParams:
        return replace(self, seed_index=seed_index)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    params: SamplingParams = SamplingParams()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.model:
            raise ValueError("model must be non-empty")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[-1].role != "user":
            raise ValueError("last message role must be user")

    @property
    def user_prompt(self) -> str:
        return self.messages[-1].content


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    backend_id: str
    thinking: str | None = None
    usage: Usage = Usage()


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    base_url: str = ""
    api_key_env: str = ""
    max_concurrency: int = 4
    max_retries: int = 3
    retry_base_delay: float = 0.5
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if not self.backend_id:
            raise ValueError("backend_id must be non-empty")
        if self.max_concurrency <= 0:
            raise ValueError("max_concurrency must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.retry_base_delay < 0:
            raise ValueError("retry_base_delay must be non-negative")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class RoleSpec:
    """Binding of a pipeline role (generator, solver, ...) to a backend."""

    backend: str
    model: str
    params: SamplingParams = SamplingParams()
    non_reasoning: bool = False

    def __post_init__(self) -> None:
        if not self.backend or not self.model:
            raise ValueError("backend and model must be non-empty")
        if (self.params.reasoning_effort == "none") != self.non_reasoning:
            raise ValueError(
                "reasoning_effort must be 'none' exactly when the model is non-reasoning"
            )


def request_record(backend_id: str, req: ChatRequest) -> dict:
    """Canonical dict form of a request, the identity used for cache keys."""
    return {
        "backend_id": backend_id,
        "model": req.model,
        "messages": [{"role": m.role, "content": m.content} for m in req.messages],
        "temperature": req.params.temperature,
        "top_p": req.params.top_p,
        "max_tokens": req.params.max_tokens,
        "reasoning_effort": req.params.reasoning_effort,
        "seed_index": req.params.seed_index,
    }


def response_record(resp: ChatResponse) -> dict:
    return {
        "content": resp.content,
        "thinking": resp.thinking,
        "usage": {
            "prompt_tokens": resp.usage.prompt_tokens,
            "completion_tokens": resp.usage.completion_tokens,
        },
        "backend_id": resp.backend_id,
    }


def response_from_record(record: Mapping) -> ChatResponse:
    usage = record.get("usage") or {}
    return ChatResponse(
        content=record["content"],
        thinking=record.get("thinking"),
        usage=Usage(
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        ),
        backend_id=record["backend_id"],
    )


class Backend:
    """Shared completion core: bounded concurrency plus retry with backoff.

    Subclasses implement _invoke (one attempt). The semaphore wraps only the
    in-flight attempt, never the backoff sleep, so waiting retries do not
    hold a concurrency slot.
    """

    def __init__(self, config: BackendConfig, sleep: Callable[[float], None] | None = None) -> None:
        self.config = config
        self._semaphore = threading.Semaphore(config.max_concurrency)
        self._sleep = sleep if sleep is not None else time.sleep

    @property
    def backend_id(self) -> str:
        return self.config.backend_id

    def complete(self, req: ChatRequest) -> ChatResponse:
        attempts = self.config.max_retries + 1
        last: TransientError | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.config.retry_base_delay * 2 ** (attempt - 1))
            with self._semaphore:
                try:
                    return self._invoke(req)
                except TransientError as exc:
                    last = exc
        raise BackendUnavailable(
            f"{self.backend_id}: gave up after {attempts} attempts: {last}"
        ) from last

    def _invoke(self, req: ChatRequest) -> ChatResponse:
        raise NotImplementedError


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client.

    POSTs {base_url}/chat/completions with exactly the documented body
    fields; reads choices[0].message.content and, when present,
    choices[0].message.reasoning. The bearer token is read from the
    environment at request time so credential rotation needs no restart.
    """

    def __init__(
        self,
        config: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] | None = None,
    ) -> None:
        super().__init__(config, sleep=sleep)
        if not config.base_url:
            raise ValueError("HttpBackend requires base_url")
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "") if self.config.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, req: ChatRequest) -> dict:
        body: dict = {
            "model": req.model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_tokens,
        }
        if req.params.reasoning_effort != "none":
            body["reasoning_effort"] = req.params.reasoning_effort
        return body

    def _invoke(self, req: ChatRequest) -> ChatResponse:
        try:
            response = self._client.post(
                "/chat/completions", json=self._body(req), headers=self._headers()
            )
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        status = response.status_code
        if status == 429 or status >= 500:
            raise TransientError(f"HTTP {status}", status=status)
        if status in (401, 403):
            raise AuthError(f"HTTP {status}: credentials rejected")
        if status >= 400:
            raise BackendUnavailable(f"HTTP {status}: {response.text[:200]}")
        try:
            body = response.json()
            message = body["choices"][0]["message"]
            content = message["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("choices[0].message.content is not text")
        thinking = message.get("reasoning")
        if thinking is not None and not isinstance(thinking, str):
            raise MalformedResponse("choices[0].message.reasoning is not text")
        usage = body.get("usage") or {}
        return ChatResponse(
            content=content,
            thinking=thinking,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
                completion_tokens=int(usage.get("completion_tokens", 0) or 0),
            ),
            backend_id=self.backend_id,
        )


Matcher = Callable[[ChatRequest], bool] | str | None
MockResponse = "ChatResponse | str | Exception | Callable[[ChatRequest], ChatResponse | str]"


def _matches(matcher: Matcher, req: ChatRequest) -> bool:
    if matcher is None:
        return True
    if isinstance(matcher, str):
        return matcher in req.user_prompt
    return bool(matcher(req))


@dataclass
class MockStats:
    invocations: int = 0
    in_flight: int = 0
    max_in_flight: int = 0


class MockBackend(Backend):
    """Deterministic backend driven by an ordered (matcher, response) schedule.

    Each schedule entry is consumed at most once, in order; the first
    unconsumed entry whose matcher accepts the request wins. Matchers are
    substrings of the last user message, predicates over the request, or
    None for match-any. Responses may be text, a full ChatResponse, an
    exception instance (raised on consumption, e.g. TransientError for
    fault injection), or a callable of the request. When no entry matches,
    the default is used; with no default the call fails with
    UnmatchedPrompt. Use `respond` for an unconsumed always-on rule.
    """

    def __init__(
        self,
        schedule: Sequence[tuple[Matcher, object]] = (),
        default: object | None = None,
        config: BackendConfig | None = None,
        latency: float = 0.0,
        sleep: Callable[[float], None] | None = None,
    ) -> None:
        super().__init__(
            config or BackendConfig(backend_id="mock", max_retries=0),
            sleep=sleep if sleep is not None else (lambda _s: None),
        )
        self._schedule: list[tuple[Matcher, object]] = list(schedule)
        self._consumed: list[bool] = [False] * len(self._schedule)
        self._rules: list[tuple[Matcher, object]] = []
        self._default = default
        self._latency = latency
        self._lock = threading.Lock()
        self.transcript: list[tuple[ChatRequest, ChatResponse]] = []
        self.stats = MockStats()

    def respond(self, matcher: Matcher, response: object) -> None:
        """Register a reusable rule consulted after the one-shot schedule."""
        with self._lock:
            self._rules.append((matcher, response))

    def _pick(self, req: ChatRequest) -> object:
        for i, (matcher, response) in enumerate(self._schedule):
            if not self._consumed[i] and _matches(matcher, req):
                self._consumed[i] = True
                return response
        for matcher, response in self._rules:
            if _matches(matcher, req):
                return response
        if self._default is not None:
            return self._default
        raise UnmatchedPrompt(
            f"no schedule entry, rule, or default for prompt: {req.user_prompt[:120]!r}"
        )

    def _invoke(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.stats.invocations += 1
            self.stats.in_flight += 1
            self.stats.max_in_flight = max(self.stats.max_in_flight, self.stats.in_flight)
            try:
                picked = self._pick(req)
            except UnmatchedPrompt:
                self.stats.in_flight -= 1
                raise
        try:
            if self._latency:
                time.sleep(self._latency)
            if isinstance(picked, Exception):
                raise picked
            if callable(picked):
                picked = picked(req)
            if isinstance(picked, str):
                resp = ChatResponse(content=picked, backend_id=self.backend_id)
            elif isinstance(picked, ChatResponse):
                resp = picked
            else:
                raise TypeError(f"unsupported mock response type: {type(picked).__name__}")
        finally:
            with self._lock:
                self.stats.in_flight -= 1
        with self._lock:
            self.transcript.append((req, resp))
        return resp

    def unconsumed(self) -> int:
        with self._lock:
            return self._consumed.count(False)


def mock_program(
    schedule: Sequence[tuple[Matcher, object]],
    default: object | None = None,
    **kwargs,
) -> MockBackend:
    """Build a deterministic mock backend from an ordered schedule."""
    return MockBackend(schedule=schedule, default=default, **kwargs)


__all__ = [
    "ROLES",
    "REASONING_EFFORTS",
    "BackendError",
    "AuthError",
    "BackendUnavailable",
    "MalformedResponse",
    "TransientError",
    "UnmatchedPrompt",
    "SamplingParams",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "Usage",
    "BackendConfig",
    "RoleSpec",
    "request_record",
    "response_record",
    "response_from_record",
    "Backend",
    "HttpBackend",
    "MockBackend",
    "MockStats",
    "mock_program",
]
