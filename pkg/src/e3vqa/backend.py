"""Cache-aware, retrying gateway over chat providers, plus a scripted test backend."""
from __future__ import annotations

import base64
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import httpx

from .chat import (
    ChatRequest,
    ChatResponse,
    FinishReason,
    Role,
    Usage,
    fingerprint,
    validate_request,
)

try:
    import tomllib  # type: ignore[import-not-found]
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]


class BackendError(Exception):
    pass


class AuthError(BackendError):
    pass


class BudgetExceeded(BackendError):
    pass


class TransientFailure(BackendError):
    """Retryable provider failure: timeout or HTTP 408/429/5xx."""


class TransientExhausted(BackendError):
    pass


class MalformedProviderReply(BackendError):
    pass


class NoScriptMatch(BackendError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: int = 200
    max_backoff_ms: int = 5000

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.max_backoff_ms < self.base_backoff_ms:
            raise ValueError("max_backoff_ms must be >= base_backoff_ms")

    def delay_ms(self, attempt: int) -> int:
        """Backoff before retrying after the given 1-based failed attempt."""
        return min(self.base_backoff_ms * (2 ** (attempt - 1)), self.max_backoff_ms)


@dataclass(frozen=True)
class RateLimit:
    max_in_flight: int = 4
    min_interval_ms: int = 0

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.min_interval_ms < 0:
            raise ValueError("min_interval_ms must be >= 0")


@dataclass(frozen=True)
class BackendConfig:
    provider: str = "ScriptedMock"  # "HostedHttp" | "ScriptedMock"
    endpoint: str = ""
    api_key_env: str = ""
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    rate_limit: RateLimit = field(default_factory=RateLimit)
    cache_dir: Optional[Path] = None
    model_id: str = "mock-model"
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: Optional[int] = 0

    def __post_init__(self) -> None:
        if self.provider not in ("HostedHttp", "ScriptedMock"):
            raise ValueError(f"unknown provider: {self.provider}")
        if self.provider == "HostedHttp" and (not self.endpoint or not self.api_key_env):
            raise ValueError("HostedHttp requires endpoint and api_key_env")

    def with_cache_dir(self, cache_dir: Optional[Path]) -> "BackendConfig":
        return replace(self, cache_dir=cache_dir)

    def summary(self) -> dict:
        """Config echo for --dry-run and traces. Never contains key material."""
        return {
            "provider": self.provider,
            "endpoint": self.endpoint,
            "api_key_env": self.api_key_env,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "base_backoff_ms": self.retry.base_backoff_ms,
                "max_backoff_ms": self.retry.max_backoff_ms,
            },
            "rate_limit": {
                "max_in_flight": self.rate_limit.max_in_flight,
                "min_interval_ms": self.rate_limit.min_interval_ms,
            },
            "cache_dir": str(self.cache_dir) if self.cache_dir else None,
        }


class Provider(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


class ResponseCache:
    """One JSON file per request fingerprint. Writes are atomic (tmp + rename)."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, fp: str) -> Path:
        return self.root / f"{fp}.json"

    def get(self, fp: str) -> Optional[dict]:
        path = self._path(fp)
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError:
            return None
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return None  # torn or corrupt entry: treat as a miss

    def put(self, fp: str, text: str, usage: Usage) -> None:
        entry = {
            "request_digest": fp,
            "text": text,
            "usage": {
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
            },
            "created_at": time.time(),
        }
        path = self._path(fp)
        tmp = path.with_suffix(".json.tmp")
        with self._lock:
            tmp.write_text(json.dumps(entry, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, path)

    def stats(self) -> dict:
        files = list(self.root.glob("*.json"))
        return {"entries": len(files), "bytes": sum(f.stat().st_size for f in files)}

    def gc(self, older_than_s: float) -> int:
        """Delete entries older than the given age in seconds; returns count removed."""
        cutoff = time.time() - older_than_s
        removed = 0
        for path in self.root.glob("*.json"):
            try:
                if path.stat().st_mtime < cutoff:
                    path.unlink()
                    removed += 1
            except OSError:
                continue
        return removed


class _Pacer:
    """Enforces max_in_flight and a minimum interval between provider sends."""

    def __init__(self, limit: RateLimit, sleeper: Callable[[float], None]) -> None:
        self._sem = threading.Semaphore(limit.max_in_flight)
        self._interval_s = limit.min_interval_ms / 1000.0
        self._sleep = sleeper
        self._lock = threading.Lock()
        self._last_send = 0.0

    def __enter__(self) -> "_Pacer":
        self._sem.acquire()
        if self._interval_s > 0:
            with self._lock:
                wait = self._last_send + self._interval_s - time.monotonic()
                self._last_send = max(time.monotonic(), self._last_send + self._interval_s)
            if wait > 0:
                self._sleep(wait)
        return self

    def __exit__(self, *exc_info: object) -> None:
        self._sem.release()


class ChatGateway:
    """complete() front door: validation, cache, budget, pacing, retry."""

    def __init__(
        self,
        provider: Provider,
        config: BackendConfig,
        *,
        max_calls: Optional[int] = None,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.provider = provider
        self.config = config
        self.max_calls = max_calls
        self._sleep = sleeper
        self._pacer = _Pacer(config.rate_limit, sleeper)
        self.cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        self._lock = threading.Lock()
        self.calls_made = 0  # provider sends that missed cache (attempt retries excluded)

    def complete(self, request: ChatRequest) -> ChatResponse:
        validate_request(request)
        fp = fingerprint(request)
        if self.cache is not None:
            hit = self.cache.get(fp)
            if hit is not None:
                usage = Usage(**hit.get("usage", {}))
                return ChatResponse(
                    text=hit["text"],
                    finish_reason=FinishReason.STOP,
                    usage=usage,
                    latency_ms=0,
                    from_cache=True,
                )
        with self._lock:
            if self.max_calls is not None and self.calls_made >= self.max_calls:
                raise BudgetExceeded(f"call budget of {self.max_calls} exhausted")
            self.calls_made += 1
        response = self._send_with_retry(request)
        if self.cache is not None and response.finish_reason is FinishReason.STOP:
            self.cache.put(fp, response.text, response.usage)
        return response

    def _send_with_retry(self, request: ChatRequest) -> ChatResponse:
        policy = self.config.retry
        last: Optional[TransientFailure] = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._pacer:
                    return self.provider.send(request)
            except TransientFailure as exc:
                last = exc
                if attempt < policy.max_attempts:
                    self._sleep(policy.delay_ms(attempt) / 1000.0)
        raise TransientExhausted(
            f"gave up after {policy.max_attempts} attempts: {last}"
        ) from last


def complete(request: ChatRequest, config: BackendConfig, provider: Optional[Provider] = None) -> ChatResponse:
    """One-shot convenience wrapper; persistent callers should hold a ChatGateway."""
    if provider is None:
        provider = build_provider(config)
    return ChatGateway(provider, config).complete(request)


# --- scripted mock -----------------------------------------------------------

ANY = "Any"


@dataclass(frozen=True)
class ContainsText:
    needle: str


@dataclass(frozen=True)
class ScriptedFailure:
    kind: str = "transient"  # "transient" | "auth"


Matcher = Union[str, ContainsText]
ReplyStep = Union[str, ScriptedFailure]
Reply = Union[str, ScriptedFailure, Sequence[ReplyStep], Callable[[ChatRequest], str]]


@dataclass
class _Rule:
    matcher: Matcher
    reply: Reply
    hits: int = 0

    def matches(self, request: ChatRequest) -> bool:
        if self.matcher == ANY:
            return True
        if isinstance(self.matcher, ContainsText):
            return self.matcher.needle in _last_user_text(request)
        raise ValueError(f"unknown matcher: {self.matcher!r}")

    def next_reply(self, request: ChatRequest) -> ReplyStep:
        if callable(self.reply):
            step: ReplyStep = self.reply(request)
        elif isinstance(self.reply, (str, ScriptedFailure)):
            step = self.reply
        else:
            # Sequences are consumed one entry per matching call, sticking on the last.
            step = self.reply[min(self.hits, len(self.reply) - 1)]
        self.hits += 1
        return step


def _last_user_text(request: ChatRequest) -> str:
    for turn in reversed(request.turns):
        if turn.role is Role.USER:
            return "\n".join(p.text for p in turn.parts if p.kind == "Text" and p.text)
    return ""


class ScriptedBackend:
    """Deterministic canned-reply provider with a request log and call counter.

    The counter increments on every send attempt, including injected failures,
    so retry behaviour is observable from the outside.
    """

    def __init__(self, script: Sequence[tuple[Matcher, Reply]]) -> None:
        if not script:
            raise ValueError("script must not be empty")
        self._rules = [_Rule(matcher, reply) for matcher, reply in script]
        self._lock = threading.Lock()
        self.call_count = 0
        self.request_log: list[ChatRequest] = []

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.call_count += 1
            self.request_log.append(request)
            for rule in self._rules:
                if rule.matches(request):
                    step = rule.next_reply(request)
                    break
            else:
                raise NoScriptMatch("no script rule matched the request")
        if isinstance(step, ScriptedFailure):
            if step.kind == "auth":
                raise AuthError("scripted auth failure")
            raise TransientFailure("scripted transient failure")
        return ChatResponse(
            text=step,
            finish_reason=FinishReason.STOP,
            usage=Usage(prompt_tokens=0, completion_tokens=0),
            latency_ms=0,
        )


def scripted_backend(script: Sequence[tuple[Matcher, Reply]]) -> ScriptedBackend:
    return ScriptedBackend(script)


# --- hosted HTTP adapter -----------------------------------------------------


class HostedHttpBackend:
    """Chat-completions-style HTTP adapter.

    Wire format: POST {endpoint} with a JSON body holding model, messages and
    sampling knobs. User image parts travel as base64 data URLs. The API key is
    read from the environment at send time and only ever placed in the
    Authorization header, so no serialized artifact can contain it.
    """

    def __init__(self, config: BackendConfig, transport: Optional[httpx.BaseTransport] = None) -> None:
        self.config = config
        self._client = httpx.Client(transport=transport, timeout=60.0)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env, "")
        if not key:
            raise AuthError(f"environment variable {self.config.api_key_env} is not set")
        return key

    def _payload(self, request: ChatRequest) -> dict:
        messages: list[dict] = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        for turn in request.turns:
            if turn.role is Role.ASSISTANT:
                messages.append(
                    {"role": "assistant", "content": "".join(p.text or "" for p in turn.parts)}
                )
                continue
            content: list[dict] = []
            for part in turn.parts:
                if part.kind == "Text":
                    content.append({"type": "text", "text": part.text})
                else:
                    assert part.image is not None
                    data = base64.b64encode(part.image.load_bytes()).decode("ascii")
                    url = f"data:{part.image.media_type};base64,{data}"
                    content.append({"type": "image_url", "image_url": {"url": url}})
            messages.append({"role": "user", "content": content})
        payload = {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def send(self, request: ChatRequest) -> ChatResponse:
        started = time.monotonic()
        try:
            http_response = self._client.post(
                self.config.endpoint,
                json=self._payload(request),
                headers={"Authorization": f"Bearer {self._api_key()}"},
            )
        except httpx.TimeoutException as exc:
            raise TransientFailure(f"timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransientFailure(f"transport error: {exc}") from exc
        status = http_response.status_code
        if status in (401, 403):
            raise AuthError(f"provider rejected credentials (HTTP {status})")
        if status == 408 or status == 429 or status >= 500:
            raise TransientFailure(f"HTTP {status}")
        if status >= 400:
            raise BackendError(f"HTTP {status}: {http_response.text[:500]}")
        try:
            body = http_response.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("content is not a string")
        except Exception as exc:
            raise MalformedProviderReply(f"cannot parse provider payload: {exc}") from exc
        usage = body.get("usage", {})
        finish = {
            "stop": FinishReason.STOP,
            "length": FinishReason.LENGTH,
            "content_filter": FinishReason.FILTERED,
        }.get(choice.get("finish_reason", "stop"), FinishReason.ERROR)
        return ChatResponse(
            text=text,
            finish_reason=finish,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
            latency_ms=int((time.monotonic() - started) * 1000),
        )


def build_provider(config: BackendConfig, script: Optional[Sequence[tuple[Matcher, Reply]]] = None) -> Provider:
    if config.provider == "ScriptedMock":
        return ScriptedBackend(script or [(ANY, "A)")])
    return HostedHttpBackend(config)


# --- config loading ----------------------------------------------------------


def _parse_matcher(raw: str) -> Matcher:
    if raw.lower() == "any":
        return ANY
    if raw.startswith("contains:"):
        return ContainsText(raw[len("contains:"):])
    raise ValueError(f"unknown script matcher: {raw!r} (use 'any' or 'contains:<text>')")


def load_backend_config(path: Path) -> tuple[BackendConfig, list[tuple[Matcher, Reply]]]:
    """Read a TOML backend config; returns the config plus any scripted-mock rules."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    retry = RetryPolicy(**doc.get("retry", {}))
    rate = RateLimit(**doc.get("rate_limit", {}))
    cache_dir = doc.get("cache_dir")
    config = BackendConfig(
        provider=doc.get("provider", "ScriptedMock"),
        endpoint=doc.get("endpoint", ""),
        api_key_env=doc.get("api_key_env", ""),
        retry=retry,
        rate_limit=rate,
        cache_dir=Path(cache_dir) if cache_dir else None,
        model_id=doc.get("model_id", "mock-model"),
        temperature=doc.get("temperature", 0.0),
        max_tokens=doc.get("max_tokens", 1024),
        seed=doc.get("seed", 0),
    )
    script: list[tuple[Matcher, Reply]] = []
    for rule in doc.get("script", []):
        reply: Reply
        if "replies" in rule:
            reply = [str(step) for step in rule["replies"]]
        else:
            reply = str(rule.get("reply", ""))
        script.append((_parse_matcher(str(rule.get("match", "any"))), reply))
    return config, script


def request_for(config: BackendConfig, system: str, turns: tuple, **overrides: object) -> ChatRequest:
    """Build a ChatRequest carrying the config's generation defaults."""
    kwargs: dict = {
        "model_id": config.model_id,
        "system": system,
        "turns": turns,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
        "seed": config.seed,
    }
    kwargs.update(overrides)
    return ChatRequest(**kwargs)
