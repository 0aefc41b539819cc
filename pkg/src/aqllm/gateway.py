"""Provider-agnostic chat completion with retries, usage capture and transcripts.

Two HTTP adapters share the chat-completions wire shape; ``ScriptedProvider``
replays canned replies so everything above this layer is testable offline.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .errors import ConfigurationError, ExhaustedError, PreconditionError, ProviderError, TransportError


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if not self.content:
            raise PreconditionError(f"empty {self.role.value} message")


def system(text: str) -> Message:
    return Message(Role.SYSTEM, text)


def user(text: str) -> Message:
    return Message(Role.USER, text)


def assistant(text: str) -> Message:
    return Message(Role.ASSISTANT, text)


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    tag: str | None = None  # label used to order transcripts; not sent to providers

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise PreconditionError("a chat request needs at least one message")
        if self.temperature < 0:
            raise PreconditionError(f"temperature must be >= 0, got {self.temperature}")

    def to_wire(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": m.role.value, "content": m.content} for m in self.messages],
        }

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_wire(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    cached_input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self):
        if min(self.input_tokens, self.cached_input_tokens, self.output_tokens) < 0:
            raise PreconditionError("token counts must be non-negative")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: TokenUsage
    attempts: int
    model: str = ""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    factor: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise PreconditionError("max_attempts must be >= 1")
        if self.base_delay < 0 or self.factor < 1:
            raise PreconditionError("need base_delay >= 0 and factor >= 1")

    def delay(self, retry: int) -> float:
        """Wait before retry number ``retry`` (1-based)."""
        return self.base_delay * self.factor ** (retry - 1)


def count_tokens(text: str) -> int:
    """Planning estimate: one token per four characters, rounded up.

    Live providers report exact usage, which replaces this estimate.
    """
    return math.ceil(len(text) / 4)


class Provider(Protocol):
    name: str

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]: ...


class ScriptMiss(ProviderError):
    retryable = False


class ScriptedProvider:
    """Replays replies from a script.

    Each entry is ``{"match": {"model"?, "contains"?}, "response" | "error",
    "usage"?, "times"?}``. The first entry whose ``model`` equals the request
    model and whose ``contains`` substring(s) all occur in the request text
    wins. ``times`` limits how often an entry can be used, which lets a
    script fail twice and then succeed. Matching depends only on request
    content, so concurrent callers see the same replies in any order.
    """

    name = "scripted"

    def __init__(self, entries: Sequence[Mapping[str, Any]], latency: Callable[[ChatRequest], float] | None = None):
        self.entries = [dict(e) for e in entries]
        self._uses = [0] * len(self.entries)
        self._lock = threading.Lock()
        self.latency = latency
        self.requests: list[ChatRequest] = []

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), **kwargs)

    @classmethod
    def from_transcripts(cls, records: Sequence[Mapping[str, Any]], **kwargs) -> "ScriptedProvider":
        """Replay a recorded run: each successful call becomes a fingerprint-matched entry."""
        entries = []
        for rec in records:
            if rec.get("response") is None:
                continue
            wire = rec["request"]
            req = ChatRequest(wire["model"], tuple(Message(Role(m["role"]), m["content"]) for m in wire["messages"]),
                              wire.get("temperature", 0.0))
            entries.append({"match": {"fingerprint": req.fingerprint()}, "response": rec["response"]["content"],
                            "usage": rec.get("usage")})
        return cls(entries, **kwargs)

    @staticmethod
    def _matches(entry: Mapping[str, Any], request: ChatRequest) -> bool:
        m = entry.get("match") or {}
        if "model" in m and m["model"] != request.model:
            return False
        if "fingerprint" in m and m["fingerprint"] != request.fingerprint():
            return False
        needles = m.get("contains", [])
        if isinstance(needles, str):
            needles = [needles]
        text = request.text
        return all(n in text for n in needles)

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        with self._lock:
            self.requests.append(request)
            for k, entry in enumerate(self.entries):
                limit = entry.get("times")
                if limit is not None and self._uses[k] >= limit:
                    continue
                if self._matches(entry, request):
                    self._uses[k] += 1
                    break
            else:
                raise ScriptMiss(f"no scripted reply matches request {request.fingerprint()} (model {request.model})")
        if self.latency is not None:
            time.sleep(self.latency(request))
        if "error" in entry:
            raise ProviderError(str(entry["error"]))
        content = str(entry["response"])
        u = entry.get("usage")
        if u is None:
            usage = TokenUsage(count_tokens(request.text), 0, count_tokens(content))
        else:
            usage = TokenUsage(u.get("input_tokens", 0), u.get("cached_input_tokens", 0), u.get("output_tokens", 0))
        return content, usage


class ChatCompletionsProvider:
    """HTTPS adapter for the common ``/chat/completions`` wire shape."""

    VENDORS = {
        "openai": ("OPENAI_API_KEY", "OPENAI_BASE_URL", "https://api.openai.com/v1", False),
        "deepseek": ("DEEPSEEK_API_KEY", "DEEPSEEK_BASE_URL", "https://api.deepseek.com", True),
    }

    def __init__(self, name: str, base_url: str, api_key: str, merge_system: bool = False,
                 timeout: float = 120.0, http: httpx.Client | None = None):
        self.name = name
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.merge_system = merge_system
        self._http = http or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, vendor: str, env: Mapping[str, str] | None = None, **kwargs) -> "ChatCompletionsProvider":
        env = os.environ if env is None else env
        try:
            key_var, url_var, default_url, merge = cls.VENDORS[vendor]
        except KeyError:
            raise ConfigurationError(f"unknown LLM vendor {vendor!r}") from None
        key = env.get(key_var)
        if not key:
            raise ConfigurationError(f"{key_var} is not set")
        return cls(vendor, env.get(url_var, default_url), key, merge_system=merge, **kwargs)

    def adapt(self, request: ChatRequest) -> list[dict[str, str]]:
        msgs = [{"role": m.role.value, "content": m.content} for m in request.messages]
        if not self.merge_system:
            return msgs
        merged: list[dict[str, str]] = []
        for m in msgs:
            if merged and m["role"] == "system" and merged[-1]["role"] == "system":
                merged[-1] = {"role": "system", "content": merged[-1]["content"] + "\n\n" + m["content"]}
            else:
                merged.append(m)
        return merged

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        body = {"model": request.model, "temperature": request.temperature, "messages": self.adapt(request)}
        try:
            resp = self._http.post(f"{self.base_url}/chat/completions", json=body,
                                   headers={"Authorization": f"Bearer {self.api_key}"})
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.name}: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"{self.name} rejected the request: {resp.text[:200]}", status=resp.status_code)
        doc = resp.json()
        try:
            content = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"{self.name}: malformed completion payload") from exc
        u = doc.get("usage") or {}
        cached = (u.get("prompt_tokens_details") or {}).get("cached_tokens", u.get("prompt_cache_hit_tokens", 0))
        return content or "", TokenUsage(u.get("prompt_tokens", 0), cached or 0, u.get("completion_tokens", 0))


class RoutingProvider:
    """Send each model to the provider registered for it."""

    name = "router"

    def __init__(self, routes: Mapping[str, Provider], default: Provider | None = None):
        self.routes = dict(routes)
        self.default = default

    def provider_for(self, model: str) -> Provider:
        provider = self.routes.get(model, self.default)
        if provider is None:
            raise ConfigurationError(f"no provider configured for model {model!r}")
        return provider

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage]:
        return self.provider_for(request.model).send(request)


def complete(request: ChatRequest, provider: Provider, policy: RetryPolicy = RetryPolicy(),
             ledger=None, sleep: Callable[[float], None] = time.sleep) -> ChatResponse:
    """Send ``request`` with retries; record usage of the successful attempt."""
    last: BaseException | None = None
    for attempt in range(1, policy.max_attempts + 1):
        if attempt > 1:
            sleep(policy.delay(attempt - 1))
        try:
            content, usage = provider.send(request)
        except ProviderError as exc:
            last = exc
            if not getattr(exc, "retryable", True):
                break
            continue
        if ledger is not None:
            ledger.record(request.model, usage.input_tokens, usage.output_tokens, usage.cached_input_tokens)
        return ChatResponse(content, usage, attempt, request.model)
    attempts = attempt
    raise ExhaustedError(f"{request.model}: no reply after {attempts} attempt(s): {last}", attempts, last)


class Gateway:
    """Shared entry point: concurrency cap, retries, ledger and transcripts.

    With ``deterministic=True`` wall times are recorded as 0 and transcripts
    are written sorted by request tag, so scripted runs are byte-identical
    whatever order concurrent calls finish in.
    """

    def __init__(self, provider: Provider, policy: RetryPolicy = RetryPolicy(), ledger=None,
                 max_concurrency: int = 4, sleep: Callable[[float], None] = time.sleep,
                 deterministic: bool = False):
        self.provider = provider
        self.policy = policy
        self.ledger = ledger
        self.max_concurrency = max_concurrency
        self.sleep = sleep
        self.deterministic = deterministic
        self._caps: dict[str, threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()
        self.transcripts: list[dict[str, Any]] = []

    def _cap(self, model: str) -> threading.BoundedSemaphore:
        target = self.provider.provider_for(model) if isinstance(self.provider, RoutingProvider) else self.provider
        key = getattr(target, "name", "default")
        with self._lock:
            if key not in self._caps:
                self._caps[key] = threading.BoundedSemaphore(self.max_concurrency)
            return self._caps[key]

    def complete(self, request: ChatRequest) -> ChatResponse:
        t0 = time.perf_counter()
        record: dict[str, Any] = {"tag": request.tag, "request": request.to_wire()}
        with self._cap(request.model):
            try:
                resp = complete(request, self.provider, self.policy, self.ledger, self.sleep)
            except ExhaustedError as exc:
                record.update(response=None, error=str(exc.last_error), usage=None, attempts=exc.attempts)
                self._log(record, t0)
                raise
        record.update(response={"content": resp.content}, usage=vars(resp.usage).copy(), attempts=resp.attempts)
        self._log(record, t0)
        return resp

    def _log(self, record: dict, t0: float):
        record["wall_ms"] = 0 if self.deterministic else round((time.perf_counter() - t0) * 1000, 3)
        with self._lock:
            self.transcripts.append(record)

    def chat(self, model: str, messages: Sequence[Message], tag: str | None = None,
             temperature: float = 0.0) -> ChatResponse:
        return self.complete(ChatRequest(model, tuple(messages), temperature, tag))

    def ordered_transcripts(self) -> list[dict[str, Any]]:
        with self._lock:
            records = list(self.transcripts)
        # stable: calls sharing a tag are sequential, so their order is kept
        return sorted(records, key=lambda r: r["tag"] or "") if self.deterministic else records

    def write_transcripts(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for rec in self.ordered_transcripts():
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        return path


def load_transcripts(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
