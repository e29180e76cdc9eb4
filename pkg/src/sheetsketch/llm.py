"""Chat backends: message types, an HTTP chat-completions client, scripted replay, token budgeting."""

from __future__ import annotations

import base64
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence, Union

import httpx

ROLES = ("system", "user", "assistant", "tool")
IMAGE_TOKENS = 256


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class TranscriptExhausted(BackendError):
    pass


class UnsatisfiableBudget(ValueError):
    pass


# --------------------------------------------------------------------------
# message types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class ImageRef:
    data: bytes
    media_type: str = "image/png"

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


Part = Union[Text, ImageRef]


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.id, self.name, json.dumps(self.arguments, sort_keys=True, default=str)))

    def to_json(self) -> dict:
        return {"id": self.id, "name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...] = ()
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages need a tool_call_id")
        if self.role != "tool" and self.tool_call_id is not None:
            raise ValueError("only tool messages carry a tool_call_id")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("only assistant messages carry tool calls")
        if self.role in ("system", "assistant") and any(isinstance(p, ImageRef) for p in self.parts):
            raise ValueError("images are only allowed on user and tool messages")

    @classmethod
    def system(cls, text: str) -> ChatMessage:
        return cls("system", (Text(text),))

    @classmethod
    def user(cls, text: str, *images: ImageRef) -> ChatMessage:
        return cls("user", (Text(text), *images))

    @classmethod
    def assistant(cls, text: str = "", tool_calls: Sequence[ToolCall] = ()) -> ChatMessage:
        return cls("assistant", (Text(text),) if text else (), tuple(tool_calls))

    @classmethod
    def tool(cls, tool_call_id: str, parts: Sequence[Part]) -> ChatMessage:
        return cls("tool", tuple(parts), tool_call_id=tool_call_id)

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, Text))

    @property
    def images(self) -> list[ImageRef]:
        return [p for p in self.parts if isinstance(p, ImageRef)]

    def to_json(self) -> dict:
        parts = []
        for p in self.parts:
            if isinstance(p, Text):
                parts.append({"type": "text", "text": p.text})
            else:
                parts.append({"type": "image", "media_type": p.media_type, "data": base64.b64encode(p.data).decode()})
        out: dict[str, Any] = {"role": self.role, "parts": parts}
        if self.tool_calls:
            out["tool_calls"] = [c.to_json() for c in self.tool_calls]
        if self.tool_call_id is not None:
            out["tool_call_id"] = self.tool_call_id
        return out

    @classmethod
    def from_json(cls, doc: dict) -> ChatMessage:
        parts: list[Part] = []
        for p in doc.get("parts", []):
            if p["type"] == "text":
                parts.append(Text(p["text"]))
            else:
                parts.append(ImageRef(base64.b64decode(p["data"]), p.get("media_type", "image/png")))
        calls = tuple(ToolCall(c["id"], c["name"], c.get("arguments", {})) for c in doc.get("tool_calls", []))
        return cls(doc["role"], tuple(parts), calls, doc.get("tool_call_id"))


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters_schema: dict[str, Any]

    def __post_init__(self) -> None:
        if "required" not in self.parameters_schema:
            raise ValueError(f"tool {self.name!r}: schema must list its required fields")

    def __hash__(self) -> int:
        return hash(self.name)

    def to_wire(self) -> dict:
        return {
            "type": "function",
            "function": {"name": self.name, "description": self.description, "parameters": self.parameters_schema},
        }


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens_per_round: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_tokens_per_round <= 0:
            raise ValueError("max_tokens_per_round must be positive")


class Backend(Protocol):
    def complete(
        self, messages: Sequence[ChatMessage], tools: Sequence[ToolSpec], decoding: DecodingParams
    ) -> ChatMessage: ...


def _check_conversation(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("cannot complete an empty conversation")
    if messages[0].role not in ("system", "user"):
        raise ValueError("a conversation must open with a system or user message")


# --------------------------------------------------------------------------
# HTTP backend
# --------------------------------------------------------------------------


def _wire_content(parts: Sequence[Part]) -> str | list[dict]:
    if all(isinstance(p, Text) for p in parts):
        return "\n".join(p.text for p in parts)  # type: ignore[union-attr]
    out = []
    for p in parts:
        if isinstance(p, Text):
            out.append({"type": "text", "text": p.text})
        else:
            out.append({"type": "image_url", "image_url": {"url": p.data_url()}})
    return out


def wire_messages(messages: Sequence[ChatMessage]) -> list[dict]:
    out: list[dict] = []
    for m in messages:
        if m.role == "assistant":
            entry: dict[str, Any] = {"role": "assistant", "content": m.text or None}
            if m.tool_calls:
                entry["tool_calls"] = [
                    {
                        "id": c.id,
                        "type": "function",
                        "function": {"name": c.name, "arguments": json.dumps(c.arguments, ensure_ascii=False)},
                    }
                    for c in m.tool_calls
                ]
            out.append(entry)
        elif m.role == "tool":
            # tool messages are text-only on the wire; images follow in a user turn
            out.append({"role": "tool", "tool_call_id": m.tool_call_id, "content": m.text or "(image output)"})
            if m.images:
                out.append(
                    {
                        "role": "user",
                        "content": [{"type": "text", "text": f"Image output of tool call {m.tool_call_id}:"}]
                        + [{"type": "image_url", "image_url": {"url": i.data_url()}} for i in m.images],
                    }
                )
        else:
            out.append({"role": m.role, "content": _wire_content(m.parts)})
    return out


def wire_request(model: str, messages: Sequence[ChatMessage], tools: Sequence[ToolSpec], decoding: DecodingParams) -> dict:
    body: dict[str, Any] = {
        "model": model,
        "messages": wire_messages(messages),
        "temperature": decoding.temperature,
        "top_p": decoding.top_p,
        "max_tokens": decoding.max_tokens_per_round,
    }
    if tools:
        body["tools"] = [t.to_wire() for t in tools]
        body["tool_choice"] = "auto"
    return body


def parse_wire_response(doc: Any) -> ChatMessage:
    try:
        msg = doc["choices"][0]["message"]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("response has no choices[0].message") from None
    if not isinstance(msg, dict):
        raise ProtocolError("choices[0].message is not an object")
    content = msg.get("content") or ""
    if isinstance(content, list):
        content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
    if not isinstance(content, str):
        raise ProtocolError("message content is neither text nor a list of parts")
    calls = []
    for i, raw in enumerate(msg.get("tool_calls") or []):
        try:
            fn = raw["function"]
            args = fn.get("arguments") or "{}"
            args = json.loads(args) if isinstance(args, str) else args
            if not isinstance(args, dict):
                raise ValueError("arguments must be a JSON object")
            calls.append(ToolCall(str(raw.get("id") or f"call_{i}"), str(fn["name"]), args))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed tool call #{i}: {exc}") from None
    return ChatMessage.assistant(content, calls)


@dataclass
class HttpBackend:
    """Client for an OpenAI-style ``/chat/completions`` endpoint."""

    base_url: str
    model: str
    api_key_env: str | None = None
    retries: int = 3
    backoff_s: float = 1.0
    timeout_s: float = 300.0
    client: httpx.Client | None = None
    sleep: Callable[[float], None] = time.sleep
    attempts_made: int = 0

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(
        self, messages: Sequence[ChatMessage], tools: Sequence[ToolSpec], decoding: DecodingParams
    ) -> ChatMessage:
        _check_conversation(messages)
        body = wire_request(self.model, messages, tools, decoding)
        client = self.client or httpx.Client(timeout=self.timeout_s)
        last = "no attempt made"
        try:
            for attempt in range(self.retries + 1):
                if attempt:
                    self.sleep(self.backoff_s * 2 ** (attempt - 1))
                self.attempts_made += 1
                try:
                    resp = client.post(self.url, json=body, headers=self._headers())
                except httpx.HTTPError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                try:
                    doc = resp.json()
                except ValueError:
                    raise ProtocolError("response body is not JSON") from None
                return parse_wire_response(doc)
        finally:
            if self.client is None:
                client.close()
        raise BackendUnavailable(f"{self.url} failed after {self.retries + 1} attempts ({last})")


# --------------------------------------------------------------------------
# scripted replay
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    message: dict[str, Any]
    matcher: str | None = None


def _entry_message(entry: ScriptEntry, serial: int) -> ChatMessage:
    msg = entry.message
    calls = []
    for i, c in enumerate(msg.get("tool_calls", [])):
        calls.append(ToolCall(str(c.get("id") or f"call_{serial}_{i}"), c["name"], dict(c.get("arguments", {}))))
    return ChatMessage.assistant(str(msg.get("content", "")), calls)


class ScriptedBackend:
    """Replays a transcript of assistant turns.

    Each entry may carry a ``matcher``: a substring that must occur in the
    latest context message. The cursor moves forward to the first entry that
    accepts, skipping (and consuming) the ones in between.
    """

    def __init__(self, entries: Sequence[ScriptEntry], name: str = "scripted") -> None:
        self.entries = tuple(entries)
        self.name = name
        self.cursor = 0
        self.served = 0
        self.inputs: list[list[ChatMessage]] = []

    @classmethod
    def from_json(cls, doc: list, name: str = "scripted") -> ScriptedBackend:
        if not isinstance(doc, list):
            raise ValueError("a transcript is a JSON array of {matcher?, message} entries")
        entries = []
        for i, e in enumerate(doc):
            if not isinstance(e, dict) or not isinstance(e.get("message"), dict):
                raise ValueError(f"transcript entry {i} needs a 'message' object")
            entries.append(ScriptEntry(e["message"], e.get("matcher")))
        return cls(entries, name)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        path = Path(path)
        return cls.from_json(json.loads(path.read_text(encoding="utf-8")), path.stem)

    @classmethod
    def of(cls, *contents: str | dict) -> ScriptedBackend:
        """Shorthand: plain strings become text turns, dicts are messages."""
        return cls([ScriptEntry(c if isinstance(c, dict) else {"content": c}) for c in contents])

    def clone(self) -> ScriptedBackend:
        return ScriptedBackend(self.entries, self.name)

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.cursor

    def complete(
        self, messages: Sequence[ChatMessage], tools: Sequence[ToolSpec], decoding: DecodingParams
    ) -> ChatMessage:
        _check_conversation(messages)
        self.inputs.append(list(messages))
        latest = messages[-1].text
        for i in range(self.cursor, len(self.entries)):
            entry = self.entries[i]
            if entry.matcher is None or entry.matcher in latest:
                self.cursor = i + 1
                self.served += 1
                return _entry_message(entry, self.served)
        self.cursor = len(self.entries)
        raise TranscriptExhausted(f"transcript {self.name!r} has no entry accepting the current context")


@dataclass
class CountingBackend:
    """Wraps a backend and counts completed calls."""

    inner: Backend
    calls: int = 0

    def complete(
        self, messages: Sequence[ChatMessage], tools: Sequence[ToolSpec], decoding: DecodingParams
    ) -> ChatMessage:
        reply = self.inner.complete(messages, tools, decoding)
        self.calls += 1
        return reply


# --------------------------------------------------------------------------
# token budgeting
# --------------------------------------------------------------------------

TokenEstimator = Callable[[ChatMessage], int]


def _fixed_chars(message: ChatMessage) -> int:
    return sum(len(c.name) + len(json.dumps(c.arguments, ensure_ascii=False)) for c in message.tool_calls)


def estimate_tokens(message: ChatMessage) -> int:
    """ceil(characters / 4) plus a flat 256 per image."""
    chars = sum(len(p.text) for p in message.parts if isinstance(p, Text)) + _fixed_chars(message)
    return math.ceil(chars / 4) + IMAGE_TOKENS * len(message.images)


def truncation_marker(n: int) -> str:
    return f"…[truncated {n} chars]…"


def _cut(text: str, target: int) -> str:
    """Shorten ``text`` to at most ``target`` characters, keeping its head and tail."""
    if len(text) <= target:
        return text
    # the marker for len(text) is at least as long as any marker we could emit
    n = len(text) - target + len(truncation_marker(len(text)))
    if n >= len(text):
        return ""
    keep = len(text) - n
    head = (keep + 1) // 2
    return text[:head] + truncation_marker(n) + text[len(text) - (keep - head) :]


def truncate_to_budget(message: ChatMessage, budget_tokens: int, estimator: TokenEstimator = estimate_tokens) -> ChatMessage:
    if budget_tokens < 64:
        raise ValueError("budget must be at least 64 tokens")
    if estimator(message) <= budget_tokens:
        return message
    fixed_tokens = IMAGE_TOKENS * len(message.images) + math.ceil(_fixed_chars(message) / 4)
    if fixed_tokens > budget_tokens:
        raise UnsatisfiableBudget(
            f"non-text payload needs {fixed_tokens} tokens, more than the budget of {budget_tokens}"
        )
    parts = list(message.parts)
    while estimator(ChatMessage(message.role, tuple(parts), message.tool_calls, message.tool_call_id)) > budget_tokens:
        texts = [(len(p.text), i) for i, p in enumerate(parts) if isinstance(p, Text) and p.text]
        if not texts:
            raise UnsatisfiableBudget("nothing left to truncate")
        total = sum(n for n, _ in texts)
        allowed = (budget_tokens - IMAGE_TOKENS * len(message.images)) * 4 - _fixed_chars(message)
        longest, i = max(texts)
        excess = max(total - allowed, 1)
        parts[i] = Text(_cut(parts[i].text, max(longest - excess, 0)))  # type: ignore[union-attr]
    return ChatMessage(message.role, tuple(parts), message.tool_calls, message.tool_call_id)

