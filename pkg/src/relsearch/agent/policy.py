"""Policies: given the system prompt and message history, produce the next assistant message."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

from ..errors import PolicyTimeout, TransportError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: str  # raw JSON text, exactly as the policy produced it


@dataclass
class PolicyMessage:
    text: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)

    def to_chat(self) -> dict[str, Any]:
        msg: dict[str, Any] = {"role": "assistant", "content": self.text or None}
        if self.tool_calls:
            msg["tool_calls"] = [{"id": c.id, "type": "function",
                                  "function": {"name": c.name, "arguments": c.arguments}}
                                 for c in self.tool_calls]
        return msg


class Policy(Protocol):
    def next_message(self, messages: Sequence[dict[str, Any]], tools: Sequence[dict[str, Any]]) -> PolicyMessage:
        ...


class ScriptedPolicy:
    """Replays a fixed script: a JSON array whose items are one turn each.

    A turn is an action document or a list of them.  Action documents look like
    ``{"tool": "validate_program", "args": {...}}`` or ``{"final": "text"}``;
    ``"raw_args"`` (a string) replaces ``"args"`` to send malformed JSON.
    """

    def __init__(self, script: list[Any]):
        if not isinstance(script, list):
            raise ValueError("a policy script must be a JSON array")
        self.turns = [t if isinstance(t, list) else [t] for t in script]
        self.position = 0
        self._calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        return cls(json.loads(Path(path).read_text()))

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.turns)

    def next_message(self, messages, tools) -> PolicyMessage:
        if self.exhausted:
            return PolicyMessage(text="(script finished)")
        docs = self.turns[self.position]
        self.position += 1
        msg = PolicyMessage()
        texts = []
        for doc in docs:
            if not isinstance(doc, dict):
                raise ValueError(f"script turn {self.position}: action documents must be objects")
            if "final" in doc:
                texts.append(str(doc["final"]))
                continue
            if "tool" not in doc:
                raise ValueError(f"script turn {self.position}: expected a 'tool' or 'final' key")
            if "raw_args" in doc:
                raw = str(doc["raw_args"])
            else:
                raw = json.dumps(doc.get("args", {}), sort_keys=True)
            self._calls += 1
            msg.tool_calls.append(ToolCall(f"call_{self._calls}", doc["tool"], raw))
            if "text" in doc:
                texts.append(str(doc["text"]))
        msg.text = "\n".join(texts)
        return msg


@dataclass(frozen=True)
class LlmProfile:
    endpoint: str  # base URL of an OpenAI-compatible chat API
    model: str
    api_key_env: str | None = None
    temperature: float = 1.0
    max_output_tokens: int = 8000

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LlmProfile":
        return cls(endpoint=d["endpoint"], model=d["model"], api_key_env=d.get("api_key_env"),
                   temperature=float(d.get("temperature", 1.0)),
                   max_output_tokens=int(d.get("max_output_tokens", 8000)))


class LlmPolicy:
    """Chat-completions client with tool calling."""

    RETRIES = 3
    BACKOFF_S = 1.0

    def __init__(self, profile: LlmProfile, *, timeout_s: float = 900.0, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.profile = profile
        self.timeout_s = timeout_s
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if profile.api_key_env:
            key = os.environ.get(profile.api_key_env)
            if not key:
                raise TransportError(f"environment variable {profile.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=profile.endpoint.rstrip("/"), headers=headers,
                                    timeout=timeout_s, transport=transport)

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        last = None
        for attempt in range(self.RETRIES):
            try:
                resp = self._client.post("/chat/completions", json=body)
            except httpx.TimeoutException as e:
                raise PolicyTimeout(f"no response within {self.timeout_s:g}s") from e
            except httpx.TransportError as e:
                last = f"{type(e).__name__}: {e}"
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                else:
                    return resp.json()
            if attempt + 1 < self.RETRIES:
                self._sleep(self.BACKOFF_S * 2 ** attempt)
        raise TransportError(f"endpoint failed after {self.RETRIES} attempts ({last})")

    def next_message(self, messages, tools) -> PolicyMessage:
        body = {"model": self.profile.model, "messages": list(messages),
                "temperature": self.profile.temperature, "max_tokens": self.profile.max_output_tokens}
        if tools:
            body["tools"] = list(tools)
        data = self._post(body)
        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError):
            raise TransportError("response has no choices[0].message") from None
        calls = []
        for i, c in enumerate(message.get("tool_calls") or []):
            fn = c.get("function", {})
            args = fn.get("arguments", "")
            if not isinstance(args, str):
                args = json.dumps(args)
            calls.append(ToolCall(c.get("id") or f"call_{i}", fn.get("name", ""), args))
        return PolicyMessage(text=message.get("content") or "", tool_calls=calls)

    def close(self) -> None:
        self._client.close()


def load_profiles(path: str | Path) -> dict[str, LlmProfile]:
    data = json.loads(Path(path).read_text())
    return {name: LlmProfile.from_dict(d) for name, d in data.items()}
