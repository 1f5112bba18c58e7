"""Provider-agnostic chat access with tool calling, plus usage accounting.

Two backends: an HTTP backend speaking the common chat-completions JSON
protocol (base URL and key from DRILL_LLM_BASE_URL / DRILL_LLM_API_KEY), and
a deterministic replay backend that serves scripted responses and verifies
request digests so tests fail loudly instead of improvising.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import ProviderError, ReplayExhausted, ReplayMismatch

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
ROLE_TOOL = "tool"


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    name: str
    arguments: dict


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: Optional[str] = None

    def __post_init__(self):
        if self.role == ROLE_TOOL and not self.tool_call_id:
            raise ValueError("tool turns require tool_call_id")
        if self.role == ROLE_ASSISTANT and not self.content and not self.tool_calls:
            raise ValueError("assistant turn needs content or tool calls")


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
        )


@dataclass(frozen=True)
class ModelParams:
    model_id: str
    temperature: float = 0.1
    max_output_tokens: int = 4096
    price_in_per_mtok: float = 3.0
    price_out_per_mtok: float = 15.0

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.price_in_per_mtok < 0 or self.price_out_per_mtok < 0:
            raise ValueError("pricing must be nonnegative")

    def cost_of(self, usage: Usage) -> float:
        return (
            usage.input_tokens / 1e6 * self.price_in_per_mtok
            + usage.output_tokens / 1e6 * self.price_out_per_mtok
        )


class UsageLedger:
    """Per-task token and cost accumulator, bucketed by phase."""

    def __init__(self):
        self.input_tokens = 0
        self.output_tokens = 0
        self.cost_usd = 0.0
        self.per_phase: dict[str, dict] = {}

    def accrue(self, phase: str, usage: Usage, params: ModelParams) -> None:
        if usage.input_tokens < 0 or usage.output_tokens < 0:
            raise ValueError("usage must be nonnegative")
        cost = params.cost_of(usage)
        self.input_tokens += usage.input_tokens
        self.output_tokens += usage.output_tokens
        self.cost_usd += cost
        bucket = self.per_phase.setdefault(
            phase, {"input_tokens": 0, "output_tokens": 0, "cost_usd": 0.0}
        )
        bucket["input_tokens"] += usage.input_tokens
        bucket["output_tokens"] += usage.output_tokens
        bucket["cost_usd"] += cost


def accrue(ledger: UsageLedger, phase: str, usage: Usage, params: ModelParams) -> UsageLedger:
    ledger.accrue(phase, usage, params)
    return ledger


# --- request canonicalization ------------------------------------------------

def _canonical_request(
    history: Sequence[ChatTurn], tools: Sequence[dict], params: ModelParams
) -> dict:
    return {
        "model": params.model_id,
        "temperature": params.temperature,
        "tools": sorted(t.get("name", "") for t in tools),
        "messages": [
            {
                "role": t.role,
                "content": t.content,
                "tool_calls": [
                    {"name": c.name, "arguments": c.arguments} for c in t.tool_calls
                ],
                "tool_call_id": t.tool_call_id,
            }
            for t in history
        ],
    }


def request_digest(
    history: Sequence[ChatTurn], tools: Sequence[dict], params: ModelParams
) -> str:
    blob = json.dumps(
        _canonical_request(history, tools, params), sort_keys=True, ensure_ascii=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _check_preconditions(history: Sequence[ChatTurn]) -> None:
    if not history:
        raise ValueError("history must be non-empty")
    if history[0].role != ROLE_SYSTEM:
        raise ValueError("first turn must be the system prompt")


# --- backends -----------------------------------------------------------------

class HTTPBackend:
    """Chat-completions-style HTTP JSON API with tool calling."""

    MAX_RETRIES = 3

    def __init__(self, base_url: Optional[str] = None, api_key: Optional[str] = None):
        self.base_url = (base_url or os.environ.get("DRILL_LLM_BASE_URL", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("DRILL_LLM_API_KEY", "")
        if not self.base_url:
            raise ProviderError(0, "no provider base URL configured")

    def chat(
        self,
        history: Sequence[ChatTurn],
        tools: Sequence[dict],
        params: ModelParams,
    ) -> tuple[ChatTurn, Usage]:
        _check_preconditions(history)
        import requests

        payload = {
            "model": params.model_id,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
            "messages": [self._wire_turn(t) for t in history],
        }
        if tools:
            payload["tools"] = [
                {"type": "function", "function": t} for t in tools
            ]
        last_error = None
        for attempt in range(self.MAX_RETRIES + 1):
            try:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers={"Authorization": f"Bearer {self.api_key}"},
                    timeout=300,
                )
            except requests.RequestException as e:
                last_error = ProviderError(0, str(e))
                time.sleep(min(2**attempt, 8))
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = ProviderError(resp.status_code, resp.text[:500])
                time.sleep(min(2**attempt, 8))
                continue
            if resp.status_code != 200:
                raise ProviderError(resp.status_code, resp.text[:500])
            return self._parse_response(resp.json())
        raise last_error or ProviderError(0, "transport failed")

    @staticmethod
    def _wire_turn(turn: ChatTurn) -> dict:
        msg: dict = {"role": turn.role, "content": turn.content}
        if turn.tool_calls:
            msg["tool_calls"] = [
                {
                    "id": c.call_id,
                    "type": "function",
                    "function": {"name": c.name, "arguments": json.dumps(c.arguments)},
                }
                for c in turn.tool_calls
            ]
        if turn.tool_call_id:
            msg["tool_call_id"] = turn.tool_call_id
        return msg

    @staticmethod
    def _parse_response(doc: dict) -> tuple[ChatTurn, Usage]:
        try:
            msg = doc["choices"][0]["message"]
        except (KeyError, IndexError) as e:
            raise ProviderError(200, f"malformed response: {e}") from e
        calls = []
        for c in msg.get("tool_calls") or []:
            fn = c.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {"_raw": fn.get("arguments")}
            calls.append(
                ToolCall(call_id=c.get("id", f"call_{len(calls)}"), name=fn.get("name", ""), arguments=args)
            )
        usage_doc = doc.get("usage", {})
        usage = Usage(
            input_tokens=int(usage_doc.get("prompt_tokens", 0)),
            output_tokens=int(usage_doc.get("completion_tokens", 0)),
        )
        turn = ChatTurn(
            role=ROLE_ASSISTANT,
            content=msg.get("content") or "",
            tool_calls=tuple(calls),
        )
        return turn, usage


@dataclass
class ReplayEntry:
    response_content: str
    tool_calls: tuple[ToolCall, ...]
    usage: Usage
    expect_digest: Optional[str] = None


class ReplayBackend:
    """Serves a scripted transcript; identical call sequences replay byte-
    for-byte. Entries with a pinned digest verify the actual request matches
    what was recorded; in fill mode, observed digests are captured instead."""

    def __init__(self, entries: Sequence[ReplayEntry], strict: bool = True, fill: bool = False):
        self.entries = list(entries)
        self.strict = strict
        self.fill = fill
        self.cursor = 0
        self.observed_digests: list[str] = []

    @classmethod
    def from_file(cls, path: Path, strict: bool = True, fill: bool = False) -> "ReplayBackend":
        doc = json.loads(Path(path).read_text())
        return cls(
            [_entry_from_doc(e) for e in doc["entries"]], strict=strict, fill=fill
        )

    def chat(
        self,
        history: Sequence[ChatTurn],
        tools: Sequence[dict],
        params: ModelParams,
    ) -> tuple[ChatTurn, Usage]:
        _check_preconditions(history)
        if self.cursor >= len(self.entries):
            raise ReplayExhausted(
                f"transcript exhausted after {len(self.entries)} calls"
            )
        entry = self.entries[self.cursor]
        digest = request_digest(history, tools, params)
        self.observed_digests.append(digest)
        if self.fill:
            entry.expect_digest = digest
        elif self.strict and entry.expect_digest and entry.expect_digest != digest:
            raise ReplayMismatch(
                f"call #{self.cursor}: expected digest {entry.expect_digest[:12]}…, "
                f"got {digest[:12]}…"
            )
        self.cursor += 1
        turn = ChatTurn(
            role=ROLE_ASSISTANT,
            content=entry.response_content,
            tool_calls=entry.tool_calls,
        )
        return turn, entry.usage

    def to_document(self) -> dict:
        return {"entries": [_entry_to_doc(e) for e in self.entries]}


def _entry_from_doc(doc: dict) -> ReplayEntry:
    resp = doc.get("response", {})
    calls = tuple(
        ToolCall(
            call_id=c.get("id", f"call_{i}"),
            name=c["name"],
            arguments=c.get("arguments", {}),
        )
        for i, c in enumerate(resp.get("tool_calls", []))
    )
    usage = doc.get("usage", {})
    return ReplayEntry(
        response_content=resp.get("content", "") or "",
        tool_calls=calls,
        usage=Usage(
            input_tokens=int(usage.get("input_tokens", 0)),
            output_tokens=int(usage.get("output_tokens", 0)),
        ),
        expect_digest=doc.get("expect_digest"),
    )


def _entry_to_doc(entry: ReplayEntry) -> dict:
    return {
        "expect_digest": entry.expect_digest,
        "response": {
            "content": entry.response_content,
            "tool_calls": [
                {"id": c.call_id, "name": c.name, "arguments": c.arguments}
                for c in entry.tool_calls
            ],
        },
        "usage": {
            "input_tokens": entry.usage.input_tokens,
            "output_tokens": entry.usage.output_tokens,
        },
    }


def backend_from_environment():
    """HTTP backend when configured, else None (caller must supply replay)."""
    if os.environ.get("DRILL_LLM_BASE_URL"):
        return HTTPBackend()
    return None
