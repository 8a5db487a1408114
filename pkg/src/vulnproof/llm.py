"""Chat-model backend with record/replay cassettes.

Three modes:
  live    every completion goes to an OpenAI-compatible HTTP endpoint
  record  completions go live, then get appended to a cassette (existing
          keys are skipped, so re-recording is idempotent)
  replay  completions are answered from the cassette only; a miss is an
          error, never a silent fallback

A cassette is NDJSON, one completion per line, keyed by
(agent role, per-role turn index, digest of the last user message).
The digest ignores whitespace differences so cosmetic prompt reflow does
not invalidate recordings; anything substantive (ports, secrets,
timestamps) must therefore be kept out of prompts or pinned.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import requests

AGENT_ROLES = ("strategist", "explorer", "exploiter", "poc_gen")

_WS_RUN = re.compile(r"\s+")


class BackendError(RuntimeError):
    pass


class ReplayMiss(BackendError):
    """Replay-mode lookup failed: the conversation diverged from the recording."""


def normalize_whitespace(text: str) -> str:
    return _WS_RUN.sub(" ", text).strip()


def message_digest(text: str) -> str:
    return hashlib.sha256(normalize_whitespace(text).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    content: str


class Conversation:
    """Ordered chat history for one agent instance."""

    def __init__(self, system: str = ""):
        self.messages: list[Message] = []
        if system:
            self.messages.append(Message("system", system))

    def add_user(self, content: str) -> None:
        self.messages.append(Message("user", content))

    def add_assistant(self, content: str) -> None:
        self.messages.append(Message("assistant", content))

    def last_user(self) -> str:
        for msg in reversed(self.messages):
            if msg.role == "user":
                return msg.content
        raise BackendError("conversation has no user message to complete")

    def as_payload(self) -> list[dict[str, str]]:
        return [{"role": m.role, "content": m.content} for m in self.messages]


@dataclass
class BackendConfig:
    mode: str = "replay"  # live | record | replay
    cassette_path: Optional[Path] = None
    live_url: str = field(default_factory=lambda: os.environ.get("VULNPROOF_LLM_URL", ""))
    live_model: str = field(default_factory=lambda: os.environ.get("VULNPROOF_LLM_MODEL", ""))
    api_key: str = field(default_factory=lambda: os.environ.get("VULNPROOF_LLM_API_KEY", ""))
    temperature: float = 0.0
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown backend mode {self.mode!r}")
        if self.mode in ("record", "replay") and self.cassette_path is None:
            raise ValueError(f"{self.mode} mode requires a cassette path")
        if self.cassette_path is not None:
            self.cassette_path = Path(self.cassette_path)


class CassetteStore:
    """NDJSON completion store; in-memory index keyed (role, turn, digest)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._index: dict[tuple[str, int, str], str] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise BackendError(f"{self.path}:{lineno}: bad cassette line: {e}") from e
            key = (entry["role"], int(entry["turn"]), entry["key_digest"])
            self._index[key] = entry["response"]

    def __len__(self) -> int:
        return len(self._index)

    def get(self, role: str, turn: int, digest: str) -> Optional[str]:
        return self._index.get((role, turn, digest))

    def put(self, role: str, turn: int, digest: str, request_excerpt: str, response: str) -> None:
        key = (role, turn, digest)
        if key in self._index:
            return
        self._index[key] = response
        entry = {
            "role": role,
            "turn": turn,
            "key_digest": digest,
            "request_excerpt": request_excerpt,
            "response": response,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


Transport = Callable[[list[dict[str, str]], str], str]


def http_transport(config: BackendConfig) -> Transport:
    """Transport for OpenAI-compatible /chat/completions endpoints."""
    if not config.live_url or not config.live_model:
        raise BackendError(
            "live backend not configured: set VULNPROOF_LLM_URL and VULNPROOF_LLM_MODEL"
        )
    session = requests.Session()

    def call(messages: list[dict[str, str]], agent_role: str) -> str:
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        try:
            resp = session.post(
                config.live_url.rstrip("/") + "/chat/completions",
                json={
                    "model": config.live_model,
                    "messages": messages,
                    "temperature": config.temperature,
                },
                headers=headers,
                timeout=config.timeout,
            )
            resp.raise_for_status()
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, ValueError) as e:
            raise BackendError(f"model call failed for {agent_role}: {e}") from e

    return call


class ChatBackend:
    """Completion source for all agents in one run.

    Turn indices count per agent role per backend instance, so the same
    cassette deterministically replays a full multi-agent run.
    """

    def __init__(self, config: BackendConfig, transport: Optional[Transport] = None):
        self.config = config
        self._turns: dict[str, int] = defaultdict(int)
        self._store: Optional[CassetteStore] = None
        if config.mode in ("record", "replay"):
            self._store = CassetteStore(config.cassette_path)
            if config.mode == "replay" and not config.cassette_path.exists():
                raise BackendError(f"cassette not found: {config.cassette_path}")
        self._transport: Optional[Transport] = transport
        if self._transport is None and config.mode in ("live", "record"):
            self._transport = http_transport(config)

    def turn_count(self, agent_role: str) -> int:
        return self._turns[agent_role]

    def complete(self, agent_role: str, conversation: Conversation) -> str:
        if agent_role not in AGENT_ROLES:
            raise BackendError(f"unknown agent role {agent_role!r}; expected one of {AGENT_ROLES}")
        turn = self._turns[agent_role]
        self._turns[agent_role] += 1
        last = conversation.last_user()
        digest = message_digest(last)

        if self.config.mode == "replay":
            response = self._store.get(agent_role, turn, digest)
            if response is None:
                raise ReplayMiss(
                    f"no cassette entry for role={agent_role} turn={turn} "
                    f"digest={digest[:12]}... (prompt starts: {normalize_whitespace(last)[:80]!r})"
                )
            return response

        if self.config.mode == "record":
            existing = self._store.get(agent_role, turn, digest)
            if existing is not None:
                return existing
            response = self._transport(conversation.as_payload(), agent_role)
            self._store.put(
                agent_role, turn, digest, normalize_whitespace(last)[:200], response
            )
            return response

        return self._transport(conversation.as_payload(), agent_role)


def summarize_output(
    text: str,
    limit: int,
    backend: Optional[ChatBackend] = None,
    agent_role: str = "exploiter",
) -> str:
    """Shrink tool output to at most ``limit`` characters.

    Tries a model summary when a backend is supplied; any backend problem
    (including replay misses) falls back to keeping the head and tail of
    the output around an omission marker. Always returns <= limit chars.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if len(text) <= limit:
        return text

    if backend is not None:
        conv = Conversation(
            "You compress tool output. Reply with only the compressed text: keep verbatim "
            "status lines, error messages, tokens, paths and parameter names; drop repetition."
        )
        conv.add_user(f"Compress to under {limit} characters:\n\n{text}")
        try:
            summary = backend.complete(agent_role, conv)
            if summary and len(summary) <= limit:
                return summary
        except BackendError:
            pass

    marker = f"\n... [{len(text)} chars total, middle omitted] ...\n"
    if limit <= len(marker) + 2:
        return text[:limit]
    budget = limit - len(marker)
    head = budget // 2
    tail = budget - head
    return text[:head] + marker + text[-tail:]
