"""Chat-completion backends.

All backends expose ``complete(request) -> str``. ``HttpBackend`` speaks the
common chat-completion JSON shape; the others are deterministic stand-ins used
for tests and desk-scale evaluation.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .errors import BackendUnavailable, ScriptMiss
from .metrics import IdfTable
from .persona import EMPTY_PERSONA
from .retrieval import RECENT_LABEL, AssembledPrompt, extract_persona_block, parse_context_exchanges
from .text import STOPWORDS, tokenize

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
DEFAULT_API_KEY_ENV = "AFA_API_KEY"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: Sequence[ChatMessage]
    temperature: float = 0.0
    model_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a chat request needs at least one user message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def from_prompt(cls, prompt: AssembledPrompt, model_name: str = "", temperature: float = 0.0) -> "ChatRequest":
        return cls([ChatMessage(**m) for m in prompt.messages()], temperature, model_name)

    @property
    def last_user_message(self) -> str:
        return next(m.content for m in reversed(self.messages) if m.role == "user")

    @property
    def system_text(self) -> str:
        return "\n\n".join(m.content for m in self.messages if m.role == "system")

    def to_payload(self) -> dict:
        return {
            "model": self.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
        }


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


class EchoBackend:
    def complete(self, request: ChatRequest) -> str:
        return f"ECHO: {request.last_user_message}"


def persona_digest(request: ChatRequest) -> str:
    """Short stable hash of the persona section, or ``"none"``."""
    block = extract_persona_block(request.system_text)
    if block is None:
        return "none"
    return hashlib.sha256(block.encode("utf-8")).hexdigest()[:16]


class KeyMode(str, enum.Enum):
    EXACT_QUERY = "exact_query"
    QUERY_PLUS_PERSONA_DIGEST = "query_plus_persona_digest"


class ScriptedBackend:
    """Replay canned responses looked up by query (optionally plus persona digest)."""

    def __init__(self, script: Mapping[str, str], key_mode: KeyMode | str = KeyMode.EXACT_QUERY):
        self.script = dict(script)
        self.key_mode = KeyMode(key_mode)

    def key_for(self, request: ChatRequest) -> str:
        query = request.last_user_message
        if self.key_mode is KeyMode.EXACT_QUERY:
            return query
        return f"{query}\t{persona_digest(request)}"

    def complete(self, request: ChatRequest) -> str:
        key = self.key_for(request)
        try:
            return self.script[key]
        except KeyError:
            raise ScriptMiss(f"no scripted response for key {key[:80]!r}") from None

    @classmethod
    def from_jsonl(cls, path: str | Path, key_mode: KeyMode | str = KeyMode.EXACT_QUERY) -> "ScriptedBackend":
        script = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    script[str(obj["key"])] = str(obj["response"])
        return cls(script, key_mode)


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    max_backoff: float = 8.0

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return min(self.max_backoff, self.backoff_base * self.backoff_factor ** (attempt - 1))


_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpBackend:
    """Chat-completion client: POST ``messages`` and read ``choices[0].message.content``.

    The API key is read from the environment at call time and never appears
    in ``repr``, logs or :meth:`describe`.
    """

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        retry: RetryPolicy | None = None,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.retry = retry or RetryPolicy()
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def __repr__(self) -> str:
        return f"HttpBackend(url={self.url!r}, model={self.model!r}, api_key_env={self.api_key_env!r})"

    def describe(self) -> dict:
        return {"kind": "http", "url": self.url, "model": self.model, "api_key_env": self.api_key_env}

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def complete(self, request: ChatRequest) -> str:
        payload = request.to_payload()
        if not payload["model"]:
            payload["model"] = self.model
        last_error = "no attempt made"
        attempts = 0
        for attempt in range(1, self.retry.max_attempts + 1):
            attempts = attempt
            try:
                resp = self._client.post(self.url, json=payload, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = f"transport error: {type(exc).__name__}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp, attempts)
                last_error = f"HTTP {resp.status_code}"
                if resp.status_code not in _RETRYABLE_STATUS:
                    break
            logger.warning("chat request to %s failed (%s), attempt %d", self.url, last_error, attempt)
            if attempt < self.retry.max_attempts:
                self._sleep(self.retry.delay(attempt))
        raise BackendUnavailable(f"chat backend {self.url}: {last_error}", attempts)

    def _parse(self, resp: httpx.Response, attempts: int) -> str:
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed chat response from {self.url}: {exc!r}", attempts) from exc
        if not isinstance(content, str) or not content.strip():
            raise BackendUnavailable(f"empty chat response from {self.url}", attempts)
        return content


def top_idf_words(text: str, idf: IdfTable, n: int = 3) -> list[str]:
    """The ``n`` content words of ``text`` with the highest tf * idf, ties to first occurrence."""
    tokens = [t for t in tokenize(text) if t not in STOPWORDS and not t.isdigit() and len(t) > 1]
    tf: dict[str, int] = {}
    first: dict[str, int] = {}
    for pos, tok in enumerate(tokens):
        tf[tok] = tf.get(tok, 0) + 1
        first.setdefault(tok, pos)
    ranked = sorted(tf, key=lambda w: (-tf[w] * idf.weight(w), first[w]))
    return ranked[:n]


def _persona_values(block: str) -> str:
    """Persona text without the sentinel line or ``Category.key:`` labels."""
    lines = []
    for line in block.splitlines():
        line = line.strip()
        if not line or line == EMPTY_PERSONA:
            continue
        head, sep, value = line.partition(": ")
        if sep and "." in head and " " not in head:
            line = value
        lines.append(line)
    return "\n".join(lines)


@dataclass
class PersonaInjectingBackend:
    """Synthetic generator: ground truth plus the top IDF-weighted words of the persona in the prompt.

    With a persona section present, the words come from it (an empty profile
    contributes none). With no persona section at all, the backend echoes the
    most recent exchange in the context instead, the way an unrouted
    assistant picks up whatever was just said on a shared device. A prompt
    with neither yields the ground truth verbatim.
    """

    ground_truth: Mapping[str, str]
    idf: IdfTable = field(default_factory=IdfTable)
    n_words: int = 3

    def digest_source(self, request: ChatRequest) -> str:
        system = request.system_text
        block = extract_persona_block(system)
        if block is not None:
            return _persona_values(block)
        exchanges = parse_context_exchanges(system)
        if not exchanges:
            return ""
        recent = [e for e in exchanges if e[0] == RECENT_LABEL]
        _, user, assistant = (recent or exchanges)[-1]
        return f"{user}\n{assistant}"

    def complete(self, request: ChatRequest) -> str:
        query = request.last_user_message
        try:
            truth = self.ground_truth[query]
        except KeyError:
            raise ScriptMiss(f"no ground truth for query {query[:80]!r}") from None
        words = top_idf_words(self.digest_source(request), self.idf, self.n_words)
        return f"{truth} {' '.join(words)}" if words else truth


def build_backend(cfg: Mapping, **extra) -> ChatBackend:
    """Construct a backend from a ``backend`` config section."""
    kind = cfg.get("kind", "echo")
    if kind == "echo":
        return EchoBackend()
    if kind == "scripted":
        return ScriptedBackend.from_jsonl(cfg["script"], cfg.get("key_mode", KeyMode.EXACT_QUERY))
    if kind == "http":
        return HttpBackend(
            cfg["url"],
            cfg.get("model", ""),
            cfg.get("api_key_env", DEFAULT_API_KEY_ENV),
            RetryPolicy(max_attempts=int(cfg.get("max_attempts", 3))),
            timeout=float(cfg.get("timeout", 60.0)),
        )
    if kind == "persona_injecting":
        return PersonaInjectingBackend(extra.get("ground_truth", {}), extra.get("idf", IdfTable()))
    raise ValueError(f"unknown backend kind {kind!r}")
