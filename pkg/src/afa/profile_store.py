"""Per-user conversation memory.

Each user has a bounded window of recent turns. When the window fills, it is
summarised into a permanent ``SessionSummary`` and cleared. Every turn is also
kept in an append-only history that retrieval can rank.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .errors import CorruptStore, OutOfOrderTurn, RolloverFailed

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 10
SUMMARY_TOKENS_PER_FIELD = 12
SUMMARY_TOKEN_CAP = 120


@dataclass(frozen=True)
class Turn:
    turn_index: int
    query: str
    response: str
    embedding: tuple[float, ...] | None = None
    session_tag: int = 0
    # identity the engine attributed the turn to; used for isolation audits
    speaker: str | None = None

    def __post_init__(self):
        if not self.query:
            raise ValueError("turn query must be non-empty")
        if self.turn_index < 0:
            raise ValueError("turn_index must be non-negative")

    def to_dict(self) -> dict:
        out = {
            "i": self.turn_index,
            "q": self.query,
            "r": self.response,
            "emb": list(self.embedding) if self.embedding is not None else None,
            "session": self.session_tag,
        }
        if self.speaker is not None:
            out["spk"] = self.speaker
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        emb = d.get("emb")
        return cls(
            turn_index=int(d["i"]),
            query=str(d["q"]),
            response=str(d["r"]),
            embedding=tuple(float(x) for x in emb) if emb is not None else None,
            session_tag=int(d.get("session", 0)),
            speaker=d.get("spk"),
        )


@dataclass(frozen=True)
class SessionSummary:
    user_id: str
    summary_text: str
    covered_range: tuple[int, int]
    created_at_turn: int

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "summary": self.summary_text,
            "range": list(self.covered_range),
            "created_at_turn": self.created_at_turn,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSummary":
        lo, hi = d["range"]
        return cls(str(d["user_id"]), str(d["summary"]), (int(lo), int(hi)), int(d["created_at_turn"]))


class Summarizer(Protocol):
    def __call__(self, window: Sequence[Turn]) -> str: ...


def fallback_summarize(window: Sequence[Turn]) -> str:
    """Deterministic summary: one ``Q: ... | A: ...`` line per turn, capped at 120 tokens.

    Each side keeps its first 12 whitespace tokens; the cap counts every
    whitespace token of the output, markers included.
    """
    if not window:
        raise ValueError("cannot summarise an empty window")
    lines: list[str] = []
    budget = SUMMARY_TOKEN_CAP
    for turn in window:
        q = turn.query.split()[:SUMMARY_TOKENS_PER_FIELD]
        a = turn.response.split()[:SUMMARY_TOKENS_PER_FIELD]
        tokens = ["Q:", *q, "|", "A:", *a]
        if len(tokens) > budget:
            tokens = tokens[:budget]
        if tokens:
            lines.append(" ".join(tokens))
        budget -= len(tokens)
        if budget <= 0:
            break
    return "\n".join(lines)


@dataclass
class UserMemory:
    user_id: str
    window_size: int = DEFAULT_WINDOW
    recent: list[Turn] = field(default_factory=list)
    summaries: list[SessionSummary] = field(default_factory=list)
    full_history: list[Turn] = field(default_factory=list)

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        self._lock = threading.Lock()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UserMemory):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and self.window_size == other.window_size
            and self.recent == other.recent
            and self.summaries == other.summaries
            and self.full_history == other.full_history
        )

    @property
    def next_index(self) -> int:
        return self.full_history[-1].turn_index + 1 if self.full_history else 0

    @property
    def session(self) -> int:
        return len(self.summaries)

    def append(self, turn: Turn, summarizer: Summarizer = fallback_summarize) -> "UserMemory":
        """Store ``turn`` and roll the window over once it is full.

        Raises ``RolloverFailed`` after storing the turn if the summarizer
        errors; the window then stays intact and rollover is retried on the
        next append.
        """
        with self._lock:
            if turn.turn_index != self.next_index:
                raise OutOfOrderTurn(
                    f"{self.user_id}: expected turn {self.next_index}, got {turn.turn_index}"
                )
            self.recent.append(turn)
            self.full_history.append(turn)
            if len(self.recent) >= self.window_size:
                self._rollover(summarizer)
        return self

    def _rollover(self, summarizer: Summarizer) -> None:
        window = list(self.recent)
        try:
            text = summarizer(window)
        except Exception as exc:
            logger.warning("summarizer failed for %s: %s", self.user_id, exc)
            raise RolloverFailed(f"rollover deferred for {self.user_id}: {exc}") from exc
        if not text or not text.strip():
            raise RolloverFailed(f"rollover deferred for {self.user_id}: empty summary")
        self.summaries.append(
            SessionSummary(
                user_id=self.user_id,
                summary_text=text,
                covered_range=(window[0].turn_index, window[-1].turn_index),
                created_at_turn=window[-1].turn_index,
            )
        )
        self.recent.clear()

    def recent_turns(self, n: int | None = None) -> list[Turn]:
        if n is None:
            return list(self.recent)
        if n <= 0:
            return []
        return list(self.recent[-n:])

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "window_size": self.window_size,
            "recent": [t.to_dict() for t in self.recent],
            "summaries": [s.to_dict() for s in self.summaries],
            "history": [t.to_dict() for t in self.full_history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UserMemory":
        return cls(
            user_id=str(d["user_id"]),
            window_size=int(d.get("window_size", DEFAULT_WINDOW)),
            recent=[Turn.from_dict(t) for t in d["recent"]],
            summaries=[SessionSummary.from_dict(s) for s in d["summaries"]],
            full_history=[Turn.from_dict(t) for t in d["history"]],
        )


def append_turn(memory: UserMemory, turn: Turn, summarizer: Summarizer = fallback_summarize) -> UserMemory:
    return memory.append(turn, summarizer)


def recent_turns(memory: UserMemory, n: int | None = None) -> list[Turn]:
    return memory.recent_turns(n)


def persist(memory: UserMemory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(memory.to_dict(), ensure_ascii=False), encoding="utf-8")
    tmp.replace(path)
    return path


def load(path: str | Path) -> UserMemory:
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8", errors="replace")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CorruptStore(f"malformed memory file {path}", offset) from exc
    try:
        return UserMemory.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptStore(f"malformed memory file {path}: {exc!r}", 0) from exc


class MemoryStore:
    """Directory of per-user memory documents, one JSON file per user."""

    def __init__(self, root: str | Path, window_size: int = DEFAULT_WINDOW):
        self.root = Path(root)
        self.window_size = window_size

    def path_for(self, user_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in user_id)
        return self.root / f"{safe}.json"

    def get(self, user_id: str) -> UserMemory:
        path = self.path_for(user_id)
        if path.exists():
            return load(path)
        return UserMemory(user_id, self.window_size)

    def put(self, memory: UserMemory) -> None:
        persist(memory, self.path_for(memory.user_id))

    def user_ids(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(load(p).user_id for p in self.root.glob("*.json"))


class RemoteSummarizer:
    """Summarise a window through any chat backend using a configurable template."""

    DEFAULT_TEMPLATE = (
        "Summarise the following conversation between a user and an assistant in a few "
        "sentences, keeping the user's goals, preferences and any facts about them.\n\n{dialogue}"
    )

    def __init__(self, backend, template: str | None = None, model_name: str = ""):
        self.backend = backend
        self.template = template or self.DEFAULT_TEMPLATE
        self.model_name = model_name

    def __call__(self, window: Sequence[Turn]) -> str:
        from .backends import ChatMessage, ChatRequest

        dialogue = "\n".join(f"User: {t.query}\nAssistant: {t.response}" for t in window)
        request = ChatRequest(
            [ChatMessage("user", self.template.format(dialogue=dialogue))], model_name=self.model_name
        )
        return self.backend.complete(request).strip()
