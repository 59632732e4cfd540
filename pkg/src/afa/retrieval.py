"""Text embedding, exact top-k retrieval and contextual prompt assembly."""

from __future__ import annotations

import enum
import functools
import logging
from dataclasses import dataclass
from typing import Hashable, Protocol, Sequence

import httpx
import numpy as np

from .errors import DegenerateVector, DimMismatch, EmbedUnavailable
from .persona import PersonaProfile, render_persona
from .profile_store import Turn
from .speaker_id import as_vector
from .text import tokenize

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
DEFAULT_K = 3
DEFAULT_TOKEN_BUDGET = 3000

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@functools.lru_cache(maxsize=1 << 16)
def _token_hash(token: str) -> int:
    return fnv1a_64(token.encode("utf-8"))


class Condition(str, enum.Enum):
    NO_PERSONA = "no-persona"
    CONSTANT = "constant"
    ADAPTIVE = "adaptive"


class TextEmbedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature-hashing bag of words, L2-normalised.

    Each token is hashed with 64-bit FNV-1a; the low bits pick one of ``dim``
    buckets and the top bit picks the sign.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def _slot(self, token: str) -> tuple[int, float]:
        h = _token_hash(token)
        return h % self.dim, -1.0 if h >> 63 else 1.0

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise DegenerateVector(f"no tokens to embed in {text!r}")
        vec = np.zeros(self.dim)
        for tok in tokens:
            idx, sign = self._slot(tok)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # every token cancelled out through hash collisions
            raise DegenerateVector(f"embedding of {text!r} cancelled to zero")
        return vec / norm


class RemoteEmbedder:
    """Client for an embeddings endpoint: ``{"model", "input": [...]}`` -> ``{"data": [{"embedding"}]}``."""

    def __init__(
        self,
        url: str,
        model: str,
        dim: int | None = None,
        api_key: str | None = None,
        timeout: float = 30.0,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.model = model
        self.dim = dim
        self._api_key = api_key
        self._client = client or httpx.Client(timeout=timeout)

    def __repr__(self) -> str:
        return f"RemoteEmbedder(url={self.url!r}, model={self.model!r}, dim={self.dim})"

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": list(texts)}, headers=headers)
            resp.raise_for_status()
            rows = [item["embedding"] for item in resp.json()["data"]]
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise EmbedUnavailable(f"embedding request to {self.url} failed: {type(exc).__name__}") from exc
        if len(rows) != len(texts):
            raise EmbedUnavailable(f"expected {len(texts)} embeddings, got {len(rows)}")
        out = []
        for row in rows:
            vec = as_vector(row)
            if self.dim is None:
                self.dim = vec.size
            elif vec.size != self.dim:
                raise DimMismatch(f"provider returned dim {vec.size}, expected {self.dim}")
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise EmbedUnavailable("provider returned an all-zero embedding")
            out.append(vec / norm)
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def embed_text(text: str, embedder: TextEmbedder) -> np.ndarray:
    if not text or not text.strip():
        raise ValueError("text must be non-empty")
    return embedder.embed(text)


class CachedEmbedder:
    """Memoise another embedder by exact text."""

    def __init__(self, inner: TextEmbedder):
        self.inner = inner
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.inner.dim

    def embed(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = self.inner.embed(text)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec


def top_k(query_emb, candidates: Sequence[tuple[Hashable, object]], k: int = DEFAULT_K) -> list:
    """Ids of the ``k`` most cosine-similar candidates, best first, ties to the smaller id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        return []
    q = as_vector(query_emb)
    ids = [c[0] for c in candidates]
    try:
        mat = np.vstack([as_vector(c[1]) for c in candidates])
    except ValueError as exc:
        raise DimMismatch("candidate embeddings have mixed dimensions") from exc
    if mat.shape[1] != q.size:
        raise DimMismatch(f"query dim {q.size} vs candidate dim {mat.shape[1]}")
    norms = np.linalg.norm(mat, axis=1) * np.linalg.norm(q)
    if np.any(norms == 0.0):
        raise DegenerateVector("zero-norm vector in top_k")
    sims = (mat @ q) / norms
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [ids[i] for i in order[:k]]


# -- prompt assembly -------------------------------------------------------

BASE_INSTRUCTION = (
    "You are a personal assistant on a device shared by several people. "
    "Answer the current user's question helpfully and concisely."
)
PERSONA_INSTRUCTION = "Tailor the answer to the person described below."
PERSONA_OPEN = "[USER PERSONA]"
PERSONA_CLOSE = "[END USER PERSONA]"
RETRIEVED_LABEL = "Relevant past exchange"
RECENT_LABEL = "Recent conversation"


@dataclass(frozen=True)
class AssembledPrompt:
    system_block: str
    context_block: str
    user_block: str
    condition: Condition
    persona_owner: str | None = None
    turn_speakers: tuple[str | None, ...] = ()
    dropped_turns: int = 0

    @property
    def text(self) -> str:
        return "\n\n".join(b for b in (self.system_block, self.context_block, self.user_block) if b)

    def messages(self) -> list[dict[str, str]]:
        system = self.system_block if not self.context_block else f"{self.system_block}\n\n{self.context_block}"
        return [{"role": "system", "content": system}, {"role": "user", "content": self.user_block}]


def _one_line(s: str) -> str:
    return " ".join(s.split())


def _render_turn(label: str, turn: Turn) -> str:
    return f"{label} (turn {turn.turn_index}):\nUser: {_one_line(turn.query)}\nAssistant: {_one_line(turn.response)}"


def _n_tokens(s: str) -> int:
    return len(s.split())


def assemble_prompt(
    profile: PersonaProfile | None,
    retrieved: Sequence[Turn],
    recent: Sequence[Turn],
    query: str,
    condition: Condition | str,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
) -> AssembledPrompt:
    """Build the prompt for one turn.

    ``retrieved`` is in rank order (best first); both lists are rendered
    chronologically, retrieved first. If the context exceeds ``token_budget``
    whitespace tokens, the oldest recent turns go first, then the
    lowest-ranked retrieved turns.
    """
    condition = Condition(condition)
    if condition is Condition.NO_PERSONA and profile is not None:
        raise ValueError("the no-persona condition takes no profile")

    system_lines = [BASE_INSTRUCTION]
    persona_owner = None
    if condition is not Condition.NO_PERSONA:
        persona_owner = profile.user_id if profile is not None else None
        system_lines += ["", PERSONA_INSTRUCTION, PERSONA_OPEN, render_persona(profile), PERSONA_CLOSE]
    system_block = "\n".join(system_lines)

    kept_retrieved = [(t, _n_tokens(_render_turn(RETRIEVED_LABEL, t))) for t in retrieved]
    kept_recent = [(t, _n_tokens(_render_turn(RECENT_LABEL, t))) for t in recent]
    total = sum(c for _, c in kept_retrieved) + sum(c for _, c in kept_recent)
    dropped = 0
    while total > token_budget and kept_recent:
        total -= kept_recent.pop(0)[1]
        dropped += 1
    while total > token_budget and kept_retrieved:
        total -= kept_retrieved.pop()[1]
        dropped += 1

    chrono = sorted((t for t, _ in kept_retrieved), key=lambda t: t.turn_index)
    recent_kept = [t for t, _ in kept_recent]
    sections = [_render_turn(RETRIEVED_LABEL, t) for t in chrono]
    sections += [_render_turn(RECENT_LABEL, t) for t in recent_kept]
    return AssembledPrompt(
        system_block=system_block,
        context_block="\n\n".join(sections),
        user_block=query,
        condition=condition,
        persona_owner=persona_owner,
        turn_speakers=tuple(t.speaker for t in chrono + recent_kept),
        dropped_turns=dropped,
    )


def extract_persona_block(prompt_text: str) -> str | None:
    """Return the persona section of a prompt, or None when the prompt carries none."""
    start = prompt_text.find(PERSONA_OPEN)
    if start < 0:
        return None
    end = prompt_text.find(PERSONA_CLOSE, start)
    if end < 0:
        return None
    return prompt_text[start + len(PERSONA_OPEN) : end].strip()


def parse_context_exchanges(prompt_text: str) -> list[tuple[str, str, str]]:
    """(label, user, assistant) triples in prompt order."""
    out = []
    for chunk in prompt_text.split("\n\n"):
        lines = chunk.split("\n")
        if len(lines) != 3 or not lines[0].startswith((RETRIEVED_LABEL, RECENT_LABEL)):
            continue
        if not (lines[1].startswith("User: ") and lines[2].startswith("Assistant: ")):
            continue
        label = RECENT_LABEL if lines[0].startswith(RECENT_LABEL) else RETRIEVED_LABEL
        out.append((label, lines[1][len("User: ") :], lines[2][len("Assistant: ") :]))
    return out
