"""One conversational turn, end to end.

identify speaker -> load memory and persona -> embed query -> retrieve ->
assemble prompt -> generate -> store turn -> (adaptive) synchronise persona.
"""

from __future__ import annotations

import logging
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .backends import ChatBackend, ChatRequest
from .errors import AfaError, RolloverFailed
from .persona import Extractor, PersonaProfile, extract_attributes, merge, rule_based_extract
from .profile_store import DEFAULT_WINDOW, Summarizer, Turn, UserMemory, fallback_summarize
from .retrieval import (
    DEFAULT_K,
    DEFAULT_TOKEN_BUDGET,
    AssembledPrompt,
    Condition,
    TextEmbedder,
    assemble_prompt,
    top_k,
)
from .speaker_id import DEFAULT_THRESHOLD, IdentityResolution, SpeakerRegistry

logger = logging.getLogger(__name__)

SHARED_USER = "shared"


@dataclass
class EngineConfig:
    condition: Condition = Condition.ADAPTIVE
    speaker_threshold: float = DEFAULT_THRESHOLD
    retrieval_k: int = DEFAULT_K
    window_size: int = DEFAULT_WINDOW
    routing_enabled: bool | None = None
    token_budget: int = DEFAULT_TOKEN_BUDGET
    # adaptive persona without any onboarding profile
    cold_start: bool = False
    model_name: str = ""
    temperature: float = 0.0

    def __post_init__(self):
        self.condition = Condition(self.condition)
        if self.routing_enabled is None:
            self.routing_enabled = self.condition is not Condition.NO_PERSONA
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["condition"] = self.condition.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EngineConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TurnResult:
    response: str
    resolved_user: str
    prompt: AssembledPrompt
    identity: IdentityResolution | None = None
    warnings: list[str] = field(default_factory=list)


class DialogueEngine:
    def __init__(
        self,
        config: EngineConfig,
        backend: ChatBackend,
        embedder: TextEmbedder,
        registry: SpeakerRegistry | None = None,
        summarizer: Summarizer = fallback_summarize,
        extractor: Extractor = rule_based_extract,
    ):
        self.config = config
        self.backend = backend
        self.embedder = embedder
        self.registry = registry if registry is not None else SpeakerRegistry()
        self.summarizer = summarizer
        self.extractor = extractor
        self.memories: dict[str, UserMemory] = {}
        self.profiles: dict[str, PersonaProfile] = {}
        self._summary_vecs: dict[str, np.ndarray] = {}
        self._user_locks: defaultdict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    # -- state --------------------------------------------------------------
    def onboard(self, profile: PersonaProfile) -> None:
        if self.config.cold_start:
            return
        self.profiles[profile.user_id] = profile.copy()

    def memory_for(self, user_id: str) -> UserMemory:
        mem = self.memories.get(user_id)
        if mem is None:
            mem = self.memories[user_id] = UserMemory(user_id, self.config.window_size)
        return mem

    def profile_for(self, user_id: str) -> PersonaProfile:
        prof = self.profiles.get(user_id)
        if prof is None:
            prof = self.profiles[user_id] = PersonaProfile(user_id)
        return prof

    def _lock_for(self, user_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._user_locks[user_id]

    # -- turn ---------------------------------------------------------------
    def resolve(self, voice_emb=None, user_id: str | None = None) -> tuple[str, IdentityResolution | None]:
        if not self.config.routing_enabled:
            return SHARED_USER, None
        if user_id is not None:
            return user_id, None
        if voice_emb is None:
            raise ValueError("routing is enabled but neither a voice embedding nor a user id was given")
        res = self.registry.identify(voice_emb, self.config.speaker_threshold)
        return res.user_id, res

    def _retrieval_pool(self, memory: UserMemory) -> dict[str, Turn]:
        recent_idx = {t.turn_index for t in memory.recent}
        pool: dict[str, Turn] = {}
        for t in memory.full_history:
            if t.turn_index not in recent_idx and t.embedding is not None:
                pool[f"t{t.turn_index:08d}"] = t
        for n, s in enumerate(memory.summaries):
            lo, hi = s.covered_range
            pool[f"s{n:08d}"] = Turn(
                turn_index=lo,
                query=f"Session summary (turns {lo}-{hi})",
                response=s.summary_text,
                session_tag=n,
                speaker=s.user_id if memory.user_id != SHARED_USER else None,
            )
        return pool

    def _vector_for(self, key: str, turn: Turn) -> np.ndarray:
        if turn.embedding is not None:
            return np.asarray(turn.embedding)
        cache_key = f"{key}:{turn.response}"
        vec = self._summary_vecs.get(cache_key)
        if vec is None:
            vec = self._summary_vecs[cache_key] = self.embedder.embed(turn.response)
        return vec

    def handle_turn(
        self,
        query: str,
        voice_emb=None,
        user_id: str | None = None,
        speaker_tag: str | None = None,
    ) -> TurnResult:
        """Run one turn.

        ``user_id`` bypasses speaker identification (ground-truth routing);
        ``speaker_tag`` labels the stored turn for audits when the memory is
        shared and defaults to the resolved user.
        """
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        cfg = self.config
        resolved, identity = self.resolve(voice_emb, user_id)
        tag = speaker_tag if speaker_tag is not None else (user_id if not cfg.routing_enabled else resolved)
        warnings: list[str] = []

        with self._lock_for(resolved):
            memory = self.memory_for(resolved)
            profile = None if cfg.condition is Condition.NO_PERSONA else self.profile_for(resolved)

            q_vec = self.embedder.embed(query)
            pool = self._retrieval_pool(memory)
            ranked = top_k(q_vec, [(k, self._vector_for(k, t)) for k, t in pool.items()], cfg.retrieval_k)
            prompt = assemble_prompt(
                profile,
                [pool[k] for k in ranked],
                memory.recent_turns(),
                query,
                cfg.condition,
                cfg.token_budget,
            )
            request = ChatRequest.from_prompt(prompt, cfg.model_name, cfg.temperature)
            response = self.backend.complete(request)

            turn = Turn(
                turn_index=memory.next_index,
                query=query,
                response=response,
                embedding=tuple(float(x) for x in q_vec),
                session_tag=memory.session,
                speaker=tag,
            )
            try:
                memory.append(turn, self.summarizer)
            except RolloverFailed as exc:
                warnings.append(str(exc))

            if cfg.condition is Condition.ADAPTIVE:
                try:
                    attrs = extract_attributes(query, self.extractor)
                except AfaError as exc:
                    logger.warning("persona extraction failed for %s: %s", resolved, exc)
                    warnings.append(str(exc))
                    attrs = []
                if attrs:
                    self.profiles[resolved] = merge(profile, attrs, turn.turn_index)

        return TurnResult(response, resolved, prompt, identity, warnings)
