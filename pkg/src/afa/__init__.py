"""Identity-aware personalization for assistants shared by several users.

Speaker identification routes each turn to the right user's memory and
persona before retrieval and generation; the evaluation harness measures
how well responses are attributed to the correct user.
"""

from __future__ import annotations

from .backends import ChatRequest, EchoBackend, HttpBackend, PersonaInjectingBackend, ScriptedBackend
from .engine import DialogueEngine, EngineConfig, TurnResult
from .harness import EvalReport, build_interleaved, evaluate, ingest_pat, render_report, run_condition, run_protocol
from .metrics import IdfTable, a_cover, bleu_n, distinct_1, idf_o, p_cover, paa, persona_lift, persona_margin, rouge
from .persona import Category, PersonaAttribute, PersonaProfile, merge, render_persona
from .profile_store import SessionSummary, Turn, UserMemory
from .retrieval import Condition, HashingEmbedder, assemble_prompt, top_k
from .speaker_id import SpeakerRegistry

__version__ = "0.1.0"

__all__ = [
    "ChatRequest", "EchoBackend", "HttpBackend", "PersonaInjectingBackend", "ScriptedBackend",
    "DialogueEngine", "EngineConfig", "TurnResult",
    "EvalReport", "build_interleaved", "evaluate", "ingest_pat", "render_report", "run_condition", "run_protocol",
    "IdfTable", "a_cover", "bleu_n", "distinct_1", "idf_o", "p_cover", "paa", "persona_lift", "persona_margin", "rouge",
    "Category", "PersonaAttribute", "PersonaProfile", "merge", "render_persona",
    "SessionSummary", "Turn", "UserMemory",
    "Condition", "HashingEmbedder", "assemble_prompt", "top_k",
    "SpeakerRegistry",
]
