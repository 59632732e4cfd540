"""Interleaved multi-user evaluation.

Two users alternate questions on one device; each condition is run on the
same sequences with a fresh engine, then scored for persona attribution
(PAA, Persona Margin, Semantic A-Cover) and the usual response-quality
metrics.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import ChatBackend, PersonaInjectingBackend
from .engine import DialogueEngine, EngineConfig
from .errors import AfaError, IngestAborted, InsufficientData
from .fixture import SCENARIOS
from .metrics import (
    AttributionRecord,
    IdfTable,
    a_cover,
    bleu_n,
    distinct_1,
    p_cover,
    paa,
    persona_margin,
    rouge,
    semantic_a_cover,
)
from .persona import onboarding_profile, persona_attribute_texts
from .retrieval import Condition, TextEmbedder
from .speaker_id import SpeakerRegistry, SyntheticSpeaker, synthesize_speakers

logger = logging.getLogger(__name__)

MAX_REJECT_FRACTION = 0.10


# -- ingestion -------------------------------------------------------------------


@dataclass(frozen=True)
class PatRecord:
    persona_text: str
    scenario: str
    history: tuple[tuple[str, str], ...]
    query: str
    completion: str
    persona_id: str

    @classmethod
    def from_json(cls, obj: Mapping) -> "PatRecord":
        if not isinstance(obj, Mapping):
            raise ValueError("record is not a JSON object")
        missing = [k for k in ("persona", "scenario", "history", "prompt", "completion", "persona_id") if k not in obj]
        if missing:
            raise ValueError(f"missing fields: {', '.join(missing)}")
        if obj["scenario"] not in SCENARIOS:
            raise ValueError(f"unknown scenario {obj['scenario']!r}")
        for k in ("persona", "prompt", "completion"):
            if not isinstance(obj[k], str) or not obj[k].strip():
                raise ValueError(f"field {k!r} must be a non-empty string")
        history = []
        for item in obj["history"]:
            if isinstance(item, Mapping):
                q, r = item.get("query"), item.get("response")
            else:
                q, r = item
            history.append((str(q), str(r)))
        return cls(obj["persona"], obj["scenario"], tuple(history), obj["prompt"], obj["completion"], str(obj["persona_id"]))


@dataclass
class IngestResult:
    records: list[PatRecord]
    rejects: list[dict]

    def write_rejects(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rej in self.rejects:
                fh.write(json.dumps(rej, ensure_ascii=False) + "\n")


def ingest_pat(path: str | Path, max_reject_fraction: float = MAX_REJECT_FRACTION) -> IngestResult:
    """Parse a PAT-format JSONL file; malformed lines are reported, never dropped silently."""
    records: list[PatRecord] = []
    rejects: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(PatRecord.from_json(json.loads(line)))
            except (ValueError, TypeError) as exc:
                rejects.append({"line": lineno, "error": str(exc), "raw": line.rstrip("\n")[:500]})
    total = len(records) + len(rejects)
    if total and len(rejects) / total > max_reject_fraction:
        raise IngestAborted(f"{len(rejects)} of {total} lines malformed in {path}")
    return IngestResult(records, rejects)


# -- interleaving ----------------------------------------------------------------


@dataclass(frozen=True)
class SequenceTurn:
    true_speaker: str
    query: str
    ground_truth_response: str


@dataclass(frozen=True)
class InterleavedSequence:
    user_a: str
    user_b: str
    turns: tuple[SequenceTurn, ...]

    def partner_of(self, user: str) -> str:
        return self.user_b if user == self.user_a else self.user_a


def _persona_texts(records: Iterable[PatRecord]) -> dict[str, str]:
    out: dict[str, str] = {}
    for r in records:
        out.setdefault(r.persona_id, r.persona_text)
    return out


def _user_turns(recs: list[PatRecord], n: int, rng: np.random.Generator) -> list[PatRecord]:
    by_scenario: dict[str, list[PatRecord]] = defaultdict(list)
    for r in recs:
        by_scenario[r.scenario].append(r)
    eligible = sorted(s for s, rs in by_scenario.items() if len(rs) >= n)
    if eligible:
        return by_scenario[eligible[int(rng.integers(len(eligible)))]][:n]
    return recs[:n]


def build_interleaved(
    records: Sequence[PatRecord],
    n_pairs: int = 15,
    turns_per_user: int = 10,
    seed: int = 0,
    min_persona_distance: float | None = None,
    embedder: TextEmbedder | None = None,
) -> list[InterleavedSequence]:
    """Pair distinct personas (without replacement) and alternate their turns A, B, A, B, ...

    Each user contributes ``turns_per_user`` consecutive questions from one
    scenario, in dataset order. With ``min_persona_distance`` set, a pair is
    only formed when the cosine distance between the two persona texts is at
    least that value.
    """
    by_persona: dict[str, list[PatRecord]] = defaultdict(list)
    for r in records:
        by_persona[r.persona_id].append(r)
    eligible = sorted(p for p, rs in by_persona.items() if len(rs) >= turns_per_user)
    if len(eligible) < 2 * n_pairs:
        raise InsufficientData(
            f"need {2 * n_pairs} personas with >= {turns_per_user} turns, found {len(eligible)}"
        )
    rng = np.random.default_rng(seed)
    order = [eligible[i] for i in rng.permutation(len(eligible))]
    pairs = _draw_pairs(order, n_pairs, by_persona, min_persona_distance, embedder)

    sequences = []
    for a, b in pairs:
        ta = _user_turns(by_persona[a], turns_per_user, rng)
        tb = _user_turns(by_persona[b], turns_per_user, rng)
        turns = []
        for ra, rb in zip(ta, tb):
            turns.append(SequenceTurn(a, ra.query, ra.completion))
            turns.append(SequenceTurn(b, rb.query, rb.completion))
        sequences.append(InterleavedSequence(a, b, tuple(turns)))
    return sequences


def _draw_pairs(order, n_pairs, by_persona, min_distance, embedder) -> list[tuple[str, str]]:
    if min_distance is None:
        return [(order[2 * i], order[2 * i + 1]) for i in range(n_pairs)]
    if embedder is None:
        raise ValueError("min_persona_distance needs an embedder")
    vecs = {p: embedder.embed(by_persona[p][0].persona_text) for p in order}
    pool = list(order)
    pairs = []
    while pool and len(pairs) < n_pairs:
        a = pool.pop(0)
        for j, b in enumerate(pool):
            if 1.0 - float(np.dot(vecs[a], vecs[b])) >= min_distance:
                pairs.append((a, pool.pop(j)))
                break
    if len(pairs) < n_pairs:
        raise InsufficientData(f"only {len(pairs)} pairs satisfy min_persona_distance={min_distance}")
    return pairs


# -- running -------------------------------------------------------------------


@dataclass
class TranscriptTurn:
    sequence: int
    position: int
    true_speaker: str
    partner: str
    resolved_user: str
    query: str
    ground_truth: str
    response: str
    prompt_sha: str
    has_persona: bool
    persona_owner: str | None
    turn_speakers: tuple[str | None, ...]
    prompt_text: str = field(repr=False, default="")
    error: str | None = None


@dataclass
class VoiceSetup:
    """Synthetic voices for routing through speaker identification instead of the ground-truth bypass."""

    enroll_n: int = 5
    noise_scale: float = 0.05
    dim: int = 192
    seed: int = 0


def run_condition(
    sequences: Sequence[InterleavedSequence],
    condition: Condition | str,
    engine_config: EngineConfig,
    backend: ChatBackend,
    embedder: TextEmbedder,
    personas: Mapping[str, str] | None = None,
    voice: VoiceSetup | None = None,
) -> list[TranscriptTurn]:
    """Run every sequence under one condition; each sequence gets a fresh engine."""
    condition = Condition(condition)
    cfg = EngineConfig.from_dict({**engine_config.to_dict(), "condition": condition, "routing_enabled": None})
    personas = personas or {}
    out: list[TranscriptTurn] = []
    for si, seq in enumerate(sequences):
        registry, voices, rng = SpeakerRegistry(), {}, None
        if voice is not None and cfg.routing_enabled:
            rng = np.random.default_rng([voice.seed, si])
            speakers = synthesize_speakers(2, voice.dim, rng)
            voices = {seq.user_a: speakers[0], seq.user_b: speakers[1]}
            for uid, spk in voices.items():
                registry.enroll(uid, spk.sample(voice.enroll_n, voice.noise_scale, rng))
        engine = DialogueEngine(cfg, backend, embedder, registry=registry)
        for uid in (seq.user_a, seq.user_b):
            if uid in personas:
                engine.onboard(onboarding_profile(uid, personas[uid]))
        for pos, turn in enumerate(seq.turns):
            out.append(_run_turn(engine, si, pos, seq, turn, voices, voice, rng))
    return out


def _run_turn(engine, si, pos, seq, turn, voices: Mapping[str, SyntheticSpeaker], voice, rng) -> TranscriptTurn:
    kwargs = {}
    if voices:
        kwargs["voice_emb"] = voices[turn.true_speaker].sample(1, voice.noise_scale, rng)[0]
    else:
        kwargs["user_id"] = turn.true_speaker
    kwargs["speaker_tag"] = turn.true_speaker
    base = dict(
        sequence=si,
        position=pos,
        true_speaker=turn.true_speaker,
        partner=seq.partner_of(turn.true_speaker),
        query=turn.query,
        ground_truth=turn.ground_truth_response,
    )
    try:
        res = engine.handle_turn(turn.query, **kwargs)
    except AfaError as exc:
        logger.warning("turn %d/%d failed: %s", si, pos, exc)
        return TranscriptTurn(
            **base, resolved_user="", response="", prompt_sha="", has_persona=False,
            persona_owner=None, turn_speakers=(), error=f"{type(exc).__name__}: {exc}",
        )
    text = res.prompt.text
    return TranscriptTurn(
        **base,
        resolved_user=res.resolved_user,
        response=res.response,
        prompt_sha=hashlib.sha256(text.encode("utf-8")).hexdigest(),
        has_persona=res.prompt.condition is not Condition.NO_PERSONA,
        persona_owner=res.prompt.persona_owner,
        turn_speakers=res.prompt.turn_speakers,
        prompt_text=text,
    )


def audit_isolation(
    transcripts: Sequence[TranscriptTurn], personas: Mapping[str, str] | None = None
) -> list[str]:
    """Return one message per prompt that carries content belonging to the non-speaking user.

    Routed prompts must hold only turns tagged with the speaker and only the
    speaker's persona. Unrouted prompts may mix history (that is the baseline
    being measured) but must carry no persona at all.
    """
    personas = personas or {}
    violations = []
    for t in transcripts:
        where = f"seq {t.sequence} pos {t.position} ({t.true_speaker})"
        if t.error:
            continue
        if not t.has_persona:
            if t.persona_owner is not None:
                violations.append(f"{where}: persona in an unrouted prompt")
            for text in personas.values():
                if text and text in t.prompt_text:
                    violations.append(f"{where}: persona text in an unrouted prompt")
            continue
        if t.persona_owner not in (None, t.true_speaker):
            violations.append(f"{where}: persona of {t.persona_owner}")
        wrong = [s for s in t.turn_speakers if s != t.true_speaker]
        if wrong:
            violations.append(f"{where}: turns from {sorted(set(map(str, wrong)))}")
        partner_text = personas.get(t.partner)
        if partner_text and partner_text in t.prompt_text:
            violations.append(f"{where}: partner persona text present")
    return violations


# -- scoring -----------------------------------------------------------------------

REPORT_FIELDS = (
    "paa", "margin", "semantic_a_cover",
    "bleu_1", "bleu_2", "bleu_3", "bleu_4",
    "rouge_1", "rouge_2", "rouge_l",
    "distinct_1", "p_cover", "a_cover",
)


@dataclass
class ConditionScores:
    paa: float
    margin: float
    semantic_a_cover: float
    bleu: list[float]
    rouge: list[float]
    distinct_1: float
    p_cover: float
    a_cover: float
    n_turns: int = 0
    n_failed: int = 0

    def flat(self) -> dict[str, float]:
        return {
            "paa": self.paa,
            "margin": self.margin,
            "semantic_a_cover": self.semantic_a_cover,
            "bleu_1": self.bleu[0], "bleu_2": self.bleu[1], "bleu_3": self.bleu[2], "bleu_4": self.bleu[3],
            "rouge_1": self.rouge[0], "rouge_2": self.rouge[1], "rouge_l": self.rouge[2],
            "distinct_1": self.distinct_1,
            "p_cover": self.p_cover,
            "a_cover": self.a_cover,
        }

    @classmethod
    def from_flat(cls, d: Mapping, n_turns: int = 0, n_failed: int = 0) -> "ConditionScores":
        return cls(
            paa=d["paa"], margin=d["margin"], semantic_a_cover=d["semantic_a_cover"],
            bleu=[d["bleu_1"], d["bleu_2"], d["bleu_3"], d["bleu_4"]],
            rouge=[d["rouge_1"], d["rouge_2"], d["rouge_l"]],
            distinct_1=d["distinct_1"], p_cover=d["p_cover"], a_cover=d["a_cover"],
            n_turns=n_turns, n_failed=n_failed,
        )


def attribution_records(
    transcripts: Sequence[TranscriptTurn], personas: Mapping[str, str], embedder: TextEmbedder
) -> list[AttributionRecord]:
    return [
        AttributionRecord.compute(t.response, t.ground_truth, personas[t.true_speaker], personas[t.partner], embedder)
        for t in transcripts
    ]


def score_condition(
    transcripts: Sequence[TranscriptTurn],
    personas: Mapping[str, str],
    embedder: TextEmbedder,
    idf: IdfTable,
) -> ConditionScores:
    if not transcripts:
        raise InsufficientData("no transcript turns to score")
    for t in transcripts:
        if t.true_speaker not in personas or t.partner not in personas:
            raise InsufficientData(f"missing persona for {t.true_speaker} or {t.partner}")
    records = attribution_records(transcripts, personas, embedder)
    attrs = {p: persona_attribute_texts(text) for p, text in personas.items()}
    n = len(transcripts)
    bleu = [sum(bleu_n(t.response, t.ground_truth, k) for t in transcripts) / n for k in (1, 2, 3, 4)]
    rg = [sum(rouge(t.response, t.ground_truth, v) for t in transcripts) / n for v in (1, 2, "L")]
    s_acov = float(np.mean([semantic_a_cover(t.response, attrs[t.true_speaker], embedder) for t in transcripts]))
    acov = float(np.mean([a_cover(t.response, attrs[t.true_speaker], idf) for t in transcripts]))
    grouped: dict[tuple[int, str], list[str]] = defaultdict(list)
    for t in transcripts:
        grouped[(t.sequence, t.true_speaker)].append(t.response)
    pcov = float(np.mean([p_cover(rs, personas[u], idf) for (_, u), rs in sorted(grouped.items())]))
    return ConditionScores(
        paa=paa(records),
        margin=persona_margin(records),
        semantic_a_cover=s_acov,
        bleu=bleu,
        rouge=rg,
        distinct_1=distinct_1(t.response for t in transcripts),
        p_cover=pcov,
        a_cover=acov,
        n_turns=n,
        n_failed=sum(t.error is not None for t in transcripts),
    )


@dataclass
class EvalReport:
    conditions: dict[str, ConditionScores]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "conditions": {
                name: {**{k: round(v, 6) for k, v in s.flat().items()}, "n_turns": s.n_turns, "n_failed": s.n_failed}
                for name, s in self.conditions.items()
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        order = list(CONDITION_LABELS)
        names = sorted(d["conditions"], key=lambda n: (order.index(n) if n in order else len(order), n))
        conds = {}
        for name in names:
            v = d["conditions"][name]
            conds[name] = ConditionScores.from_flat(v, int(v.get("n_turns", 0)), int(v.get("n_failed", 0)))
        return cls(conds, dict(d.get("metadata", {})))


def condition_key(condition: Condition, cold_start: bool = False) -> str:
    key = condition.value.replace("-", "_")
    return f"{key}_cold_start" if cold_start else key


def evaluate(
    transcripts: Mapping[str, Sequence[TranscriptTurn]],
    personas: Mapping[str, str],
    embedder: TextEmbedder,
    idf: IdfTable,
    metadata: Mapping | None = None,
) -> EvalReport:
    """Score each condition's transcripts; ``transcripts`` maps a condition key to its turns."""
    scores = {name: score_condition(ts, personas, embedder, idf) for name, ts in transcripts.items()}
    return EvalReport(scores, dict(metadata or {}))


def config_digest(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ProtocolResult:
    report: EvalReport
    transcripts: dict[str, list[TranscriptTurn]]
    sequences: list[InterleavedSequence]
    personas: dict[str, str]
    violations: list[str]


def run_protocol(
    records: Sequence[PatRecord],
    embedder: TextEmbedder,
    n_pairs: int = 15,
    turns_per_user: int = 10,
    seed: int = 0,
    conditions: Sequence[Condition | str] = tuple(Condition),
    cold_start: bool = False,
    engine_config: EngineConfig | None = None,
    backend: ChatBackend | None = None,
    voice: VoiceSetup | None = None,
    extra_metadata: Mapping | None = None,
) -> ProtocolResult:
    """Build sequences, run every requested condition and score them.

    Without an explicit ``backend`` the persona-injecting generator is used,
    keyed on the sequences' ground truth. ``cold_start`` adds an adaptive run
    with empty onboarding profiles.
    """
    engine_config = engine_config or EngineConfig()
    sequences = build_interleaved(records, n_pairs, turns_per_user, seed)
    personas = _persona_texts(records)
    used = {u for s in sequences for u in (s.user_a, s.user_b)}
    personas = {p: t for p, t in personas.items() if p in used}
    gt_docs = [t.ground_truth_response for s in sequences for t in s.turns]
    idf = IdfTable.from_documents(gt_docs)
    if backend is None:
        truth = {}
        for s in sequences:
            for t in s.turns:
                if truth.setdefault(t.query, t.ground_truth_response) != t.ground_truth_response:
                    logger.warning("query %r has conflicting ground truths; keeping the first", t.query[:60])
        backend = PersonaInjectingBackend(truth, IdfTable.from_documents(gt_docs + sorted(personas.values())))

    runs: list[tuple[str, Condition, bool]] = [(condition_key(Condition(c)), Condition(c), False) for c in conditions]
    if cold_start:
        runs.append((condition_key(Condition.ADAPTIVE, True), Condition.ADAPTIVE, True))

    transcripts: dict[str, list[TranscriptTurn]] = {}
    for key, cond, cold in runs:
        cfg = EngineConfig.from_dict({**engine_config.to_dict(), "cold_start": cold})
        transcripts[key] = run_condition(sequences, cond, cfg, backend, embedder, personas, voice)

    violations = []
    for ts in transcripts.values():
        violations += audit_isolation(ts, personas)

    cfg_blob = {
        "engine": engine_config.to_dict(),
        "n_pairs": n_pairs,
        "turns_per_user": turns_per_user,
        "conditions": [k for k, _, _ in runs],
        "backend": type(backend).__name__,
        "embedder": {"kind": type(embedder).__name__, "dim": getattr(embedder, "dim", None)},
        "voice": asdict(voice) if voice else None,
    }
    n_turns = sum(len(s.turns) for s in sequences)
    metadata = {
        "n_turns": n_turns,
        "n_pairs": len(sequences),
        "turns_per_user": turns_per_user,
        "seed": seed,
        "config_digest": config_digest(cfg_blob),
        "failed_turns": {k: sum(t.error is not None for t in ts) for k, ts in transcripts.items()},
        "isolation_violations": len(violations),
        **(extra_metadata or {}),
    }
    report = evaluate(transcripts, personas, embedder, idf, metadata)
    return ProtocolResult(report, transcripts, sequences, personas, violations)


# -- rendering ---------------------------------------------------------------------

CONDITION_LABELS = {
    "no_persona": "No persona",
    "constant": "Constant",
    "adaptive": "Adaptive",
    "adaptive_cold_start": "Adaptive (cold start)",
}

# leading six columns follow the usual interleaved-results table layout
TEXT_COLUMNS = (
    ("PAA", "paa"), ("Margin", "margin"), ("S-ACov", "semantic_a_cover"),
    ("BL-1", "bleu_1"), ("RG-1", "rouge_1"),
    ("BL-2", "bleu_2"), ("BL-3", "bleu_3"), ("BL-4", "bleu_4"),
    ("RG-2", "rouge_2"), ("RG-L", "rouge_l"),
    ("Dist-1", "distinct_1"), ("P-Cov", "p_cover"), ("A-Cov", "a_cover"),
)


def render_report(report: EvalReport, fmt: str = "text") -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["condition", *(k for _, k in TEXT_COLUMNS), "n_turns", "n_failed"])
        for name, s in report.conditions.items():
            flat = s.flat()
            writer.writerow([name, *(f"{flat[k]:.6f}" for _, k in TEXT_COLUMNS), s.n_turns, s.n_failed])
        return buf.getvalue().encode("utf-8")
    if fmt == "text":
        return _render_text(report).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def _render_text(report: EvalReport) -> str:
    meta = report.metadata
    lines = [
        "# " + " ".join(f"{k}={json.dumps(meta[k], sort_keys=True, separators=(',', ':'))}" for k in sorted(meta)),
    ]
    header = ["Setting".ljust(24), *(h.rjust(10) for h, _ in TEXT_COLUMNS), "Turns".rjust(6), "Failed".rjust(7)]
    lines.append(" ".join(header))
    for name, s in report.conditions.items():
        flat = s.flat()
        row = [
            f"{CONDITION_LABELS.get(name, name)}|{name}".ljust(24)
            if name not in CONDITION_LABELS
            else CONDITION_LABELS[name].ljust(24),
            *(f"{flat[k]:+.6f}" if k == "margin" else f"{flat[k]:.6f}" for _, k in TEXT_COLUMNS),
        ]
        row = [row[0], *(c.rjust(10) for c in row[1:]), str(s.n_turns).rjust(6), str(s.n_failed).rjust(7)]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def parse_report_text(text: str) -> EvalReport:
    """Inverse of the text rendering (values carry six decimals)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    meta: dict = {}
    if lines and lines[0].startswith("# "):
        for part in lines[0][2:].split(" "):
            k, _, v = part.partition("=")
            meta[k] = json.loads(v)
        lines = lines[1:]
    label_to_key = {v: k for k, v in CONDITION_LABELS.items()}
    conds: dict[str, ConditionScores] = {}
    for line in lines[1:]:
        label = line[:24].strip()
        key = label.split("|", 1)[1] if "|" in label else label_to_key[label]
        cells = line[24:].split()
        values = {k: float(c) for (_, k), c in zip(TEXT_COLUMNS, cells)}
        conds[key] = ConditionScores.from_flat(values, int(cells[-2]), int(cells[-1]))
    return EvalReport(conds, meta)
