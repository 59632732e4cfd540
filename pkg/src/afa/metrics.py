"""Evaluation metrics.

Lexical overlap (BLEU, ROUGE), diversity (Distinct-1), IDF-weighted persona
coverage (IDF-O, A-Cover, P-Cover) and embedding-based persona attribution
(persona lift, PAA, Persona Margin, Semantic A-Cover). Every function here is
pure.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import UndefinedCoverage, UndefinedMetric
from .text import tokenize

__all__ = [
    "IdfTable",
    "AttributionRecord",
    "tokenize",
    "bleu_n",
    "rouge",
    "distinct_1",
    "idf_o",
    "a_cover",
    "p_cover",
    "semantic_a_cover",
    "mean_semantic_a_cover",
    "persona_lift",
    "paa",
    "persona_margin",
]


@dataclass(frozen=True)
class IdfTable:
    """Smoothed inverse document frequency: ``ln((N + 1) / (df + 1)) + 1``."""

    doc_count: int = 0
    doc_freq: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def from_documents(cls, documents: Iterable[str]) -> "IdfTable":
        df: Counter[str] = Counter()
        n = 0
        for doc in documents:
            n += 1
            df.update(set(tokenize(doc)))
        return cls(n, dict(df))

    def weight(self, token: str) -> float:
        return math.log((self.doc_count + 1) / (self.doc_freq.get(token, 0) + 1)) + 1.0


# -- n-gram helpers ----------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter[tuple[str, ...]]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_overlap(cand: Counter, ref: Counter) -> int:
    return sum(min(c, ref[g]) for g, c in cand.items())


def bleu_n(candidate: str, reference: str, n: int = 4) -> float:
    """Cumulative sentence BLEU-n with uniform weights.

    i-gram precisions for i >= 2 get add-one smoothing; unigram precision is
    left exact. Brevity penalty is ``exp(min(0, 1 - |ref| / |cand|))``.
    """
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        c_grams = _ngrams(cand, i)
        matches = _clipped_overlap(c_grams, _ngrams(ref, i))
        total = sum(c_grams.values())
        if i >= 2:
            matches += 1
            total += 1
        if matches == 0:
            return 0.0
        log_sum += math.log(matches / total)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    return bp * math.exp(log_sum / n)


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(candidate: str, reference: str, variant: int | str = 1) -> float:
    """ROUGE-1, ROUGE-2 or ROUGE-L F1."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    variant = str(variant).upper()
    if variant == "L":
        return _f1(_lcs_len(cand, ref), len(cand), len(ref))
    if variant not in ("1", "2"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    n = int(variant)
    c_grams, r_grams = _ngrams(cand, n), _ngrams(ref, n)
    return _f1(_clipped_overlap(c_grams, r_grams), sum(c_grams.values()), sum(r_grams.values()))


def distinct_1(responses: Iterable[str]) -> float:
    tokens = [t for r in responses for t in tokenize(r)]
    if not tokens:
        return 0.0
    return len(set(tokens)) / len(tokens)


# -- persona coverage ------------------------------------------------------------


def idf_o(y: str, a: str, idf: IdfTable) -> float:
    """IDF mass of ``a``'s unique tokens that also occur in ``y``, over ``a``'s total IDF mass."""
    attr = set(tokenize(a))
    if not attr:
        raise UndefinedCoverage("attribute has no tokens")
    resp = set(tokenize(y))
    total = sum(idf.weight(w) for w in attr)
    covered = sum(idf.weight(w) for w in attr & resp)
    return covered / total


def a_cover(y: str, persona: Sequence[str], idf: IdfTable) -> float:
    if not persona:
        raise UndefinedCoverage("persona has no attributes")
    return max(idf_o(y, a, idf) for a in persona)


def p_cover(responses: Sequence[str], persona_text: str, idf: IdfTable) -> float:
    if not responses:
        raise UndefinedCoverage("no responses to aggregate")
    return idf_o(" ".join(responses), persona_text, idf)


# -- embedding-based attribution ----------------------------------------------------


def _sim(a: str, b: str, embedder) -> float:
    # an empty response (e.g. a failed turn) has no direction and scores 0
    if not tokenize(a) or not tokenize(b):
        return 0.0
    return float(np.clip(np.dot(embedder.embed(a), embedder.embed(b)), -1.0, 1.0))


def semantic_a_cover(y: str, persona_attrs: Sequence[str], embedder) -> float:
    if not persona_attrs:
        raise UndefinedCoverage("persona has no attributes")
    return max(_sim(y, a, embedder) for a in persona_attrs)


def mean_semantic_a_cover(pairs: Iterable[tuple[str, Sequence[str]]], embedder) -> float:
    """Corpus Semantic A-Cover: mean over responses of the per-response max."""
    values = [semantic_a_cover(y, attrs, embedder) for y, attrs in pairs]
    if not values:
        raise UndefinedMetric("no responses")
    return float(np.mean(values))


def persona_lift(y: str, y_gt: str, persona_text: str, embedder) -> float:
    """sim(y, persona) - sim(y_gt, persona); the subtraction removes topic bias."""
    return _sim(y, persona_text, embedder) - _sim(y_gt, persona_text, embedder)


@dataclass(frozen=True)
class AttributionRecord:
    response: str
    ground_truth: str
    persona_correct: str
    persona_wrong: str
    lift_correct: float
    lift_wrong: float

    @classmethod
    def compute(cls, response: str, ground_truth: str, persona_correct: str, persona_wrong: str, embedder):
        return cls(
            response,
            ground_truth,
            persona_correct,
            persona_wrong,
            persona_lift(response, ground_truth, persona_correct, embedder),
            persona_lift(response, ground_truth, persona_wrong, embedder),
        )

    @property
    def correct(self) -> bool:
        return self.lift_correct > self.lift_wrong


def paa(records: Sequence[AttributionRecord]) -> float:
    """Share of records whose lift toward the correct persona strictly exceeds the wrong one."""
    if not records:
        raise UndefinedMetric("PAA of zero records")
    return sum(r.lift_correct > r.lift_wrong for r in records) / len(records)


def persona_margin(records: Sequence[AttributionRecord]) -> float:
    if not records:
        raise UndefinedMetric("margin of zero records")
    return sum(r.lift_correct - r.lift_wrong for r in records) / len(records)
