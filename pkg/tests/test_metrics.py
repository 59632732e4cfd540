from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afa.errors import UndefinedCoverage, UndefinedMetric
from afa.metrics import (
    AttributionRecord,
    IdfTable,
    a_cover,
    bleu_n,
    distinct_1,
    idf_o,
    mean_semantic_a_cover,
    p_cover,
    paa,
    persona_lift,
    persona_margin,
    rouge,
    semantic_a_cover,
)
from afa.text import tokenize

UNIFORM = IdfTable()  # no documents: every token weighs ln(1/1) + 1 = 1
words = st.lists(st.sampled_from("a b c d e f g".split()), min_size=1, max_size=12).map(" ".join)


def _rec(lc: float, lw: float) -> AttributionRecord:
    return AttributionRecord("y", "g", "pc", "pw", lc, lw)


def test_tokenize_examples():
    assert tokenize("Hello, World!") == ["hello", "world"]
    assert tokenize("") == []
    assert tokenize("a  b\tc") == ["a", "b", "c"]


def test_bleu_examples():
    assert bleu_n("a b c", "a b d", 1) == pytest.approx(2 / 3, abs=1e-12)
    assert bleu_n("a", "a b c d", 1) == pytest.approx(math.exp(-3), abs=1e-12)
    for n in (1, 2, 3, 4):
        assert bleu_n("the cat sat on the mat", "the cat sat on the mat", n) == 1.0
    assert bleu_n("", "a", 1) == 0.0
    with pytest.raises(ValueError):
        bleu_n("a", "a", 5)


def test_bleu_smoothed_higher_orders():
    # cand "a b c", ref "a b d": p1 = 2/3, p2 = (1+1)/(2+1), p3 = (0+1)/(1+1)
    p1, p2, p3 = 2 / 3, 2 / 3, 1 / 2
    assert bleu_n("a b c", "a b d", 2) == pytest.approx(math.sqrt(p1 * p2), abs=1e-12)
    assert bleu_n("a b c", "a b d", 3) == pytest.approx((p1 * p2 * p3) ** (1 / 3), abs=1e-12)


def test_rouge_examples():
    assert rouge("a b c", "a b d", 1) == pytest.approx(2 / 3, abs=1e-12)
    assert rouge("a c", "a b c", "L") == pytest.approx(0.8, abs=1e-12)
    assert rouge("a b c", "a b c", 2) == 1.0
    assert rouge("a b c", "a b d", 2) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        rouge("a", "a", 3)


def test_distinct_examples():
    assert distinct_1(["a b c"]) == 1.0
    assert distinct_1(["a a b"]) == pytest.approx(2 / 3)
    assert distinct_1(["a b", "a c"]) == pytest.approx(3 / 4)
    assert distinct_1([]) == 0.0


def test_idf_table_weights():
    idf = IdfTable.from_documents(["a b", "a c", "a"])
    assert idf.weight("a") == pytest.approx(math.log(4 / 4) + 1)
    assert idf.weight("b") == pytest.approx(math.log(4 / 2) + 1)
    assert idf.weight("zzz") == pytest.approx(math.log(4) + 1)


def test_coverage_examples():
    assert idf_o("loves jazz a lot", "loves jazz", UNIFORM) == 1.0
    assert idf_o("rain", "loves jazz", UNIFORM) == 0.0
    assert idf_o("jazz fan", "loves jazz", UNIFORM) == pytest.approx(0.5)
    assert a_cover("jazz fan", ["loves jazz"], UNIFORM) == idf_o("jazz fan", "loves jazz", UNIFORM)
    assert a_cover("jazz", ["loves opera", "jazz", "rain"], UNIFORM) == 1.0
    # five-token attributes: 1 of 5 covered vs 3 of 5 covered
    assert a_cover("a x y", ["a b c d e", "x y f g h"], UNIFORM) == pytest.approx(0.4)
    assert a_cover("a", ["a b c d e", "a f g"], UNIFORM) == pytest.approx(1 / 3)
    assert a_cover("a x y", ["a b c d e", "x y a k l"], UNIFORM) == pytest.approx(0.6)
    assert p_cover(["loves", "jazz"], "loves jazz", UNIFORM) == 1.0
    assert p_cover(["a b", "c d"], "a b c d", UNIFORM) == 1.0
    with pytest.raises(UndefinedCoverage):
        idf_o("x", "!!", UNIFORM)
    with pytest.raises(UndefinedCoverage):
        a_cover("x", [], UNIFORM)
    with pytest.raises(UndefinedCoverage):
        p_cover([], "x", UNIFORM)


def test_idf_o_weighted_oracle():
    idf = IdfTable.from_documents(["jazz club", "loves cats", "loves dogs"])
    w_loves, w_jazz = idf.weight("loves"), idf.weight("jazz")
    assert idf_o("jazz", "loves jazz", idf) == pytest.approx(w_jazz / (w_loves + w_jazz), abs=1e-12)


def test_semantic_examples(embedder):
    assert semantic_a_cover("loves jazz", ["loves jazz", "rain"], embedder) == pytest.approx(1.0, abs=1e-6)
    assert semantic_a_cover("alpha beta", ["gamma delta"], embedder) == 0.0
    assert persona_lift("x y", "x y", "p", embedder) == 0.0
    assert persona_lift("loves jazz", "rain today", "loves jazz", embedder) == pytest.approx(1.0, abs=1e-9)
    assert mean_semantic_a_cover([("a", ["a"]), ("b", ["c"])], embedder) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetric):
        mean_semantic_a_cover([], embedder)


def test_semantic_max_with_stub_embedder():
    # attributes at cosines 0.1 and 0.4 to the response
    vecs = {
        "y": np.array([1.0, 0.0]),
        "a1": np.array([0.1, math.sqrt(1 - 0.01)]),
        "a2": np.array([0.4, math.sqrt(1 - 0.16)]),
    }

    class Stub:
        def embed(self, text):
            return vecs[text]

    assert semantic_a_cover("y", ["a1", "a2"], Stub()) == pytest.approx(0.4, abs=1e-12)


def test_paa_examples():
    assert paa([_rec(0.2, 0.1), _rec(0.3, 0.0), _rec(0.0, 0.1)]) == pytest.approx(2 / 3)
    assert paa([_rec(0.0, 0.0)] * 4) == 0.0
    assert persona_margin([_rec(0.3, 0.1)]) == pytest.approx(0.2)
    assert persona_margin([_rec(0.2, 0.0), _rec(0.0, 0.2)]) == 0.0
    with pytest.raises(UndefinedMetric):
        paa([])
    with pytest.raises(UndefinedMetric):
        persona_margin([])


def test_identity_responses_give_zero_paa(embedder):
    recs = [AttributionRecord.compute(g, g, "loves jazz", "hates rain", embedder) for g in ("a b", "jazz now")]
    assert paa(recs) == 0.0 and persona_margin(recs) == 0.0


@given(words)
def test_identity_is_one(x):
    for n in (1, 2, 3, 4):
        assert bleu_n(x, x, n) == 1.0
    for v in (1, 2, "L"):
        if v == 2 and len(x.split()) < 2:
            continue
        assert rouge(x, x, v) == 1.0


@given(words, words)
def test_metrics_bounded(y, r):
    for n in (1, 2, 3, 4):
        assert 0.0 <= bleu_n(y, r, n) <= 1.0
    for v in (1, 2, "L"):
        assert 0.0 <= rouge(y, r, v) <= 1.0
    assert 0.0 <= distinct_1([y, r]) <= 1.0
    assert 0.0 <= idf_o(y, r, UNIFORM) <= 1.0


@given(words, st.lists(words, min_size=1, max_size=4), words)
def test_a_cover_monotone(y, attrs, extra):
    assert a_cover(y, attrs + [extra], UNIFORM) >= a_cover(y, attrs, UNIFORM)


@given(words, words)
def test_idf_o_set_semantics(y, a):
    doubled = " ".join(t + " " + t for t in y.split())
    assert idf_o(doubled, a, UNIFORM) == idf_o(y, a, UNIFORM)


@settings(max_examples=50)
@given(words, words, words)
def test_lift_bounded(y, g, p):
    from afa.retrieval import HashingEmbedder

    assert -2.0 <= persona_lift(y, g, p, HashingEmbedder()) <= 2.0


@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=50))
def test_paa_partition(pairs):
    recs = [_rec(a, b) for a, b in pairs]
    ties_or_wrong = sum(r.lift_correct <= r.lift_wrong for r in recs) / len(recs)
    assert paa(recs) + ties_or_wrong == pytest.approx(1.0, abs=1e-15)
