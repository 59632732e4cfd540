from __future__ import annotations

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afa.errors import DegenerateVector, DimMismatch, EmbedUnavailable
from afa.persona import EMPTY_PERSONA, Category, PersonaAttribute, PersonaProfile
from afa.profile_store import Turn
from afa.retrieval import (
    BASE_INSTRUCTION,
    PERSONA_CLOSE,
    PERSONA_OPEN,
    CachedEmbedder,
    Condition,
    HashingEmbedder,
    RemoteEmbedder,
    assemble_prompt,
    embed_text,
    extract_persona_block,
    fnv1a_64,
    parse_context_exchanges,
    top_k,
)


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_hashing_embedder_examples(embedder):
    a = embed_text("hello", embedder)
    np.testing.assert_array_equal(a, embed_text("hello", embedder))
    np.testing.assert_array_equal(embedder.embed("a b"), embedder.embed("b a"))
    assert a.shape == (256,)
    with pytest.raises(DegenerateVector):
        embedder.embed("?!")


@given(st.text(alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd", "Zs")), min_size=1))
def test_hashing_embedder_unit_norm(text):
    emb = HashingEmbedder()
    if not text.split():
        return
    assert abs(np.linalg.norm(emb.embed(text)) - 1.0) < 1e-6


def test_top_k_examples():
    cands = [("a", [1, 0]), ("b", [0, 1]), ("c", [0.6, 0.8])]
    assert top_k([1, 0], cands, 2) == ["a", "c"]
    assert top_k([1, 0], cands[:2], 3) == ["a", "b"]
    assert top_k([1, 0], [], 3) == []
    assert top_k([1, 0], [("z", [1, 1]), ("y", [2, 2])], 1) == ["y"]


def test_top_k_errors():
    with pytest.raises(DimMismatch):
        top_k([1, 0], [("a", [1, 0, 0])])
    with pytest.raises(DegenerateVector):
        top_k([1, 0], [("a", [0, 0])])
    with pytest.raises(ValueError):
        top_k([1, 0], [("a", [1, 0])], 0)


def test_top_k_matches_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n, dim, k = int(rng.integers(1, 20)), int(rng.integers(2, 6)), int(rng.integers(1, 6))
        vecs = rng.normal(size=(n, dim))
        q = rng.normal(size=dim)
        cands = [(f"id{i:02d}", v) for i, v in enumerate(vecs)]
        sims = [float(v @ q / np.linalg.norm(v) / np.linalg.norm(q)) for v in vecs]
        expected = [c[0] for _, c in sorted(zip(sims, cands), key=lambda p: (-p[0], p[1][0]))][:k]
        assert top_k(q, cands, k) == expected


def _turns(lo, hi, speaker=None):
    return [Turn(i, f"question {i} " + "pad " * 5, f"answer {i} " + "pad " * 5, speaker=speaker) for i in range(lo, hi)]


def test_no_persona_empty_history():
    p = assemble_prompt(None, [], [], "hi", Condition.NO_PERSONA)
    assert p.system_block == BASE_INSTRUCTION
    assert p.context_block == "" and p.user_block == "hi"
    assert PERSONA_OPEN not in p.text
    with pytest.raises(ValueError):
        assemble_prompt(PersonaProfile("u"), [], [], "hi", Condition.NO_PERSONA)


def test_persona_block_and_determinism():
    prof = PersonaProfile("u", [PersonaAttribute(Category.CAREER, "occupation", "nurse")])
    p1 = assemble_prompt(prof, _turns(0, 2), _turns(10, 12), "hi", Condition.CONSTANT)
    p2 = assemble_prompt(prof, _turns(0, 2), _turns(10, 12), "hi", Condition.CONSTANT)
    assert p1 == p2 and p1.text == p2.text
    assert extract_persona_block(p1.text) == "Career.occupation: nurse"
    assert p1.persona_owner == "u"
    empty = assemble_prompt(None, [], [], "hi", Condition.ADAPTIVE)
    assert extract_persona_block(empty.text) == EMPTY_PERSONA


def test_budget_drops_recent_oldest_first():
    retrieved, recent = _turns(0, 3), _turns(20, 30)
    rec_cost = len(assemble_prompt(None, [], recent[:1], "q", Condition.NO_PERSONA).context_block.split())
    ret_cost = len(assemble_prompt(None, retrieved[:1], [], "q", Condition.NO_PERSONA).context_block.split())
    budget = 3 * ret_cost + 3 * rec_cost
    p = assemble_prompt(None, retrieved, recent, "q", Condition.NO_PERSONA, budget)
    ex = parse_context_exchanges(p.text)
    assert [e[1].split()[1] for e in ex] == ["0", "1", "2", "27", "28", "29"]
    assert p.dropped_turns == 7
    # once recent is gone, the lowest-ranked retrieved turn goes next
    p = assemble_prompt(None, [retrieved[2], retrieved[0], retrieved[1]], recent, "q", Condition.NO_PERSONA, 2 * ret_cost)
    assert [e[1].split()[1] for e in parse_context_exchanges(p.text)] == ["0", "2"]


def test_context_labels_and_speakers():
    p = assemble_prompt(None, _turns(0, 1, "a"), _turns(5, 6, "b"), "q", Condition.NO_PERSONA)
    assert p.context_block.startswith("Relevant past exchange (turn 0):\nUser: ")
    assert "Recent conversation (turn 5):" in p.context_block
    assert p.turn_speakers == ("a", "b")
    assert [m["role"] for m in p.messages()] == ["system", "user"]


def test_cached_embedder_counts_calls(embedder):
    calls = []

    class Spy:
        dim = 4

        def embed(self, text):
            calls.append(text)
            return embedder.embed(text)

    cached = CachedEmbedder(Spy())
    cached.embed("x y")
    cached.embed("x y")
    assert calls == ["x y"]


def test_remote_embedder_mock_transport():
    def handler(request):
        assert request.headers["authorization"] == "Bearer sk-test"
        return httpx.Response(200, json={"data": [{"embedding": [3.0, 4.0]}]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    emb = RemoteEmbedder("http://embed.local/v1", "m", dim=2, api_key="sk-test", client=client)
    np.testing.assert_allclose(emb.embed("hi"), [0.6, 0.8])
    assert "sk-test" not in repr(emb)
    plain = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"data": [{"embedding": [1.0, 0.0]}]})))
    with pytest.raises(DimMismatch):
        RemoteEmbedder("http://embed.local/v1", "m", dim=3, client=plain).embed("hi")


def test_remote_embedder_failure():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(EmbedUnavailable):
        RemoteEmbedder("http://embed.local/v1", "m", client=client).embed("hi")
