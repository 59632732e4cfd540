from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afa.errors import CorruptStore, OutOfOrderTurn, RolloverFailed
from afa.profile_store import (
    MemoryStore,
    Turn,
    UserMemory,
    append_turn,
    fallback_summarize,
    load,
    persist,
    recent_turns,
)


def _turn(i: int, **kw) -> Turn:
    return Turn(i, f"question {i}", f"answer {i}", **kw)


def _filled(k: int, user: str = "u") -> UserMemory:
    mem = UserMemory(user)
    for i in range(k):
        append_turn(mem, _turn(i, embedding=(float(i), 1.0)))
    return mem


def test_window_examples():
    mem = _filled(9)
    assert len(mem.recent) == 9 and mem.summaries == []
    append_turn(mem, _turn(9))
    assert mem.recent == [] and len(mem.summaries) == 1
    assert mem.summaries[0].covered_range == (0, 9)
    mem = _filled(25)
    assert len(mem.recent) == 5 and len(mem.summaries) == 2


def test_recent_turns_examples():
    assert recent_turns(UserMemory("u")) == []
    mem = _filled(3)
    assert [t.turn_index for t in recent_turns(mem, 10)] == [0, 1, 2]
    assert [t.turn_index for t in recent_turns(_filled(12))] == [10, 11]
    assert [t.turn_index for t in recent_turns(_filled(8), 2)] == [6, 7]
    assert recent_turns(mem, 0) == []


def test_out_of_order():
    mem = _filled(2)
    with pytest.raises(OutOfOrderTurn):
        mem.append(_turn(5))
    with pytest.raises(OutOfOrderTurn):
        mem.append(_turn(1))


def test_fallback_summary_examples():
    assert fallback_summarize([Turn(0, "hi", "hello")]) == "Q: hi | A: hello"
    long = [Turn(i, " ".join(["word"] * 30), " ".join(["reply"] * 30)) for i in range(10)]
    out = fallback_summarize(long)
    assert len(out.split()) <= 120
    assert out == fallback_summarize(list(long))
    with pytest.raises(ValueError):
        fallback_summarize([])


def test_summary_keeps_twelve_tokens_per_side():
    t = Turn(0, " ".join(f"q{i}" for i in range(20)), " ".join(f"a{i}" for i in range(20)))
    line = fallback_summarize([t])
    assert line == "Q: " + " ".join(f"q{i}" for i in range(12)) + " | A: " + " ".join(f"a{i}" for i in range(12))


def test_failed_summarizer_defers_rollover():
    mem = _filled(9)

    def broken(window):
        raise RuntimeError("model down")

    with pytest.raises(RolloverFailed):
        mem.append(_turn(9), broken)
    assert len(mem.recent) == 10 and len(mem.full_history) == 10 and mem.summaries == []
    mem.append(_turn(10))
    assert len(mem.summaries) == 1 and mem.summaries[0].covered_range == (0, 10) and mem.recent == []


def test_empty_summary_is_a_failure():
    mem = _filled(9)
    with pytest.raises(RolloverFailed):
        mem.append(_turn(9), lambda w: "  ")


def test_round_trips(tmp_path):
    empty = UserMemory("nobody")
    assert load(persist(empty, tmp_path / "e.json")) == empty
    mem = _filled(25)
    back = load(persist(mem, tmp_path / "m.json"))
    assert back == mem and len(back.summaries) == 2


def test_speaker_tag_round_trip(tmp_path):
    mem = UserMemory("shared")
    mem.append(_turn(0, speaker="alice"))
    mem.append(_turn(1))
    back = load(persist(mem, tmp_path / "s.json"))
    assert [t.speaker for t in back.full_history] == ["alice", None]


def test_truncated_file_is_corrupt(tmp_path):
    path = persist(_filled(4), tmp_path / "m.json")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptStore) as exc:
        load(path)
    assert exc.value.offset is not None and 0 < exc.value.offset <= len(raw) // 2


def test_memory_store_isolates_users(tmp_path):
    store = MemoryStore(tmp_path)
    a = store.get("alice")
    a.append(_turn(0))
    store.put(a)
    assert store.get("bob").full_history == []
    assert store.get("alice") == a
    assert store.user_ids() == ["alice"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 200))
def test_rollover_counts(k):
    mem = _filled(k)
    assert len(mem.summaries) == k // 10
    assert len(mem.recent) == k % 10
    assert len(mem.full_history) == k


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 15), st.integers(0, 60))
def test_window_invariant_any_size(window, k):
    mem = UserMemory("u", window)
    for i in range(k):
        mem.append(_turn(i))
    assert len(mem.recent) < window
    covered = [i for s in mem.summaries for i in range(s.covered_range[0], s.covered_range[1] + 1)]
    assert covered + [t.turn_index for t in mem.recent] == list(range(k))
