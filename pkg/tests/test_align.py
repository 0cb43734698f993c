from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interlens.align import AlignConfig, AlignmentPair, align_transcripts, match_events, merge_timestamps
from interlens.backend import MockBackend, hashed_ngram_embedding
from interlens.datamodel import Channel, Source, Speaker, Transcript, TranscriptEvent
from interlens.errors import AlignmentError, ConsistencyError


def ev(eid, text, s, e, speaker=Speaker.CAREGIVER, channel=Channel.SPEECH, source=Source.PRIMARY_PERCEPTION):
    return TranscriptEvent(eid, speaker, channel, text, s, e, source)


def asr(eid, text, s, e):
    return ev(eid, text, s, e, source=Source.SECONDARY_ASR)


EMBED = MockBackend().embed


def test_substitution_example():
    pairs = match_events([ev("p", "what do you see", 10.2, 11.8)], [asr("a", "what do you see", 10.0, 11.5)], EMBED)
    (pair,) = pairs
    assert pair.substituted
    assert pair.start_delta == pytest.approx(0.2) and pair.end_delta == pytest.approx(0.3)
    assert pair.cosine_distance < 0.1


def test_identity_lists_all_substituted():
    events = [ev(f"p{i}", t, 3.0 * i, 3.0 * i + 1) for i, t in enumerate(["red bird", "blue horse", "what is it"])]
    twins = [asr(f"a{i}", e.text, e.t_start, e.t_end) for i, e in enumerate(events)]
    pairs = match_events(events, twins, EMBED)
    assert all(p.substituted and p.start_delta == 0 and p.end_delta == 0 for p in pairs)
    assert all(p.cosine_distance == pytest.approx(0, abs=1e-9) for p in pairs)


def test_large_delta_emitted_unsubstituted():
    pairs = match_events([ev("p", "red bird", 10.0, 11.0)], [asr("a", "red bird", 11.4, 12.4)], EMBED)
    (pair,) = pairs
    assert pair.cosine_distance < 0.1 and pair.start_delta == pytest.approx(1.4)
    assert not pair.substituted


def test_threshold_edges():
    # distance strictly below d_max, delta up to and including t_max
    pairs = match_events([ev("p", "red bird", 10.0, 11.0)], [asr("a", "red bird", 11.0, 12.0)], EMBED)
    assert pairs[0].substituted
    # near-duplicate text sits above a tight d_max; exact duplicates still pass it
    tight = AlignConfig(d_max=0.05)
    assert not match_events([ev("p", "red bird", 10, 11)], [asr("a", "red birds", 10, 11)], EMBED, tight)[0].substituted
    assert match_events([ev("p", "red bird", 10, 11)], [asr("a", "red bird", 10, 11)], EMBED, tight)[0].substituted


def test_search_window_excludes_far_events():
    assert match_events([ev("p", "red bird", 10.0, 11.0)], [asr("a", "red bird", 30.0, 31.0)], EMBED) == []


def test_greedy_prefers_lower_distance():
    primary = [ev("p1", "red bird", 10.0, 11.0), ev("p2", "blue horse", 11.5, 12.5)]
    twins = [asr("a1", "blue horse", 10.2, 11.2), asr("a2", "red bird", 11.4, 12.4)]
    pairs = {p.primary_event_id: p.asr_event_id for p in match_events(primary, twins, EMBED)}
    assert pairs == {"p1": "a2", "p2": "a1"}


def test_tie_broken_by_start_delta():
    primary = [ev("p", "red bird", 10.0, 11.0)]
    twins = [asr("far", "red bird", 10.6, 11.6), asr("near", "red bird", 10.1, 11.1)]
    assert match_events(primary, twins, EMBED)[0].asr_event_id == "near"


def test_only_caregiver_speech_considered():
    primary = [ev("c", "red bird", 1, 2, speaker=Speaker.CHILD), ev("x", "points", 1, 2, channel=Channel.ACTION)]
    assert match_events(primary, [asr("a", "red bird", 1, 2)], EMBED) == []


def test_embedder_failure_names_event():
    def broken(text):
        raise RuntimeError("boom")

    with pytest.raises(AlignmentError) as info:
        match_events([ev("p7", "red bird", 1, 2)], [asr("a", "red bird", 1, 2)], broken)
    assert info.value.event_id == "p7"


def _session(events, duration=60.0):
    return Transcript("s", tuple(events), duration)


def test_merge_substitutes_and_marks_source():
    primary = _session([ev("p", "what do you see", 10.2, 11.8), ev("k", "bird", 12.0, 12.5, speaker=Speaker.CHILD)])
    pair = AlignmentPair("p", "a", 0.0, 0.2, 0.3, True)
    merged = merge_timestamps(primary, [pair], [asr("a", "what do you see", 10.0, 11.5)])
    out = merged.by_id()["p"]
    assert (out.t_start, out.t_end, out.source) == (10.0, 11.5, Source.MERGED)
    assert merged.by_id()["k"] == primary.by_id()["k"]


def test_merge_without_substitution_is_identity():
    primary = _session([ev("p", "x", 1, 2)])
    pair = AlignmentPair("p", "a", 0.5, 0.0, 0.0, False)
    assert merge_timestamps(primary, [pair], [asr("a", "y", 1, 2)]) == primary


def test_merge_resorts_reordered_events():
    primary = _session([ev("p1", "hello there", 10.0, 11.0), ev("p2", "red bird", 11.5, 12.5)])
    pair = AlignmentPair("p2", "a", 0.0, 0.9, 0.9, True)
    merged = merge_timestamps(primary, [pair], [asr("a", "red bird", 9.6, 10.6)])
    assert [e.id for e in merged.events] == ["p2", "p1"]


def test_merge_dangling_id():
    primary = _session([ev("p", "x", 1, 2)])
    with pytest.raises(ConsistencyError):
        merge_timestamps(primary, [AlignmentPair("nope", "a", 0.0, 0, 0, True)], [asr("a", "x", 1, 2)])
    with pytest.raises(ConsistencyError):
        merge_timestamps(primary, [AlignmentPair("p", "nope", 0.0, 0, 0, True)], [asr("a", "x", 1, 2)])


def test_mock_embedding_near_duplicates():
    a, b = hashed_ngram_embedding("red bird"), hashed_ngram_embedding("red birds")
    assert 1 - float(a @ b) < 0.1
    assert np.array_equal(hashed_ngram_embedding("red bird"), a)


_texts = st.sampled_from(["red bird", "blue horse", "what do you see", "look at that", "yellow duck", "good job"])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(_texts, st.floats(0, 100), st.floats(0.3, 3)), min_size=0, max_size=8),
    st.lists(st.tuples(_texts, st.floats(0, 100), st.floats(0.3, 3)), min_size=0, max_size=8),
)
def test_pairing_is_injective_and_substitution_consistent(prim, sec):
    primary = [ev(f"p{i}", t, s, s + d) for i, (t, s, d) in enumerate(prim)]
    twins = [asr(f"a{i}", t, s, s + d) for i, (t, s, d) in enumerate(sec)]
    cfg = AlignConfig()
    pairs = match_events(primary, twins, EMBED, cfg)
    assert len({p.primary_event_id for p in pairs}) == len(pairs)
    assert len({p.asr_event_id for p in pairs}) == len(pairs)
    for p in pairs:
        assert p.substituted == (p.cosine_distance < cfg.d_max and max(p.start_delta, p.end_delta) <= cfg.t_max)
        assert 0 <= p.cosine_distance <= 2
    assert match_events(primary, twins, EMBED, cfg) == pairs

    duration = max([e.t_end for e in primary + twins], default=0.0) + 1
    merged, _ = align_transcripts(Transcript("s", tuple(primary), duration), twins, EMBED, cfg)
    assert len(merged.events) == len(primary)
    starts = [e.t_start for e in merged.events]
    assert starts == sorted(starts)
    by_id = merged.by_id()
    for orig in primary:
        new = by_id[orig.id]
        assert (new.text, new.speaker, new.channel) == (orig.text, orig.speaker, orig.channel)
