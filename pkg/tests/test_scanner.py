from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interlens.bookctx import SLOT, BookContext, SentenceFrame, TargetWord
from interlens.datamodel import Channel, RoutingCue, Source, Speaker, Transcript, TranscriptEvent
from interlens.errors import ConfigError
from interlens.scanner import CandidatePattern, ScanConfig, assign_cue, scan_candidates, segment_turns

C, K = Speaker.CAREGIVER, Speaker.CHILD


def ev(eid, speaker, s, e, text="x", channel=Channel.SPEECH):
    return TranscriptEvent(eid, speaker, channel, text, s, e, Source.PRIMARY_PERCEPTION)


def tr(*events, duration=60.0):
    return Transcript("s", tuple(sorted(events, key=lambda e: (e.t_start, e.id))), duration)


CTX = BookContext(
    frames=(SentenceFrame((SLOT, SLOT, "what", "do", "you", "see"), 2, ("brown bear", "red bird")),),
    targets=(TargetWord("bird", 4, True), TargetWord("red", 4, True)),
)


def test_same_speaker_events_merge():
    turns = segment_turns(tr(ev("a", C, 0, 1), ev("b", C, 1.5, 2)))
    assert [(t.t_start, t.t_end, t.event_ids) for t in turns] == [(0, 2, ("a", "b"))]


def test_speaker_change_splits_turns():
    turns = segment_turns(tr(ev("a", C, 0, 1), ev("b", K, 1.2, 2), ev("c", C, 2.1, 3)))
    assert [t.speaker for t in turns] == [C, K, C]


def test_action_attaches_to_turn():
    (turn,) = segment_turns(tr(ev("a", C, 0, 1), ev("b", C, 0.3, 0.8, "points", Channel.ACTION)))
    assert turn.has_action and turn.event_ids == ("a", "b") and turn.text == "x"


def test_merge_gap_is_inclusive():
    assert len(segment_turns(tr(ev("a", C, 0, 1), ev("b", C, 2, 3)))) == 1
    assert len(segment_turns(tr(ev("a", C, 0, 1), ev("b", C, 2.01, 3)))) == 2


def test_complete_loop():
    t = tr(ev("a", C, 10, 11.5, "what do you see?"), ev("b", K, 12, 12.8, "red bird"), ev("c", C, 13, 14, "yes, red bird!"))
    cands = scan_candidates(t, CTX)
    cand = cands[0]
    assert cand.pattern is CandidatePattern.COMPLETE_LOOP
    assert (cand.t_start, cand.t_end) == (10, 14)
    assert cand.response.event_ids == ("b",) and cand.reinforcement.event_ids == ("c",)
    assert cand.pause_before_response == pytest.approx(0.5)
    assert cand.reinforcement_echoes
    assert cand.cue is RoutingCue.MAND_LIKE
    # the target-bearing reinforcement is a stimulus of its own; overlaps are kept
    assert [c.stimulus.event_ids for c in cands] == [("a",), ("c",)]


def test_attempt():
    t = tr(ev("a", C, 10, 11.5, "what do you see?"), ev("b", K, 20, 21, "bird"))
    cand = scan_candidates(t, CTX)[0]
    assert cand.pattern is CandidatePattern.ATTEMPT and cand.response is None
    assert (cand.t_start, cand.t_end) == (10, 14.5)


def test_attempt_tail_clipped_to_duration():
    cand = scan_candidates(tr(ev("a", C, 10, 11.5, "what do you see?"), duration=12.0), CTX)[0]
    assert cand.t_end == 12.0


def test_no_caregiver_turns():
    assert scan_candidates(tr(ev("a", K, 1, 2, "bird"), ev("b", K, 4, 5, "what?")), CTX) == []
    assert scan_candidates(Transcript("s", (), 0.0), CTX) == []


def test_non_stimulus_turns_ignored():
    assert scan_candidates(tr(ev("a", C, 1, 2, "mm hmm")), CTX) == []


def test_cue_examples():
    model = scan_candidates(tr(ev("a", C, 10, 11, "Red bird... red bird.")), CTX)[0]
    assert model.cue is RoutingCue.MODEL_LIKE
    cutoff = scan_candidates(tr(ev("a", C, 10, 11, "Red bird, red bird, what do you"), ev("b", K, 15, 16, "see")), CTX)
    # child answers after 4 s, still within the response window
    assert cutoff[0].cue is RoutingCue.TD_LIKE
    lone = scan_candidates(tr(ev("a", C, 10, 11, "Red bird, red bird, what do you")), CTX)[0]
    assert lone.pattern is CandidatePattern.ATTEMPT and lone.cue is RoutingCue.TD_LIKE


def test_short_pause_attempt_is_not_td():
    # attempts need an unfinished frame to count as an expectant pause
    cand = scan_candidates(tr(ev("a", C, 10, 11, "red bird")), CTX)[0]
    assert cand.cue is RoutingCue.MODEL_LIKE


def test_cue_precedence_mand_over_td():
    t = tr(ev("a", C, 10, 11, "what is that?"), ev("b", K, 15, 16, "bird"))
    cand = scan_candidates(t, CTX)[0]
    assert cand.pause_before_response >= 3.0 and cand.cue is RoutingCue.MAND_LIKE


def test_td_threshold_from_config():
    t = tr(ev("a", C, 10, 11, "red bird red bird"), ev("b", K, 13.5, 14, "bird"))
    assert scan_candidates(t, CTX)[0].cue is RoutingCue.MODEL_LIKE
    assert scan_candidates(t, CTX, ScanConfig(td_pause_min=2.5))[0].cue is RoutingCue.TD_LIKE


def test_trailing_turns_extend_coarse_span():
    t = tr(
        ev("a", K, 8, 9, "look"),
        ev("b", C, 10, 11, "what do you see?"),
        ev("c", K, 12, 12.5, "bird"),
        ev("d", C, 13, 14, "yes, a red bird"),
        ev("e", C, 15.5, 16, "okay, turn the page"),
    )
    cand = scan_candidates(t, CTX)[0]
    assert (cand.t_start, cand.t_end) == (8, 16)
    assert cand.leading.event_ids == ("a",) and [x.event_ids for x in cand.trailing] == [("e",)]
    assert cand.trailing_features[0].topic_shift


def test_unknown_stimulus_rule():
    with pytest.raises(ConfigError):
        scan_candidates(tr(ev("a", C, 1, 2, "hi")), CTX, ScanConfig(stimulus_rules=("telepathy",)))


def test_assign_cue_is_recomputable():
    t = tr(ev("a", C, 10, 11, "what do you see?"), ev("b", K, 12, 13, "bird"))
    cand = scan_candidates(t, CTX)[0]
    assert assign_cue(cand, CTX) is cand.cue


_lines = st.sampled_from(["what do you see?", "red bird red bird", "bird", "good job", "red bird, red bird, what do you"])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.booleans(), _lines, st.floats(0.2, 8), st.floats(0.3, 3)), max_size=14))
def test_candidate_invariants(spec):
    events, t = [], 0.0
    for i, (child, text, gap, dur) in enumerate(spec):
        t += gap
        events.append(ev(f"e{i:02d}", K if child else C, t, t + dur, text))
        t += dur
    transcript = tr(*events, duration=t + 1)
    ids = {e.id for e in events}
    cands = scan_candidates(transcript, CTX)
    assert cands == scan_candidates(transcript, CTX)
    assert [c.stimulus.t_start for c in cands] == sorted(c.stimulus.t_start for c in cands)
    for c in cands:
        assert (c.pattern is CandidatePattern.COMPLETE_LOOP) == (c.response is not None)
        assert c.t_start <= c.stimulus.t_start
        assert c.t_end >= max(x.t_end for x in c.core_turns)
        for turn in c.core_turns:
            assert set(turn.event_ids) <= ids
        starts = [x.t_start for x in c.core_turns]
        assert starts == sorted(starts)
        assert c.cue in RoutingCue
