"""Candidate scanning: turn segmentation, stimulus detection and routing cues.

A caregiver stimulus answered by the child within ``response_gap_max`` opens a
complete intervention loop (stimulus, response, optional reinforcement);
an unanswered stimulus becomes an intervention attempt. Overlapping
candidates are all kept; filtering is the experts' job.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Any, Sequence

from .bookctx import BookContext, default_stopwords, tokenize
from .datamodel import Channel, RoutingCue, Speaker, Transcript, TranscriptEvent
from .errors import ConfigError

WH_WORDS = ("what", "where", "who", "which", "how", "why", "when", "whats", "wheres", "whos")
DIRECTIVE_VERBS = ("say", "tell", "show", "point", "find", "repeat", "name", "touch", "give", "read")
TOPIC_SHIFT_MARKERS = ("okay", "ok", "now", "next", "lets", "alright", "anyway")
STIMULUS_RULES = ("interrogative", "directive", "frame_cutoff", "frame_match", "target_word")


class CandidatePattern(str, enum.Enum):
    COMPLETE_LOOP = "complete_loop"
    ATTEMPT = "attempt"


@dataclass(frozen=True)
class ScanConfig:
    turn_merge_gap: float = 1.0
    response_gap_max: float = 5.0
    reinforce_gap_max: float = 5.0
    td_pause_min: float = 3.0
    attempt_tail: float = 3.0
    stimulus_rules: tuple[str, ...] = STIMULUS_RULES
    wh_words: tuple[str, ...] = WH_WORDS
    directive_verbs: tuple[str, ...] = DIRECTIVE_VERBS
    topic_shift_markers: tuple[str, ...] = TOPIC_SHIFT_MARKERS

    @classmethod
    def from_params(cls, params: dict[str, Any]) -> "ScanConfig":
        known = {k: v for k, v in params.items() if k in cls.__dataclass_fields__}
        for key in ("stimulus_rules", "wh_words", "directive_verbs", "topic_shift_markers"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


@dataclass(frozen=True)
class Turn:
    index: int
    speaker: Speaker
    t_start: float
    t_end: float
    event_ids: tuple[str, ...]
    text: str
    has_action: bool = False
    action_text: str = ""


@dataclass(frozen=True)
class TurnFeatures:
    is_question: bool = False
    is_directive: bool = False
    frame_match: bool = False
    frame_filler: str | None = None
    frame_cutoff: bool = False
    target_hits: tuple[str, ...] = ()
    target_repetition: bool = False
    echoes_child: bool = False
    topic_shift: bool = False
    n_tokens: int = 0
    stimulus_rule: str | None = None

    @property
    def is_mand(self) -> bool:
        return self.is_question or self.is_directive

    @property
    def has_target(self) -> bool:
        return bool(self.target_hits)

    @property
    def has_book_grounding(self) -> bool:
        return self.has_target or self.frame_match or self.frame_cutoff

    @property
    def is_stimulus(self) -> bool:
        return self.stimulus_rule is not None


@dataclass(frozen=True)
class Candidate:
    id: str
    t_start: float
    t_end: float
    pattern: CandidatePattern
    stimulus: Turn
    features: TurnFeatures
    cue: RoutingCue = RoutingCue.MODEL_LIKE
    response: Turn | None = None
    reinforcement: Turn | None = None
    pause_before_response: float = 0.0
    leading: Turn | None = None
    trailing: tuple[Turn, ...] = ()
    trailing_features: tuple[TurnFeatures, ...] = ()
    reinforcement_echoes: bool = False
    session_duration: float = 0.0

    @property
    def core_turns(self) -> tuple[Turn, ...]:
        return tuple(t for t in (self.stimulus, self.response, self.reinforcement) if t is not None)


def segment_turns(transcript: Transcript, turn_merge_gap: float = 1.0) -> list[Turn]:
    """Group speech events into same-speaker turns and attach non-speech events.

    Consecutive speech events of one speaker separated by at most
    ``turn_merge_gap`` seconds form a turn. Action and expression events join
    the overlapping (else nearest) turn of the same speaker; events whose
    speaker never talks are not attached.
    """
    groups: list[dict[str, Any]] = []
    for ev in transcript.events:
        if ev.channel is not Channel.SPEECH:
            continue
        cur = groups[-1] if groups else None
        if cur is not None and cur["speaker"] is ev.speaker and ev.t_start - cur["t_end"] <= turn_merge_gap:
            cur["t_end"] = max(cur["t_end"], ev.t_end)
            cur["events"].append(ev)
        else:
            groups.append({"speaker": ev.speaker, "t_start": ev.t_start, "t_end": ev.t_end, "events": [ev], "actions": []})

    for ev in transcript.events:
        if ev.channel is Channel.SPEECH:
            continue
        own = [g for g in groups if g["speaker"] is ev.speaker]
        if not own:
            continue
        best = min(own, key=lambda g: (_gap(g["t_start"], g["t_end"], ev), g["t_start"]))
        best["actions"].append(ev)

    turns = []
    for i, g in enumerate(groups):
        members: list[TranscriptEvent] = sorted(g["events"] + g["actions"], key=lambda e: (e.t_start, e.id))
        turns.append(
            Turn(
                index=i,
                speaker=g["speaker"],
                t_start=g["t_start"],
                t_end=g["t_end"],
                event_ids=tuple(e.id for e in members),
                text=" ".join(e.text.strip() for e in g["events"]),
                has_action=bool(g["actions"]),
                action_text=" ".join(e.text.strip() for e in g["actions"]),
            )
        )
    return turns


def _gap(start: float, end: float, ev: TranscriptEvent) -> float:
    """Distance between an interval and an event; negative means overlap (more negative = more overlap)."""
    overlap = min(end, ev.t_end) - max(start, ev.t_start)
    if overlap > 0:
        return -overlap
    return max(start - ev.t_end, ev.t_start - end)


def turn_features(
    turn: Turn, prev: Turn | None, book_ctx: BookContext | None, cfg: ScanConfig
) -> TurnFeatures:
    """Lexical and book-grounded features of a caregiver turn."""
    tokens = tokenize(turn.text)
    if not tokens:
        return TurnFeatures()
    ctx = book_ctx or BookContext()
    is_question = "?" in turn.text or tokens[0] in cfg.wh_words
    lead = tokens[2:] if tokens[:2] == ["can", "you"] else tokens
    is_directive = bool(lead) and lead[0] in cfg.directive_verbs
    frame = ctx.frame_match(tokens)
    cutoff = frame is None and ctx.frame_cutoff(tokens) is not None
    targets = ctx.target_set
    hits = tuple(sorted({t for t in tokens if t in targets}))
    repetition = any(tokens.count(t) >= 2 for t in hits)
    echoes = False
    if prev is not None and prev.speaker is Speaker.CHILD and turn.t_start - prev.t_end <= cfg.response_gap_max:
        echoes = bool(_content(tokenize(prev.text)) & _content(tokens))
    topic_shift = tokens[0] in cfg.topic_shift_markers or "turn the page" in " ".join(tokens)

    feats = TurnFeatures(
        is_question=is_question,
        is_directive=is_directive,
        frame_match=frame is not None,
        frame_filler=frame.match(tokens) if frame is not None else None,
        frame_cutoff=cutoff,
        target_hits=hits,
        target_repetition=repetition,
        echoes_child=echoes,
        topic_shift=topic_shift,
        n_tokens=len(tokens),
    )
    return replace(feats, stimulus_rule=_stimulus_rule(feats, cfg.stimulus_rules))


def _content(tokens: Sequence[str]) -> set[str]:
    stop = default_stopwords()
    return {t for t in tokens if t not in stop}


_STIMULUS_TESTS = {
    "interrogative": lambda f: f.is_question,
    "directive": lambda f: f.is_directive,
    "frame_cutoff": lambda f: f.frame_cutoff,
    "frame_match": lambda f: f.frame_match,
    "target_word": lambda f: f.has_target,
}


def _stimulus_rule(feats: TurnFeatures, rules: Sequence[str]) -> str | None:
    for name in rules:
        if _STIMULUS_TESTS[name](feats):
            return name
    return None


def scan_candidates(transcript: Transcript, book_ctx: BookContext | None, cfg: ScanConfig | None = None) -> list[Candidate]:
    """Propose coarse candidates, in temporal order, each with a routing cue.

    The coarse span starts at the adjacent preceding turn (if within
    ``response_gap_max``) and, for loops, runs through caregiver turns that
    keep following the last core turn within ``reinforce_gap_max``.
    """
    cfg = cfg or ScanConfig()
    unknown = set(cfg.stimulus_rules) - set(_STIMULUS_TESTS)
    if unknown:
        raise ConfigError(f"unknown stimulus rules {sorted(unknown)}")
    turns = [t for t in segment_turns(transcript, cfg.turn_merge_gap) if t.speaker is not Speaker.OTHER]
    duration = transcript.duration
    out: list[Candidate] = []
    for i, stim in enumerate(turns):
        if stim.speaker is not Speaker.CAREGIVER:
            continue
        prev = turns[i - 1] if i > 0 else None
        feats = turn_features(stim, prev, book_ctx, cfg)
        if not feats.is_stimulus:
            continue
        nxt = turns[i + 1] if i + 1 < len(turns) else None
        leading = prev if prev is not None and stim.t_start - prev.t_end <= cfg.response_gap_max else None
        t_start = leading.t_start if leading is not None else stim.t_start
        cid = f"{transcript.session_id}:c{len(out):03d}"

        if nxt is not None and nxt.speaker is Speaker.CHILD and nxt.t_start - stim.t_end <= cfg.response_gap_max:
            response = nxt
            after = turns[i + 2] if i + 2 < len(turns) else None
            reinforcement = None
            if after is not None and after.speaker is Speaker.CAREGIVER and after.t_start - response.t_end <= cfg.reinforce_gap_max:
                reinforcement = after
            last = reinforcement or response
            pos = i + (3 if reinforcement is not None else 2)
            end = last.t_end
            trailing, trailing_feats = [], []
            while pos < len(turns) and turns[pos].speaker is Speaker.CAREGIVER and turns[pos].t_start - end <= cfg.reinforce_gap_max:
                trailing.append(turns[pos])
                trailing_feats.append(turn_features(turns[pos], turns[pos - 1], book_ctx, cfg))
                end = turns[pos].t_end
                pos += 1
            echo = reinforcement is not None and bool(
                _content(tokenize(response.text)) & _content(tokenize(reinforcement.text))
            )
            cand = Candidate(
                id=cid,
                t_start=t_start,
                t_end=end,
                pattern=CandidatePattern.COMPLETE_LOOP,
                stimulus=stim,
                features=feats,
                response=response,
                reinforcement=reinforcement,
                pause_before_response=max(0.0, response.t_start - stim.t_end),
                leading=leading,
                trailing=tuple(trailing),
                trailing_features=tuple(trailing_feats),
                reinforcement_echoes=echo,
                session_duration=duration,
            )
        else:
            silence_end = nxt.t_start if nxt is not None else duration
            cand = Candidate(
                id=cid,
                t_start=t_start,
                t_end=max(stim.t_end, min(stim.t_end + cfg.attempt_tail, duration)),
                pattern=CandidatePattern.ATTEMPT,
                stimulus=stim,
                features=feats,
                pause_before_response=max(0.0, silence_end - stim.t_end),
                leading=leading,
                session_duration=duration,
            )
        out.append(replace(cand, cue=assign_cue(cand, book_ctx, cfg)))
    return out


def assign_cue(candidate: Candidate, book_ctx: BookContext | None = None, cfg: ScanConfig | None = None) -> RoutingCue:
    """Coarse strategy hypothesis. Precedence: MAND-like, then TD-like, then MODEL-like.

    MAND-like: interrogative or directive stimulus. TD-like: a long pause
    (``>= td_pause_min``) after a non-interrogative stimulus, either before
    the child's response or, for attempts, after an unfinished frame.
    Everything else is MODEL-like.
    """
    cfg = cfg or ScanConfig()
    f = candidate.features
    if f.is_mand:
        return RoutingCue.MAND_LIKE
    if candidate.pause_before_response >= cfg.td_pause_min and (
        candidate.pattern is CandidatePattern.COMPLETE_LOOP or f.frame_cutoff
    ):
        return RoutingCue.TD_LIKE
    return RoutingCue.MODEL_LIKE


def _turn_record(turn: Turn | None) -> dict[str, Any] | None:
    if turn is None:
        return None
    return {
        "index": turn.index,
        "speaker": turn.speaker.value,
        "t_start": round(turn.t_start, 3),
        "t_end": round(turn.t_end, 3),
        "event_ids": list(turn.event_ids),
        "text": turn.text,
    }


def candidate_record(c: Candidate) -> dict[str, Any]:
    """JSON-ready summary of a candidate for inspection files."""
    f = c.features
    return {
        "id": c.id,
        "t_start": round(c.t_start, 3),
        "t_end": round(c.t_end, 3),
        "pattern": c.pattern.value,
        "cue": c.cue.value,
        "pause_before_response": round(c.pause_before_response, 3),
        "stimulus": _turn_record(c.stimulus),
        "stimulus_features": {
            "rule": f.stimulus_rule,
            "is_question": f.is_question,
            "is_directive": f.is_directive,
            "frame_match": f.frame_match,
            "frame_cutoff": f.frame_cutoff,
            "target_hits": list(f.target_hits),
        },
        "response": _turn_record(c.response),
        "reinforcement": _turn_record(c.reinforcement),
        "trailing": [_turn_record(t) for t in c.trailing],
    }
