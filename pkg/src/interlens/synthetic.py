"""Synthetic shared-reading sessions with planted interventions.

Sessions follow a repetitive picture book ("brown bear, brown bear, what do
you see?"). Each planted block is separated from its neighbours by a quiet
gap longer than every default threshold, so the expected segment of each
block can be stated exactly. Used by the test suite and for demos.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .datamodel import (
    Channel,
    GoldSegment,
    Source,
    Speaker,
    StrategyLabel,
    Transcript,
    TranscriptEvent,
    serialize_gold,
    serialize_transcript,
)
from .scanner import CandidatePattern

ANIMALS = (
    ("brown", "bear"),
    ("red", "bird"),
    ("yellow", "duck"),
    ("blue", "horse"),
    ("green", "frog"),
    ("purple", "cat"),
    ("white", "dog"),
    ("black", "sheep"),
    ("gold", "fish"),
)

FILLERS = (
    "Okay, let me get comfortable.",
    "Hmm, hold on a second.",
    "Sit on my lap, sweetie.",
    "Careful with the cover.",
    "Alright, ready?",
)

# block kind -> (label, scan pattern)
BLOCK_KINDS = {
    "modeling_attempt": (StrategyLabel.MODELING, CandidatePattern.ATTEMPT),
    "modeling_loop": (StrategyLabel.MODELING, CandidatePattern.COMPLETE_LOOP),
    "mand_loop": (StrategyLabel.MAND_MODEL, CandidatePattern.COMPLETE_LOOP),
    "mand_loop_trailing": (StrategyLabel.MAND_MODEL, CandidatePattern.COMPLETE_LOOP),
    "td_loop": (StrategyLabel.TIME_DELAY, CandidatePattern.COMPLETE_LOOP),
    "td_attempt": (StrategyLabel.TIME_DELAY, CandidatePattern.ATTEMPT),
}


@dataclass(frozen=True)
class Planted:
    kind: str
    label: StrategyLabel
    pattern: CandidatePattern
    stimulus_start: float
    gold: GoldSegment


@dataclass
class SyntheticSession:
    transcript: Transcript
    golds: list[GoldSegment]
    planted: list[Planted] = field(default_factory=list)

    @property
    def session_id(self) -> str:
        return self.transcript.session_id


class _Builder:
    def __init__(self, session_id: str, rng: random.Random):
        self.session_id = session_id
        self.rng = rng
        self.t = 1.0
        self.events: list[TranscriptEvent] = []

    def say(self, speaker: Speaker, text: str, dur: float | None = None, gap: float = 0.0) -> TranscriptEvent:
        self.t += gap
        dur = dur if dur is not None else round(0.6 + 0.25 * len(text.split()), 2)
        ev = TranscriptEvent(
            id=f"e{len(self.events):03d}", speaker=speaker, channel=Channel.SPEECH, text=text,
            t_start=round(self.t, 3), t_end=round(self.t + dur, 3), source=Source.PRIMARY_PERCEPTION,
        )
        self.events.append(ev)
        self.t = ev.t_end
        return ev

    def act(self, speaker: Speaker, text: str, anchor: TranscriptEvent) -> None:
        self.events.append(
            TranscriptEvent(
                id=f"e{len(self.events):03d}", speaker=speaker, channel=Channel.ACTION, text=text,
                t_start=anchor.t_start + 0.1, t_end=max(anchor.t_start + 0.2, anchor.t_end - 0.1),
                source=Source.PRIMARY_PERCEPTION,
            )
        )

    def quiet(self, lo: float = 8.0, hi: float = 10.0) -> None:
        self.t += round(self.rng.uniform(lo, hi), 2)

    def short(self) -> float:
        return round(self.rng.uniform(0.3, 0.9), 2)


def _phrase(animal: tuple[str, str]) -> str:
    return f"{animal[0]} {animal[1]}"


def _block(b: _Builder, kind: str, animal: tuple[str, str], td_pause: float) -> Planted:
    C, K = Speaker.CAREGIVER, Speaker.CHILD
    name = _phrase(animal)
    end_override = None
    if kind == "modeling_attempt":
        stim = b.say(C, f"{name.capitalize()}. {name.capitalize()}.")
        b.act(C, "points at the picture", stim)
        last = stim
        end_override = stim.t_end + 3.0
    elif kind == "modeling_loop":
        stim = b.say(C, f"Look, a {name}. A {name}.")
        b.say(K, animal[1], gap=b.short())
        last = b.say(C, "Yes!", gap=b.short())
    elif kind in ("mand_loop", "mand_loop_trailing"):
        stim = b.say(C, "What do you see?")
        b.say(K, name, gap=b.short())
        last = b.say(C, f"Yes, {name}!", gap=b.short())
        if kind == "mand_loop_trailing":
            b.say(C, "Okay, turn the page.", gap=2.0)
    elif kind == "td_loop":
        stim = b.say(C, f"{name.capitalize()}, {name}, what do you")
        b.say(K, "see", gap=td_pause)
        last = b.say(C, "Good job!", gap=b.short())
    elif kind == "td_attempt":
        stim = b.say(C, f"{name.capitalize()}, {name}, what do you")
        last = stim
        end_override = stim.t_end + 3.0
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    label, pattern = BLOCK_KINDS[kind]
    end = round(end_override if end_override is not None else last.t_end, 3)
    core = (stim.t_start, last.t_end)
    gold = GoldSegment(stim.t_start, end, label, core)
    return Planted(kind, label, pattern, stim.t_start, gold)


def make_session(
    session_id: str,
    blocks: Sequence[str],
    seed: int = 0,
    td_pause: float = 4.0,
    fillers: int = 2,
) -> SyntheticSession:
    """Build one session: a short read-aloud of the book, then the planted blocks.

    ``td_pause`` is the child's delay in ``td_loop`` blocks; values below the
    default threshold make those blocks invisible to the v1 rules.
    """
    rng = random.Random(seed)
    animals = rng.sample(ANIMALS, k=min(len(ANIMALS), max(3, len(blocks))))
    b = _Builder(session_id, rng)
    for i, animal in enumerate(animals):
        name = _phrase(animal)
        b.say(Speaker.CAREGIVER, f"{name.capitalize()}, {name}, what do you see?")
        b.quiet(6.5, 7.5)
        if i < fillers:
            b.say(Speaker.CAREGIVER, FILLERS[(seed + i) % len(FILLERS)])
            b.quiet(6.5, 7.5)
    planted = []
    for i, kind in enumerate(blocks):
        b.quiet()
        planted.append(_block(b, kind, animals[i % len(animals)], td_pause))
    b.quiet()
    transcript = Transcript(session_id, tuple(b.events), round(b.t, 3), family_id=f"fam-{seed % 7}")
    golds = [p.gold for p in planted]
    return SyntheticSession(transcript, golds, planted)


def balanced_corpus(n_sessions: int = 5, seed: int = 0, td_pause: float = 4.0) -> list[SyntheticSession]:
    """One intervention per strategy in each session, cycling through the block variants."""
    modeling = ("modeling_attempt", "modeling_loop")
    mand = ("mand_loop", "mand_loop_trailing")
    td = ("td_loop", "td_attempt")
    sessions = []
    for i in range(n_sessions):
        blocks = [modeling[i % 2], mand[i % 2], td[i % 2]]
        random.Random(seed + i).shuffle(blocks)
        sessions.append(make_session(f"s{i + 1:02d}", blocks, seed=seed + i, td_pause=td_pause))
    return sessions


def asr_twin(transcript: Transcript, seed: int = 0, max_shift: float = 0.8, overrides: dict[str, float] | None = None) -> Transcript:
    """Secondary transcript with one re-timed copy of every caregiver utterance.

    Text is lower-cased and stripped of punctuation, as ASR output would be.
    ``overrides`` forces the start/end shift for chosen primary event ids.
    """
    rng = random.Random(seed)
    overrides = overrides or {}
    events = []
    for ev in transcript.caregiver_speech():
        shift = overrides.get(ev.id, round(rng.uniform(-max_shift, max_shift), 3))
        text = "".join(ch for ch in ev.text.lower() if ch.isalnum() or ch.isspace())
        start = max(0.0, ev.t_start + shift)
        events.append(
            TranscriptEvent(
                id=f"asr-{ev.id}", speaker=Speaker.CAREGIVER, channel=Channel.SPEECH, text=text,
                t_start=round(start, 3), t_end=round(start + (ev.t_end - ev.t_start), 3),
                source=Source.SECONDARY_ASR, confidence=0.9,
            )
        )
    duration = max([transcript.duration] + [e.t_end for e in events])
    return Transcript(transcript.session_id, tuple(events), duration, transcript.family_id)


def jitter_primary(transcript: Transcript, seed: int = 0, max_shift: float = 0.6) -> Transcript:
    """Perception view of a session: caregiver speech times are off by up to ``max_shift``.

    Pair with ``asr_twin(transcript, max_shift=0)`` so alignment can restore
    the true times.
    """
    rng = random.Random(seed)
    events = []
    for ev in transcript.events:
        if ev.is_caregiver_speech:
            shift = rng.uniform(-max_shift, max_shift)
            start = max(0.0, ev.t_start + shift)
            ev = replace(ev, t_start=round(start, 3), t_end=round(start + ev.t_end - ev.t_start, 3))
        events.append(ev)
    duration = max([transcript.duration] + [e.t_end for e in events])
    return Transcript(transcript.session_id, tuple(events), duration, transcript.family_id)


def write_corpus(sessions: Sequence[SyntheticSession], out_dir: str | Path, with_asr: bool = False) -> Path:
    """Write transcripts, gold files and a manifest; returns the manifest path.

    With ``with_asr`` the transcript file holds a jittered perception view and
    the ASR file the true caregiver timings.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sess in enumerate(sessions):
        sid = sess.session_id
        primary = jitter_primary(sess.transcript, seed=i) if with_asr else sess.transcript
        (out / f"{sid}.jsonl").write_bytes(serialize_transcript(primary))
        (out / f"{sid}_gold.json").write_bytes(serialize_gold(sess.golds))
        entry = {"session_id": sid, "transcript": f"{sid}.jsonl", "gold": f"{sid}_gold.json"}
        if with_asr:
            (out / f"{sid}_asr.jsonl").write_bytes(serialize_transcript(asr_twin(sess.transcript, max_shift=0.0)))
            entry["asr"] = f"{sid}_asr.jsonl"
        entries.append(entry)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"sessions": entries}, indent=2) + "\n", encoding="utf-8")
    return manifest
