"""Merge primary perception events with secondary ASR utterances.

A caregiver utterance takes the ASR timestamps of its semantic twin when the
embedding distance is strictly below ``d_max`` and both boundary deltas are
within ``t_max``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .datamodel import Source, Transcript, TranscriptEvent
from .errors import AlignmentError, ConfigError, ConsistencyError

logger = logging.getLogger(__name__)

Embedder = Callable[[str], np.ndarray]


@dataclass(frozen=True)
class AlignConfig:
    d_max: float = 0.1
    t_max: float = 1.0
    search_window: float = 5.0

    def __post_init__(self) -> None:
        for name in ("d_max", "t_max", "search_window"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")


@dataclass(frozen=True)
class AlignmentPair:
    primary_event_id: str
    asr_event_id: str
    cosine_distance: float
    start_delta: float
    end_delta: float
    substituted: bool


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """``1 - cos(u, v)``, clipped to [0, 2]."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 1.0
    return float(np.clip(1.0 - float(np.dot(u, v)) / (nu * nv), 0.0, 2.0))


def _embed_all(events: Sequence[TranscriptEvent], embedder: Embedder) -> list[np.ndarray]:
    vectors = []
    for ev in events:
        try:
            vectors.append(np.asarray(embedder(ev.text), dtype=float))
        except Exception as exc:
            raise AlignmentError(f"embedding failed: {exc}", ev.id) from exc
    return vectors


def match_events(
    primary: Sequence[TranscriptEvent],
    asr: Sequence[TranscriptEvent],
    embedder: Embedder,
    cfg: AlignConfig | None = None,
) -> list[AlignmentPair]:
    """Pair caregiver speech events with ASR utterances one-to-one.

    All (primary, asr) combinations whose midpoints lie within
    ``cfg.search_window`` are ranked by cosine distance, then start delta,
    then primary start time, and taken greedily while both sides are free.
    Every greedy pair is returned; ``substituted`` records whether it passes
    both thresholds. Non-caregiver or non-speech primary events are ignored.
    """
    cfg = cfg or AlignConfig()
    primary = [ev for ev in primary if ev.is_caregiver_speech]
    if not primary or not asr:
        return []
    p_vecs = _embed_all(primary, embedder)
    a_vecs = _embed_all(asr, embedder)

    edges = []
    for i, p in enumerate(primary):
        for j, a in enumerate(asr):
            if abs(p.midpoint - a.midpoint) > cfg.search_window:
                continue
            dist = cosine_distance(p_vecs[i], a_vecs[j])
            sd = abs(p.t_start - a.t_start)
            ed = abs(p.t_end - a.t_end)
            edges.append((dist, sd, p.t_start, i, j, ed))
    edges.sort()

    used_p: set[int] = set()
    used_a: set[int] = set()
    pairs = []
    for dist, sd, _, i, j, ed in edges:
        if i in used_p or j in used_a:
            continue
        used_p.add(i)
        used_a.add(j)
        ok = dist < cfg.d_max and max(sd, ed) <= cfg.t_max
        pairs.append((i, AlignmentPair(primary[i].id, asr[j].id, dist, sd, ed, ok)))
    pairs.sort(key=lambda item: item[0])
    return [pair for _, pair in pairs]


def merge_timestamps(
    primary: Transcript, pairs: Sequence[AlignmentPair], asr: Sequence[TranscriptEvent]
) -> Transcript:
    """Apply substituted pairs to ``primary`` and re-sort.

    Session duration grows if an ASR boundary runs past it. ASR utterances
    without a primary counterpart are dropped.
    """
    by_id = primary.by_id()
    asr_by_id = {ev.id: ev for ev in asr}
    updates: dict[str, TranscriptEvent] = {}
    for pair in pairs:
        if pair.primary_event_id not in by_id:
            raise ConsistencyError(f"pair references unknown primary event {pair.primary_event_id!r}")
        if pair.asr_event_id not in asr_by_id:
            raise ConsistencyError(f"pair references unknown ASR event {pair.asr_event_id!r}")
        if not pair.substituted:
            continue
        ev = by_id[pair.primary_event_id]
        if not ev.is_caregiver_speech:
            raise ConsistencyError(f"pair targets non caregiver-speech event {ev.id!r}")
        if ev.id in updates:
            raise ConsistencyError(f"event {ev.id!r} substituted twice")
        a = asr_by_id[pair.asr_event_id]
        updates[ev.id] = replace(ev, t_start=a.t_start, t_end=a.t_end, source=Source.MERGED)

    if not updates:
        return primary.with_events(primary.events)
    events = [updates.get(ev.id, ev) for ev in primary.events]
    duration = max([primary.duration] + [ev.t_end for ev in updates.values()])
    logger.debug("merged %d of %d events", len(updates), len(events))
    return primary.with_events(events, duration=duration)


def align_transcripts(
    primary: Transcript, asr: Transcript | Sequence[TranscriptEvent], embedder: Embedder, cfg: AlignConfig | None = None
) -> tuple[Transcript, list[AlignmentPair]]:
    asr_events = list(asr.events if isinstance(asr, Transcript) else asr)
    pairs = match_events(primary.caregiver_speech(), asr_events, embedder, cfg)
    return merge_timestamps(primary, pairs, asr_events), pairs
