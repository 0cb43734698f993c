"""Core domain types, transcript/annotation ingestion and clip chunking.

Timestamps are float seconds; serialized values are rounded to milliseconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

from .errors import ConfigError, ParseError, ValidationError

TIME_EPS = 1e-6


class StrategyLabel(str, Enum):
    MODELING = "modeling"
    MAND_MODEL = "mand_model"
    TIME_DELAY = "time_delay"

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, value: str) -> "StrategyLabel":
        """Accept serialization names and their display spellings ("Mand-Model", "Time Delay")."""
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown strategy label {value!r}") from None


_DISPLAY = {
    StrategyLabel.MODELING: "Modeling",
    StrategyLabel.MAND_MODEL: "Mand-Model",
    StrategyLabel.TIME_DELAY: "Time Delay",
}


class RoutingCue(str, Enum):
    MODEL_LIKE = "model_like"
    MAND_LIKE = "mand_like"
    TD_LIKE = "td_like"

    @property
    def expert(self) -> StrategyLabel:
        return _CUE_TO_EXPERT[self]


_CUE_TO_EXPERT = {
    RoutingCue.MODEL_LIKE: StrategyLabel.MODELING,
    RoutingCue.MAND_LIKE: StrategyLabel.MAND_MODEL,
    RoutingCue.TD_LIKE: StrategyLabel.TIME_DELAY,
}


class Speaker(str, Enum):
    CAREGIVER = "caregiver"
    CHILD = "child"
    OTHER = "other"


class Channel(str, Enum):
    SPEECH = "speech"
    ACTION = "action"
    EXPRESSION = "expression"


class Source(str, Enum):
    PRIMARY_PERCEPTION = "primary_perception"
    SECONDARY_ASR = "secondary_asr"
    MERGED = "merged"


def _ms(t: float) -> float:
    return round(float(t), 3)


@dataclass(frozen=True)
class TranscriptEvent:
    id: str
    speaker: Speaker
    channel: Channel
    text: str
    t_start: float
    t_end: float
    source: Source = Source.PRIMARY_PERCEPTION
    confidence: float = 1.0
    notes: str = ""

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValidationError("text is empty", self.id)
        if self.t_start < 0:
            raise ValidationError(f"t_start {self.t_start} is negative", self.id)
        if self.t_end <= self.t_start:
            raise ValidationError(f"t_end {self.t_end} <= t_start {self.t_start}", self.id)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]", self.id)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.t_start + self.t_end)

    @property
    def is_caregiver_speech(self) -> bool:
        return self.speaker is Speaker.CAREGIVER and self.channel is Channel.SPEECH

    def to_record(self) -> dict[str, Any]:
        rec = {
            "id": self.id,
            "speaker": self.speaker.value,
            "channel": self.channel.value,
            "text": self.text,
            "t_start": _ms(self.t_start),
            "t_end": _ms(self.t_end),
            "source": self.source.value,
            "confidence": self.confidence,
        }
        if self.notes:
            rec["notes"] = self.notes
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "TranscriptEvent":
        """Build an event from a decoded record. Raises KeyError/ValueError/TypeError on shape problems."""
        event_id = str(rec["id"])
        t_start = float(rec["t_start"])
        t_end = float(rec["t_end"])
        return cls(
            id=event_id,
            speaker=Speaker(str(rec["speaker"]).lower()),
            channel=Channel(str(rec["channel"]).lower()),
            text=str(rec["text"]),
            t_start=t_start,
            t_end=t_end,
            source=Source(str(rec.get("source", Source.PRIMARY_PERCEPTION.value)).lower()),
            confidence=float(rec.get("confidence", 1.0)),
            notes=str(rec.get("notes", "") or ""),
        )


def _event_order(ev: TranscriptEvent) -> tuple[float, str]:
    return (ev.t_start, ev.id)


@dataclass(frozen=True)
class Transcript:
    session_id: str
    events: tuple[TranscriptEvent, ...] = ()
    duration: float = 0.0
    family_id: str | None = None

    def __post_init__(self) -> None:
        events = tuple(sorted(self.events, key=_event_order))
        object.__setattr__(self, "events", events)
        seen: set[str] = set()
        for ev in events:
            if ev.id in seen:
                raise ValidationError("duplicate event id", ev.id)
            seen.add(ev.id)
            if ev.t_end > self.duration + TIME_EPS:
                raise ValidationError(f"t_end {ev.t_end} exceeds session duration {self.duration}", ev.id)

    def __len__(self) -> int:
        return len(self.events)

    def by_id(self) -> dict[str, TranscriptEvent]:
        return {ev.id: ev for ev in self.events}

    def caregiver_speech(self) -> list[TranscriptEvent]:
        return [ev for ev in self.events if ev.is_caregiver_speech]

    def with_events(self, events: Iterable[TranscriptEvent], duration: float | None = None) -> "Transcript":
        return replace(self, events=tuple(events), duration=self.duration if duration is None else duration)

    def header(self) -> dict[str, Any]:
        return {"session_id": self.session_id, "duration": _ms(self.duration), "family_id": self.family_id}


def parse_transcript(data: bytes | str) -> Transcript:
    """Parse a line-delimited transcript file.

    Line 1 is the session header (``session_id``, ``duration``, ``family_id``);
    every further non-blank line is one event record. Events are sorted on
    ingest. A header without ``duration`` takes the latest event end.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        return Transcript(session_id="", events=(), duration=0.0)

    header_no, header_line = lines[0]
    header = _load_json_line(header_line, header_no)
    if not isinstance(header, dict) or "session_id" not in header:
        raise ParseError("first line must be a session header with 'session_id'", header_no)

    events = []
    for line_no, line in lines[1:]:
        rec = _load_json_line(line, line_no)
        if not isinstance(rec, dict):
            raise ParseError("event record must be a JSON object", line_no)
        try:
            events.append(TranscriptEvent.from_record(rec))
        except ValidationError:
            raise
        except KeyError as exc:
            raise ParseError(f"missing key {exc.args[0]!r}", line_no) from None
        except (TypeError, ValueError) as exc:
            raise ParseError(str(exc), line_no) from None

    if header.get("duration") is not None:
        try:
            duration = float(header["duration"])
        except (TypeError, ValueError):
            raise ParseError("header 'duration' is not a number", header_no) from None
    else:
        duration = max((ev.t_end for ev in events), default=0.0)
    family = header.get("family_id")
    return Transcript(
        session_id=str(header["session_id"]),
        events=tuple(events),
        duration=duration,
        family_id=None if family is None else str(family),
    )


def _load_json_line(line: str, line_no: int) -> Any:
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", line_no) from None


def serialize_transcript(transcript: Transcript) -> bytes:
    lines = [json.dumps(transcript.header(), ensure_ascii=False)]
    lines.extend(json.dumps(ev.to_record(), ensure_ascii=False) for ev in transcript.events)
    return ("\n".join(lines) + "\n").encode("utf-8")


@dataclass(frozen=True)
class GoldSegment:
    t_start: float
    t_end: float
    label: StrategyLabel
    core_span: tuple[float, float] | None = None
    notes: str | None = None

    def __post_init__(self) -> None:
        if self.t_end <= self.t_start:
            raise ValidationError(f"gold segment t_end {self.t_end} <= t_start {self.t_start}")
        if self.core_span is not None:
            cs, ce = self.core_span
            if ce < cs or cs < self.t_start or ce > self.t_end:
                raise ValidationError(
                    f"core span ({cs}, {ce}) not within segment ({self.t_start}, {self.t_end})"
                )

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"t_start": _ms(self.t_start), "t_end": _ms(self.t_end), "label": self.label.value}
        if self.core_span is not None:
            rec["core_start"], rec["core_end"] = _ms(self.core_span[0]), _ms(self.core_span[1])
        if self.notes:
            rec["notes"] = self.notes
        return rec


@dataclass(frozen=True)
class SkipWarning:
    index: int
    reason: str

    def __str__(self) -> str:
        return f"record {self.index}: {self.reason}"


def parse_gold(data: bytes | str) -> tuple[list[GoldSegment], list[SkipWarning]]:
    """Parse a gold annotation file (a JSON array of segment objects).

    Incomplete records (missing label or boundary, unknown label, invalid
    span) are skipped and reported; only an unreadable file raises.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(records, list):
        raise ParseError("gold annotation file must be a JSON array")

    golds: list[GoldSegment] = []
    warnings: list[SkipWarning] = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            warnings.append(SkipWarning(i, "record is not an object"))
            continue
        reason = _gold_problem(rec)
        if reason:
            warnings.append(SkipWarning(i, reason))
            continue
        core = None
        if rec.get("core_start") is not None and rec.get("core_end") is not None:
            core = (float(rec["core_start"]), float(rec["core_end"]))
        try:
            golds.append(
                GoldSegment(
                    t_start=float(rec["t_start"]),
                    t_end=float(rec["t_end"]),
                    label=StrategyLabel.parse(rec["label"]),
                    core_span=core,
                    notes=rec.get("notes"),
                )
            )
        except (ValidationError, TypeError, ValueError) as exc:
            warnings.append(SkipWarning(i, str(exc)))
    return golds, warnings


def _gold_problem(rec: dict[str, Any]) -> str | None:
    label = rec.get("label")
    if label is None or (isinstance(label, str) and not label.strip()):
        return "missing label"
    for key in ("t_start", "t_end"):
        if rec.get(key) is None:
            return f"missing boundary {key}"
    try:
        StrategyLabel.parse(label)
    except ValueError:
        return f"unknown label {label!r}"
    return None


def serialize_gold(golds: Iterable[GoldSegment]) -> bytes:
    return json.dumps([g.to_record() for g in golds], indent=2).encode("utf-8")


@dataclass(frozen=True)
class PredictedSegment:
    t_start: float
    t_end: float
    label: StrategyLabel
    candidate_id: str = ""
    trace: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.t_end <= self.t_start:
            raise ValidationError(f"predicted segment t_end {self.t_end} <= t_start {self.t_start}")

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def to_record(self) -> dict[str, Any]:
        return {
            "t_start": _ms(self.t_start),
            "t_end": _ms(self.t_end),
            "label": self.label.value,
            "candidate_id": self.candidate_id,
            "trace": list(self.trace),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "PredictedSegment":
        return cls(
            t_start=float(rec["t_start"]),
            t_end=float(rec["t_end"]),
            label=StrategyLabel.parse(rec["label"]),
            candidate_id=str(rec.get("candidate_id", "")),
            trace=tuple(rec.get("trace", ())),
        )


@dataclass(frozen=True)
class ClipWindow:
    index: int
    t_start: float
    t_end: float


def chunk_session(duration: float, clip_len: float = 15.0) -> list[ClipWindow]:
    """Tile ``[0, duration]`` with consecutive windows of ``clip_len`` seconds.

    The last window absorbs the remainder and ends exactly at ``duration``.
    """
    if clip_len <= 0:
        raise ConfigError(f"clip_len must be > 0, got {clip_len}")
    if duration < 0:
        raise ConfigError(f"duration must be >= 0, got {duration}")
    if duration == 0:
        return []
    n = math.ceil(duration / clip_len)
    windows = []
    for i in range(n):
        start = i * clip_len
        end = duration if i == n - 1 else (i + 1) * clip_len
        windows.append(ClipWindow(i, start, end))
    return windows
