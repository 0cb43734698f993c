"""Batch orchestration: manifest loading, per-session processing, output files.

A manifest is a JSON document::

    {"sessions": [
        {"session_id": "s01", "transcript": "s01.jsonl", "asr": "s01_asr.jsonl", "gold": "s01_gold.json"},
        {"session_id": "s02", "clips": "s02_clips.json"}
    ]}

Paths are relative to the manifest's directory. ``clips`` names a small JSON
document ``{"duration": seconds, "media": "...", "reference": "transcript.jsonl"}``
whose windows are sent to the perception backend; ``reference`` only feeds
the mock backend. Every path is checked before any session runs, and output
files are written only after all sessions succeed.
"""

from __future__ import annotations

import json
import logging
import os
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .align import AlignmentPair, align_transcripts
from .backend import Backend, ClipDescriptor, make_backend
from .bookctx import BookContext, build_book_context
from .config import PipelineConfig
from .datamodel import (
    GoldSegment,
    PredictedSegment,
    SkipWarning,
    Transcript,
    TranscriptEvent,
    chunk_session,
    parse_gold,
    parse_transcript,
    serialize_transcript,
)
from .errors import InputError, ManifestError
from .evaluation import EvalReport, RunAggregate, aggregate_runs, evaluate_sessions
from .experts import run_detection
from .knowledge import KnowledgeBase, default_knowledge_base
from .refine import TrainingSession
from .scanner import candidate_record, scan_candidates

logger = logging.getLogger(__name__)

_EDGE_NOTES = ("continues", "continued")


@dataclass(frozen=True)
class SessionSpec:
    session_id: str
    transcript: Path | None = None
    clips: Path | None = None
    asr: Path | None = None
    gold: Path | None = None


@dataclass
class SessionOutput:
    session_id: str
    transcript: Transcript
    book_ctx: BookContext
    predictions: list[PredictedSegment]
    golds: list[GoldSegment] | None = None
    gold_warnings: list[SkipWarning] = field(default_factory=list)
    pairs: list[AlignmentPair] = field(default_factory=list)
    candidates: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class RunResult:
    outputs: list[list[SessionOutput]]
    reports: list[EvalReport]
    aggregate: RunAggregate | None
    written: list[Path]


def read_input(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def load_transcript(path: str | Path) -> Transcript:
    path = Path(path)
    try:
        return parse_transcript(read_input(path))
    except InputError as exc:
        wrapped = type(exc)(f"{path}: {exc}")
        wrapped.__dict__.update(exc.__dict__)
        raise wrapped from exc


def load_gold(path: str | Path) -> tuple[list[GoldSegment], list[SkipWarning]]:
    path = Path(path)
    golds, warnings = parse_gold(read_input(path))
    for w in warnings:
        logger.warning("%s: skipped gold record %d: %s", path, w.index, w.reason)
    return golds, warnings


def load_manifest(path: str | Path) -> list[SessionSpec]:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    try:
        doc = json.loads(read_input(path))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("sessions"), list):
        raise ManifestError(f"{path}: expected an object with a 'sessions' list")
    base = path.parent
    specs: list[SessionSpec] = []
    seen: set[str] = set()
    for i, entry in enumerate(doc["sessions"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("session_id"), str) or not entry["session_id"]:
            raise ManifestError(f"{path}: session {i} needs a non-empty session_id")
        sid = entry["session_id"]
        if sid in seen:
            raise ManifestError(f"{path}: duplicate session_id {sid!r}")
        seen.add(sid)
        if ("transcript" in entry) == ("clips" in entry):
            raise ManifestError(f"{path}: session {sid!r} needs exactly one of 'transcript' or 'clips'")
        resolved: dict[str, Path] = {}
        for key in ("transcript", "clips", "asr", "gold"):
            if entry.get(key) is None:
                continue
            p = base / entry[key]
            if not p.is_file():
                raise ManifestError(f"session {sid!r}: {key} file not found: {p}")
            resolved[key] = p
        specs.append(SessionSpec(sid, **resolved))
    return sorted(specs, key=lambda s: s.session_id)


def _read_clips(spec: SessionSpec) -> tuple[float, str | None, Transcript | None]:
    assert spec.clips is not None
    try:
        doc = json.loads(read_input(spec.clips))
        duration = float(doc["duration"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{spec.clips}: clip document needs a numeric 'duration' ({exc})") from exc
    reference = None
    if doc.get("reference"):
        ref_path = spec.clips.parent / doc["reference"]
        if not ref_path.is_file():
            raise ManifestError(f"session {spec.session_id!r}: reference file not found: {ref_path}")
        reference = load_transcript(ref_path)
    return duration, doc.get("media"), reference


def perceive_session(
    session_id: str, duration: float, backend: Backend, clip_len: float = 15.0, media: str | None = None
) -> Transcript:
    """Run perception window by window and stitch events cut at window edges back together."""
    pieces: dict[str, list[TranscriptEvent]] = {}
    for window in chunk_session(duration, clip_len):
        for ev in backend.perceive_clip(ClipDescriptor(session_id, window, media)):
            pieces.setdefault(ev.id, []).append(ev)
    events = []
    for parts in pieces.values():
        first = parts[0]
        notes = ";".join(n for n in first.notes.split(";") if n and n not in _EDGE_NOTES)
        events.append(
            TranscriptEvent(
                id=first.id, speaker=first.speaker, channel=first.channel, text=first.text,
                t_start=min(p.t_start for p in parts), t_end=max(p.t_end for p in parts),
                source=first.source, confidence=first.confidence, notes=notes,
            )
        )
    return Transcript(session_id, tuple(events), duration)


def _mock_references(specs: Sequence[SessionSpec]) -> dict[str, Transcript]:
    refs = {}
    for spec in specs:
        if spec.clips is not None:
            _, _, ref = _read_clips(spec)
            if ref is not None:
                refs[spec.session_id] = ref
    return refs


def process_session(
    spec: SessionSpec,
    cfg: PipelineConfig,
    kb: KnowledgeBase,
    backend: Backend,
    rng: random.Random | None = None,
    keep_candidates: bool = False,
) -> SessionOutput:
    if spec.transcript is not None:
        transcript = load_transcript(spec.transcript)
    else:
        duration, media, _ = _read_clips(spec)
        transcript = perceive_session(spec.session_id, duration, backend, cfg.clip_len, media)
    if transcript.session_id and transcript.session_id != spec.session_id:
        logger.warning("transcript session_id %r differs from manifest %r", transcript.session_id, spec.session_id)

    pairs: list[AlignmentPair] = []
    if spec.asr is not None:
        asr = load_transcript(spec.asr)
        transcript, pairs = align_transcripts(transcript, asr, backend.embed, cfg.align_config())

    judge = backend if cfg.judge else None
    book_ctx = build_book_context(transcript, judge, stopwords=cfg.stopwords())
    predictions = run_detection(transcript, book_ctx, kb, judge=judge, rng=rng)
    candidates = []
    if keep_candidates:
        candidates = [candidate_record(c) for c in scan_candidates(transcript, book_ctx, kb.scan_config())]

    golds, warnings = (None, [])
    if spec.gold is not None:
        golds, warnings = load_gold(spec.gold)
    logger.info("session %s: %d predictions", spec.session_id, len(predictions))
    return SessionOutput(spec.session_id, transcript, book_ctx, predictions, golds, warnings, pairs, candidates)


def dumps(doc: Any) -> bytes:
    """Canonical JSON bytes: sorted keys, fixed indentation, trailing newline."""
    return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def predictions_document(outputs: Sequence[SessionOutput]) -> dict[str, Any]:
    return {
        "sessions": [
            {"session_id": o.session_id, "predictions": [p.to_record() for p in o.predictions]}
            for o in sorted(outputs, key=lambda o: o.session_id)
        ]
    }


def read_predictions(path: str | Path) -> dict[str, list[PredictedSegment]]:
    """Read a predictions file; returns session id -> segments.

    Accepts the multi-session document, a single ``{"session_id", "predictions"}``
    object, or a bare list (keyed under the empty session id).
    """
    path = Path(path)
    try:
        doc = json.loads(read_input(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(doc, list):
        sessions = [{"session_id": "", "predictions": doc}]
    elif isinstance(doc, dict) and "sessions" in doc:
        sessions = doc["sessions"]
    elif isinstance(doc, dict) and "predictions" in doc:
        sessions = [doc]
    else:
        raise InputError(f"{path}: unrecognized predictions document")
    out: dict[str, list[PredictedSegment]] = {}
    for sess in sessions:
        try:
            out[sess.get("session_id", "")] = [PredictedSegment.from_record(r) for r in sess["predictions"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: malformed prediction record ({exc})") from exc
    return out


def _run_once(
    specs: Sequence[SessionSpec], cfg: PipelineConfig, kb: KnowledgeBase, backend: Backend,
    run_index: int, stochastic: bool, keep_candidates: bool,
) -> list[SessionOutput]:
    def task(spec: SessionSpec) -> SessionOutput:
        rng = random.Random(f"{cfg.seed}:{run_index}:{spec.session_id}") if stochastic else None
        return process_session(spec, cfg, kb, backend, rng, keep_candidates)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        # map preserves submission order, which is session-id order
        return list(pool.map(task, specs))


def run_end_to_end(
    manifest: str | Path,
    cfg: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
    kb: KnowledgeBase | None = None,
    *,
    runs: int = 1,
    stochastic: bool = False,
    keep_intermediates: bool = False,
    backend: Backend | None = None,
) -> RunResult:
    """Process every manifest session ``runs`` times; write predictions and, with gold, reports.

    Files (under ``out_dir``): ``predictions.json`` and ``report.json`` for a
    single run; ``predictions_run{k}.json``, ``report_run{k}.json`` and an
    aggregate ``report.json`` for several.
    """
    cfg = cfg or PipelineConfig()
    if runs < 1:
        raise ValueError("runs must be >= 1")
    kb = (kb or default_knowledge_base(cfg.detection_params())).validate()
    specs = load_manifest(manifest)
    if backend is None:
        backend = make_backend(cfg.backend_config(), _mock_references(specs))

    all_outputs = [_run_once(specs, cfg, kb, backend, k, stochastic, keep_intermediates) for k in range(runs)]

    reports: list[EvalReport] = []
    if all(o.golds is not None for o in all_outputs[0]) and specs:
        for outputs in all_outputs:
            reports.append(evaluate_sessions(((o.golds or [], o.predictions) for o in outputs), cfg.tol))
    elif any(o.golds is not None for o in all_outputs[0]):
        logger.warning("gold annotations missing for some sessions; skipping evaluation")
    aggregate = aggregate_runs(reports) if reports else None

    written: list[Path] = []
    if out_dir is not None:
        files: dict[Path, bytes] = {}
        out = Path(out_dir)
        for k, outputs in enumerate(all_outputs, start=1):
            name = "predictions.json" if runs == 1 else f"predictions_run{k}.json"
            files[out / name] = dumps(predictions_document(outputs))
        if reports:
            if runs == 1:
                files[out / "report.json"] = dumps(reports[0].to_dict())
            else:
                for k, rep in enumerate(reports, start=1):
                    files[out / f"report_run{k}.json"] = dumps(rep.to_dict())
                files[out / "report.json"] = dumps({"aggregate": aggregate.to_dict(), "headline": cfg.aggregation})
        if keep_intermediates:
            for o in all_outputs[0]:
                d = out / "intermediates" / o.session_id
                files[d / "merged.jsonl"] = serialize_transcript(o.transcript)
                files[d / "bookctx.json"] = dumps(o.book_ctx.to_dict())
                files[d / "candidates.json"] = dumps(o.candidates)
                files[d / "alignment.json"] = dumps([pair_record(p) for p in o.pairs])
        for path, data in files.items():
            write_atomic(path, data)
            written.append(path)
    return RunResult(all_outputs, reports, aggregate, written)


def pair_record(p: AlignmentPair) -> dict[str, Any]:
    return {
        "primary_event_id": p.primary_event_id,
        "asr_event_id": p.asr_event_id,
        "cosine_distance": round(p.cosine_distance, 6),
        "start_delta": round(p.start_delta, 3),
        "end_delta": round(p.end_delta, 3),
        "substituted": p.substituted,
    }


def load_training_corpus(manifest: str | Path, cfg: PipelineConfig | None = None) -> list[TrainingSession]:
    """Sessions for refinement: each needs gold; ASR merging is applied when listed."""
    cfg = cfg or PipelineConfig()
    specs = load_manifest(manifest)
    if not specs:
        raise ManifestError(f"{manifest}: training manifest lists no sessions")
    backend = None
    stopwords = cfg.stopwords()
    corpus = []
    for spec in specs:
        if spec.gold is None:
            raise ManifestError(f"session {spec.session_id!r}: training sessions need a gold file")
        if spec.transcript is not None:
            transcript = load_transcript(spec.transcript)
        else:
            backend = backend or make_backend(cfg.backend_config(), _mock_references(specs))
            duration, media, _ = _read_clips(spec)
            transcript = perceive_session(spec.session_id, duration, backend, cfg.clip_len, media)
        if spec.asr is not None:
            backend = backend or make_backend(cfg.backend_config(), _mock_references(specs))
            transcript, _ = align_transcripts(transcript, load_transcript(spec.asr), backend.embed, cfg.align_config())
        golds, _ = load_gold(spec.gold)
        book_ctx = build_book_context(transcript, stopwords=stopwords)
        corpus.append(TrainingSession(spec.session_id, transcript, tuple(golds), book_ctx))
    return corpus
