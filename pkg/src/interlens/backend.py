"""Inference backends: text embedding, clip perception and structured judgment.

Every backend implements :meth:`Backend.request`; the public ``embed``,
``perceive_clip`` and ``judge`` wrappers do the validation and
post-processing, so callers see identical behavior whatever the source.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import string
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import httpx
import jsonschema
import numpy as np

from .datamodel import ClipWindow, Transcript, TranscriptEvent
from .errors import (
    BackendError,
    ConfigError,
    FixtureMissError,
    JudgmentError,
    RetriableBackendError,
    ValidationError,
)

logger = logging.getLogger(__name__)


class RequestKind(str, enum.Enum):
    PERCEIVE_CLIP = "perceive_clip"
    EMBED = "embed"
    JUDGE = "judge"


class ResponseSource(str, enum.Enum):
    REPLAY = "replay"
    MOCK = "mock"
    REMOTE = "remote"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class InferenceRequest:
    kind: RequestKind
    payload: Any

    @property
    def request_key(self) -> str:
        doc = canonical_json({"kind": self.kind.value, "payload": self.payload})
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class InferenceResponse:
    kind: RequestKind
    payload: Any
    latency: float = 0.0
    source: ResponseSource = ResponseSource.MOCK


@dataclass(frozen=True)
class ClipDescriptor:
    session_id: str
    window: ClipWindow
    media: str | None = None

    def payload(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "session_id": self.session_id,
            "index": self.window.index,
            "t_start": round(self.window.t_start, 3),
            "t_end": round(self.window.t_end, 3),
        }
        if self.media:
            doc["media"] = self.media
        return doc


JUDGE_QUERY_SCHEMA = {
    "type": "object",
    "required": ["task", "question"],
    "properties": {
        "task": {"type": "string", "minLength": 1},
        "question": {"type": "string", "minLength": 1},
        "candidate": {"type": "object"},
        "book_context": {"type": "object"},
    },
}

JUDGE_RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "verdict": {"enum": ["accept", "reject", "abstain"]},
        "rationale": {"type": "string"},
        "title_guess": {"type": ["string", "null"]},
        "targets": {"type": "array", "items": {"type": "string"}},
    },
    "minProperties": 1,
}


class Backend:
    """Base class. Subclasses provide :meth:`request` and a ``source``."""

    source: ResponseSource

    def __init__(self) -> None:
        self._dim: int | None = None

    def request(self, req: InferenceRequest) -> InferenceResponse:
        raise NotImplementedError

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValidationError("cannot embed empty text")
        resp = self.request(InferenceRequest(RequestKind.EMBED, {"text": text}))
        try:
            vec = np.asarray(resp.payload, dtype=float).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise BackendError(f"embedding response is not a vector: {exc}") from exc
        norm = float(np.linalg.norm(vec))
        if vec.size == 0 or not np.isfinite(norm) or norm == 0:
            raise BackendError("embedding response is empty or zero")
        if self._dim is None:
            self._dim = vec.size
        elif vec.size != self._dim:
            raise BackendError(f"embedding dimension changed from {self._dim} to {vec.size}")
        return vec / norm

    def perceive_clip(self, descriptor: ClipDescriptor) -> list[TranscriptEvent]:
        resp = self.request(InferenceRequest(RequestKind.PERCEIVE_CLIP, descriptor.payload()))
        if not isinstance(resp.payload, list):
            raise BackendError("perception response must be a list of event records")
        events = []
        for rec in resp.payload:
            try:
                ev = TranscriptEvent.from_record(rec)
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendError(f"malformed perception event: {exc}") from exc
            clipped = clip_event(ev, descriptor.window)
            if clipped is not None:
                events.append(clipped)
        return events

    def judge(self, query: dict[str, Any]) -> dict[str, Any]:
        try:
            jsonschema.validate(query, JUDGE_QUERY_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise JudgmentError(f"judgment query invalid: {exc.message}") from exc
        resp = self.request(InferenceRequest(RequestKind.JUDGE, query))
        return validate_judgment(resp.payload)


def validate_judgment(payload: Any) -> dict[str, Any]:
    if isinstance(payload, str):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError:
            raise JudgmentError("judgment response is free text, not a structured document") from None
    try:
        jsonschema.validate(payload, JUDGE_RESPONSE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise JudgmentError(f"judgment response violates schema: {exc.message}") from exc
    return payload


def clip_event(ev: TranscriptEvent, window: ClipWindow) -> TranscriptEvent | None:
    """Restrict ``ev`` to ``window``; flag cut edges in ``notes``. Returns None if disjoint."""
    if ev.t_end <= window.t_start or ev.t_start >= window.t_end:
        return None
    start, end, notes = ev.t_start, ev.t_end, []
    if ev.t_start < window.t_start:
        start = window.t_start
        notes.append("continued")
    if ev.t_end > window.t_end:
        end = window.t_end
        notes.append("continues")
    if not notes:
        return ev
    if ev.notes:
        notes.insert(0, ev.notes)
    return TranscriptEvent(
        id=ev.id, speaker=ev.speaker, channel=ev.channel, text=ev.text, t_start=start, t_end=end,
        source=ev.source, confidence=ev.confidence, notes=";".join(notes),
    )


_PUNCT = str.maketrans("", "", string.punctuation)


def hashed_ngram_embedding(text: str, dim: int = 1024, orders: tuple[int, ...] = (1, 2, 3)) -> np.ndarray:
    """Unit vector of hashed character n-gram counts over normalized text.

    Lowercases and strips punctuation first, so ASR/perception formatting
    differences do not move the vector.
    """
    norm = " " + " ".join(text.lower().translate(_PUNCT).split()) + " "
    vec = np.zeros(dim)
    for n in orders:
        for i in range(len(norm) - n + 1):
            digest = hashlib.blake2b(f"{n}:{norm[i:i + n]}".encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "little") % dim] += 1.0
    total = np.linalg.norm(vec)
    return vec / total if total else vec


class MockBackend(Backend):
    """Offline backend.

    Embeddings come from :func:`hashed_ngram_embedding`. Perception slices a
    supplied transcript; judgment returns a fixed accepting document.
    """

    source = ResponseSource.MOCK

    def __init__(self, dim: int = 1024, transcripts: dict[str, Transcript] | None = None):
        super().__init__()
        self.dim = dim
        self.transcripts = dict(transcripts or {})

    def request(self, req: InferenceRequest) -> InferenceResponse:
        if req.kind is RequestKind.EMBED:
            payload: Any = hashed_ngram_embedding(req.payload["text"], self.dim).tolist()
        elif req.kind is RequestKind.PERCEIVE_CLIP:
            sid = req.payload["session_id"]
            if sid not in self.transcripts:
                raise FixtureMissError(req.request_key, f"mock transcripts (session {sid!r})")
            lo, hi = req.payload["t_start"], req.payload["t_end"]
            payload = [ev.to_record() for ev in self.transcripts[sid].events if ev.t_end > lo and ev.t_start < hi]
        else:
            payload = {"verdict": "accept", "rationale": "mock backend accepts by default"}
        return InferenceResponse(req.kind, payload, 0.0, self.source)


class ReplayBackend(Backend):
    """Serves frozen responses from ``{fixture_dir}/{request_key}.json``."""

    source = ResponseSource.REPLAY

    def __init__(self, fixture_dir: str | os.PathLike):
        super().__init__()
        self.fixture_dir = Path(fixture_dir)

    def request(self, req: InferenceRequest) -> InferenceResponse:
        path = self.fixture_dir / f"{req.request_key}.json"
        if not path.is_file():
            raise FixtureMissError(req.request_key, str(self.fixture_dir))
        t0 = time.perf_counter()
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("kind") != req.kind.value:
            raise BackendError(f"fixture {path.name} holds a {doc.get('kind')!r} response, expected {req.kind.value!r}")
        return InferenceResponse(req.kind, doc["payload"], time.perf_counter() - t0, self.source)


def write_fixture(fixture_dir: str | os.PathLike, req: InferenceRequest, payload: Any) -> Path:
    """Atomically write one replay fixture."""
    fixture_dir = Path(fixture_dir)
    fixture_dir.mkdir(parents=True, exist_ok=True)
    target = fixture_dir / f"{req.request_key}.json"
    doc = {"kind": req.kind.value, "request": req.payload, "payload": payload}
    fd, tmp = tempfile.mkstemp(dir=fixture_dir, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, ensure_ascii=False)
    os.replace(tmp, target)
    return target


class RecordingBackend(Backend):
    """Wraps another backend and freezes every response as a replay fixture."""

    def __init__(self, inner: Backend, fixture_dir: str | os.PathLike):
        super().__init__()
        self.inner = inner
        self.fixture_dir = Path(fixture_dir)
        self.source = inner.source
        self._lock = threading.Lock()

    def request(self, req: InferenceRequest) -> InferenceResponse:
        resp = self.inner.request(req)
        with self._lock:
            write_fixture(self.fixture_dir, req, resp.payload)
        return resp


class RemoteBackend(Backend):
    """HTTP backend: POSTs ``{"model", "options", "payload"}`` to ``{base_url}/{kind}``.

    The service must answer with ``{"payload": ...}``. Transport failures,
    timeouts and 5xx responses are retried with exponential backoff.
    """

    source = ResponseSource.REMOTE

    def __init__(
        self,
        base_url: str,
        *,
        models: dict[str, str] | None = None,
        options: dict[str, Any] | None = None,
        token_env: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 2.0,
        base_delay: float = 0.5,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__()
        if not base_url:
            raise ConfigError("remote backend requires base_url")
        headers = {}
        if token_env:
            token = os.environ.get(token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self.models = dict(models or {})
        self.options = dict(options or {})
        self.retries = retries
        self.backoff = backoff
        self.base_delay = base_delay
        self._sleep = sleep
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def request(self, req: InferenceRequest) -> InferenceResponse:
        body = {"model": self.models.get(req.kind.value), "options": self.options, "payload": req.payload}
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.base_delay * self.backoff ** (attempt - 1))
            t0 = time.perf_counter()
            try:
                r = self._client.post(f"/{req.kind.value}", json=body)
            except httpx.HTTPError as exc:
                last_exc = exc
                logger.warning("remote %s attempt %d failed: %s", req.kind.value, attempt + 1, exc)
                continue
            if r.status_code >= 500:
                last_exc = BackendError(f"HTTP {r.status_code}")
                logger.warning("remote %s attempt %d: HTTP %d", req.kind.value, attempt + 1, r.status_code)
                continue
            if r.status_code >= 400:
                raise BackendError(f"remote {req.kind.value} rejected request: HTTP {r.status_code}")
            return InferenceResponse(req.kind, self._decode(req, r), time.perf_counter() - t0, self.source)
        raise RetriableBackendError(f"remote {req.kind.value} failed after {self.retries + 1} attempts: {last_exc}")

    @staticmethod
    def _decode(req: InferenceRequest, r: httpx.Response) -> Any:
        try:
            doc = r.json()
        except ValueError:
            if req.kind is RequestKind.JUDGE:
                # free-text judgment; the schema gate in judge() rejects it
                return r.text
            raise BackendError(f"remote {req.kind.value} returned non-JSON body") from None
        if not isinstance(doc, dict) or "payload" not in doc:
            if req.kind is RequestKind.JUDGE:
                return doc
            raise BackendError(f"remote {req.kind.value} response lacks 'payload'")
        return doc["payload"]

    def close(self) -> None:
        self._client.close()


@dataclass
class BackendConfig:
    kind: str = "mock"
    fixture_dir: str | None = None
    record_dir: str | None = None
    base_url: str | None = None
    token_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    models: dict[str, str] = field(default_factory=dict)
    options: dict[str, Any] = field(default_factory=dict)


def make_backend(cfg: BackendConfig, transcripts: dict[str, Transcript] | None = None) -> Backend:
    if cfg.kind == "mock":
        backend: Backend = MockBackend(transcripts=transcripts)
    elif cfg.kind == "replay":
        if not cfg.fixture_dir:
            raise ConfigError("replay backend requires fixture_dir")
        backend = ReplayBackend(cfg.fixture_dir)
    elif cfg.kind == "remote":
        backend = RemoteBackend(
            cfg.base_url or "", models=cfg.models, options=cfg.options, token_env=cfg.token_env,
            timeout=cfg.timeout, retries=cfg.retries,
        )
    else:
        raise ConfigError(f"unknown backend kind {cfg.kind!r}")
    if cfg.record_dir:
        backend = RecordingBackend(backend, cfg.record_dir)
    return backend
