"""Structured book context: recurring sentence frames and target words.

Inferred from caregiver speech alone. An optional judgment backend may add a
title guess and extra target words but never removes rule-derived entries.
"""

from __future__ import annotations

import logging
import string
from collections import Counter, defaultdict
from dataclasses import dataclass
from difflib import SequenceMatcher
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Sequence

from .datamodel import Transcript
from .errors import BackendError

logger = logging.getLogger(__name__)

SLOT = "<X>"
_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def parse_stopwords(text: str) -> frozenset[str]:
    """One word per line; blank lines and ``#`` comments are ignored."""
    return frozenset(w for ln in text.splitlines() if (w := ln.strip().lower()) and not w.startswith("#"))


@lru_cache(maxsize=1)
def default_stopwords() -> frozenset[str]:
    return parse_stopwords(resources.files("interlens").joinpath("data/stopwords.txt").read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SentenceFrame:
    """A recurring carrier phrase.

    ``pattern`` is a token tuple in which every :data:`SLOT` takes the same
    filler within one utterance. Slotted frames match whole utterances;
    slotless frames match any utterance containing the token run.
    """

    pattern: tuple[str, ...]
    support: int
    example_fillers: tuple[str, ...] = ()

    @property
    def has_slot(self) -> bool:
        return SLOT in self.pattern

    @property
    def text(self) -> str:
        return " ".join(self.pattern)

    def match(self, tokens: Sequence[str]) -> str | None:
        """Return the slot filler ("" for slotless frames) if ``tokens`` instantiates the frame."""
        if not self.has_slot:
            return "" if _contains(tokens, self.pattern) else None
        return _instantiate(self.pattern, tokens)

    def cutoff_match(self, tokens: Sequence[str], min_literals: int = 2) -> bool:
        """True if ``tokens`` is an unfinished instance: a proper prefix of the frame.

        The prefix must carry at least ``min_literals`` literal tokens.
        """
        for k in range(len(self.pattern) - 1, 0, -1):
            prefix = self.pattern[:k]
            if sum(tok != SLOT for tok in prefix) < min_literals:
                break
            if SLOT in prefix:
                if _instantiate(prefix, tokens) is not None:
                    return True
            elif tuple(tokens) == prefix:
                return True
        return False

    def to_dict(self) -> dict[str, Any]:
        return {"pattern": list(self.pattern), "support": self.support, "example_fillers": list(self.example_fillers)}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SentenceFrame":
        return cls(tuple(doc["pattern"]), int(doc["support"]), tuple(doc.get("example_fillers", ())))


@dataclass(frozen=True)
class TargetWord:
    surface: str
    count: int
    in_frame_slot: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"surface": self.surface, "count": self.count, "in_frame_slot": self.in_frame_slot}


@dataclass(frozen=True)
class BookContext:
    frames: tuple[SentenceFrame, ...] = ()
    targets: tuple[TargetWord, ...] = ()
    title_guess: str | None = None

    @property
    def target_set(self) -> frozenset[str]:
        return frozenset(t.surface for t in self.targets)

    def frame_match(self, tokens: Sequence[str]) -> SentenceFrame | None:
        for frame in self.frames:
            if frame.match(tokens) is not None:
                return frame
        return None

    def frame_cutoff(self, tokens: Sequence[str]) -> SentenceFrame | None:
        for frame in self.frames:
            if frame.cutoff_match(tokens):
                return frame
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "frames": [f.to_dict() for f in self.frames],
            "targets": [t.to_dict() for t in self.targets],
            "title_guess": self.title_guess,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "BookContext":
        return cls(
            frames=tuple(SentenceFrame.from_dict(f) for f in doc.get("frames", ())),
            targets=tuple(TargetWord(t["surface"], int(t["count"]), bool(t.get("in_frame_slot", False))) for t in doc.get("targets", ())),
            title_guess=doc.get("title_guess"),
        )


def _contains(tokens: Sequence[str], run: Sequence[str]) -> bool:
    n = len(run)
    run = tuple(run)
    return any(tuple(tokens[i:i + n]) == run for i in range(len(tokens) - n + 1))


def _instantiate(pattern: Sequence[str], tokens: Sequence[str]) -> str | None:
    n_slots = sum(tok == SLOT for tok in pattern)
    n_lits = len(pattern) - n_slots
    extra = len(tokens) - n_lits
    if n_slots == 0 or extra <= 0 or extra % n_slots:
        return None
    width = extra // n_slots
    first = list(pattern).index(SLOT)
    filler = list(tokens[first:first + width])
    expanded: list[str] = []
    for tok in pattern:
        if tok == SLOT:
            expanded.extend(filler)
        else:
            expanded.append(tok)
    return " ".join(filler) if expanded == list(tokens) else None


def _longest_literal_run(pattern: Sequence[str]) -> int:
    best = run = 0
    for tok in pattern:
        run = 0 if tok == SLOT else run + 1
        best = max(best, run)
    return best


def _periodic(region: Sequence[str], k: int) -> tuple[str, ...] | None:
    if len(region) % k:
        return None
    width = len(region) // k
    unit = tuple(region[:width])
    return unit if all(tuple(region[i * width:(i + 1) * width]) == unit for i in range(k)) else None


def _pair_template(u: Sequence[str], v: Sequence[str]) -> tuple[str, ...] | None:
    """Generalize two utterances into a single-filler template, or None."""
    out: list[str] = []
    fill_u = fill_v = None
    for op, i1, i2, j1, j2 in SequenceMatcher(None, u, v, autojunk=False).get_opcodes():
        if op == "equal":
            out.extend(u[i1:i2])
            continue
        ru, rv = u[i1:i2], v[j1:j2]
        if not ru or not rv:
            return None
        for k in range(min(len(ru), len(rv)), 0, -1):
            fu, fv = _periodic(ru, k), _periodic(rv, k)
            if fu is not None and fv is not None:
                break
        if fill_u is None:
            fill_u, fill_v = fu, fv
        elif (fu, fv) != (fill_u, fill_v):
            return None
        out.extend([SLOT] * k)
    return tuple(out) if fill_u is not None else None


def _fragment_of(pattern: Sequence[str], run: Sequence[str]) -> bool:
    """True if ``run`` is a contiguous piece of ``pattern`` under some filler drawn from ``run``."""
    for width in range(1, len(run) + 1):
        for start in range(len(run) - width + 1):
            filler = list(run[start:start + width])
            expanded = [t for tok in pattern for t in (filler if tok == SLOT else [tok])]
            if _contains(expanded, run):
                return True
    return False


def _ngrams(tokens: Sequence[str], n: int) -> Iterable[tuple[str, ...]]:
    for i in range(len(tokens) - n + 1):
        yield tuple(tokens[i:i + n])


def extract_frames(transcript: Transcript, min_frame_len: int = 4, min_support: int = 2) -> list[SentenceFrame]:
    """Mine recurring carrier phrases from caregiver speech.

    Two kinds of frame come out: maximal repeated token runs (slotless,
    support = utterances containing the run) and single-filler templates
    generalized from utterance pairs (support = utterances matching the
    whole template). A template needs a literal run of at least
    ``min_frame_len`` tokens. Slotless runs that are fragments of a template
    and that also appear in a template's own utterances are dropped.
    """
    utts = [toks for ev in transcript.caregiver_speech() if (toks := tokenize(ev.text))]
    if not utts:
        return []

    # slotless: closed repeated n-grams
    holders: dict[tuple[str, ...], set[int]] = defaultdict(set)
    for idx, toks in enumerate(utts):
        for n in range(min_frame_len, len(toks) + 1):
            for g in _ngrams(toks, n):
                holders[g].add(idx)
    frequent = {g: ids for g, ids in holders.items() if len(ids) >= min_support}
    not_closed: set[tuple[str, ...]] = set()
    for g, ids in frequent.items():
        if len(g) > min_frame_len:
            for sub in (g[:-1], g[1:]):
                if len(frequent.get(sub, ())) == len(ids):
                    not_closed.add(sub)
    slotless = {g: ids for g, ids in frequent.items() if g not in not_closed}

    # slotted: templates from pairs sharing a seed run
    seeds: dict[tuple[str, ...], set[int]] = defaultdict(set)
    for idx, toks in enumerate(utts):
        for g in _ngrams(toks, min_frame_len):
            seeds[g].add(idx)
    pairs = set()
    for ids in seeds.values():
        ordered = sorted(ids)
        for a_pos, a in enumerate(ordered):
            for b in ordered[a_pos + 1:]:
                if utts[a] != utts[b]:
                    pairs.add((a, b))
    templates = set()
    for a, b in sorted(pairs):
        tpl = _pair_template(utts[a], utts[b])
        if tpl is not None and _longest_literal_run(tpl) >= min_frame_len:
            templates.add(tpl)

    frames: list[SentenceFrame] = []
    slotted_support: list[tuple[tuple[str, ...], set[int]]] = []
    for tpl in templates:
        ids, fillers = set(), set()
        for idx, toks in enumerate(utts):
            filler = _instantiate(tpl, toks)
            if filler is not None:
                ids.add(idx)
                fillers.add(filler)
        if len(ids) >= min_support and len(fillers) >= 2:
            frames.append(SentenceFrame(tpl, len(ids), tuple(sorted(fillers))))
            slotted_support.append((tpl, ids))

    for g, ids in slotless.items():
        if any(ids & sup and _fragment_of(tpl, g) for tpl, sup in slotted_support):
            continue
        frames.append(SentenceFrame(g, len(ids)))

    frames.sort(key=lambda f: (-f.support, -len(f.pattern), f.pattern))
    return frames


def extract_targets(
    transcript: Transcript,
    min_word_count: int = 3,
    frames: Sequence[SentenceFrame] | None = None,
    stopwords: Iterable[str] | None = None,
) -> list[TargetWord]:
    """Frequent caregiver content words; slot-filler words rank first at equal count."""
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    if frames is None:
        frames = extract_frames(transcript)
    slot_words = {w for f in frames for filler in f.example_fillers for w in filler.split()}
    counts = Counter(
        tok for ev in transcript.caregiver_speech() for tok in tokenize(ev.text) if tok not in stop
    )
    targets = [TargetWord(w, c, w in slot_words) for w, c in counts.items() if c >= min_word_count]
    targets.sort(key=lambda t: (-t.count, not t.in_frame_slot, t.surface))
    return targets


def build_book_context(
    transcript: Transcript,
    backend=None,
    *,
    min_frame_len: int = 4,
    min_support: int = 2,
    min_word_count: int = 3,
    stopwords: Iterable[str] | None = None,
) -> BookContext:
    frames = extract_frames(transcript, min_frame_len, min_support)
    targets = extract_targets(transcript, min_word_count, frames, stopwords)
    ctx = BookContext(tuple(frames), tuple(targets))
    if backend is None or not frames and not targets:
        return ctx
    try:
        answer = backend.judge(
            {
                "task": "book_context",
                "question": "Which book is being read, and which further target words does the caregiver emphasize?",
                "book_context": ctx.to_dict(),
            }
        )
    except BackendError as exc:
        logger.warning("book-context judgment unavailable, using rule-derived context: %s", exc)
        return ctx
    return _merge_judgment(transcript, ctx, answer, stopwords)


def _merge_judgment(transcript: Transcript, ctx: BookContext, answer: dict[str, Any], stopwords) -> BookContext:
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    counts = Counter(tok for ev in transcript.caregiver_speech() for tok in tokenize(ev.text))
    slot_words = {w for f in ctx.frames for filler in f.example_fillers for w in filler.split()}
    known = ctx.target_set
    extra = []
    for raw in answer.get("targets", ()):
        for word in tokenize(raw):
            if word not in known and word not in stop:
                known = known | {word}
                extra.append(TargetWord(word, counts.get(word, 0), word in slot_words))
    targets = sorted(ctx.targets + tuple(extra), key=lambda t: (-t.count, not t.in_frame_slot, t.surface))
    title = answer.get("title_guess") or ctx.title_guess
    return BookContext(ctx.frames, tuple(targets), title)
