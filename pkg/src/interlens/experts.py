"""Strategy-specific experts: routing, verification, boundary refinement.

Each candidate goes to the expert named by its routing cue. Stage 1 accepts
it when every enabled Require rule holds and no Forbid rule does; Stage 2
snaps the accepted segment to turn edges and trims trailing caregiver turns
that the Trim rules mark as unrelated.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Sequence

from .bookctx import BookContext
from .datamodel import PredictedSegment, StrategyLabel, Transcript
from .errors import BackendError, KnowledgeBaseError
from .knowledge import (
    KnowledgeBase,
    Rule,
    RuleKind,
    Stage,
    evaluate_candidate_rule,
    evaluate_turn_rule,
)
from .scanner import Candidate, CandidatePattern, scan_candidates

logger = logging.getLogger(__name__)

OVERLAP_FRACTION = 0.5


@dataclass(frozen=True)
class Verdict:
    label: StrategyLabel | None
    reason: str | None
    fired_rules: tuple[str, ...] = ()
    require_hits: int = 0

    def __post_init__(self) -> None:
        if (self.label is None) == (self.reason is None):
            raise ValueError("a verdict is either Accept(label) or Reject(reason)")
        if self.reason is not None and not self.reason.strip():
            raise ValueError("reject reason must be non-empty")

    @property
    def accepted(self) -> bool:
        return self.label is not None

    @classmethod
    def accept(cls, label: StrategyLabel, fired: Sequence[str] = (), require_hits: int = 0) -> "Verdict":
        return cls(label, None, tuple(fired), require_hits)

    @classmethod
    def reject(cls, reason: str, fired: Sequence[str] = ()) -> "Verdict":
        return cls(None, reason, tuple(fired))


def route(candidate: Candidate) -> StrategyLabel:
    return candidate.cue.expert


def verify(expert: StrategyLabel, candidate: Candidate, kb: KnowledgeBase) -> Verdict:
    """Stage 1. Rules run in descending priority; the first violated rule gives the reject reason."""
    if not kb.rules_for(expert, Stage.VERIFY, enabled_only=False):
        raise KnowledgeBaseError(f"knowledge base has no verification rules for {expert.value}")
    fired: list[str] = []
    failure: Rule | None = None
    require_hits = 0
    for rule in kb.rules_for(expert, Stage.VERIFY):
        holds = evaluate_candidate_rule(rule, candidate, kb.params)
        if holds:
            fired.append(rule.id)
            if rule.kind is RuleKind.REQUIRE:
                require_hits += 1
        violated = (rule.kind is RuleKind.REQUIRE and not holds) or (rule.kind is RuleKind.FORBID and holds)
        if violated and failure is None:
            failure = rule
    if failure is not None:
        return Verdict.reject(failure.reason, fired)
    return Verdict.accept(expert, fired, require_hits)


def refine_boundaries(expert: StrategyLabel, candidate: Candidate, kb: KnowledgeBase) -> tuple[float, float]:
    return _refine(expert, candidate, kb)[:2]


def _refine(expert: StrategyLabel, candidate: Candidate, kb: KnowledgeBase) -> tuple[float, float, list[str]]:
    """Stage 2: returns (start, end, fired trim rule ids)."""
    stim = candidate.stimulus
    start = stim.t_start
    trims: list[str] = []
    if candidate.pattern is CandidatePattern.ATTEMPT:
        end = stim.t_end + kb.params["attempt_tail"]
        if candidate.session_duration > stim.t_end:
            end = min(end, candidate.session_duration)
    else:
        end = candidate.core_turns[-1].t_end
        trim_rules = kb.rules_for(expert, Stage.BOUNDARY)
        for turn, feats in zip(candidate.trailing, candidate.trailing_features):
            hit = [r.id for r in trim_rules if evaluate_turn_rule(r, feats, kb.params)]
            if hit:
                trims.extend(hit)
                break
            end = turn.t_end

    slack = kb.params["slack"]
    start = max(start, candidate.t_start - slack)
    end = min(end, candidate.t_end + slack)
    if end <= start:
        return candidate.t_start, candidate.t_end, ["fallback.coarse"]
    return start, end, trims


def _judge_veto(judge, expert: StrategyLabel, candidate: Candidate, book_ctx: BookContext | None) -> bool:
    query = {
        "task": "verify",
        "question": f"Is this caregiver turn sequence a {expert.display} intervention?",
        "candidate": {
            "id": candidate.id,
            "pattern": candidate.pattern.value,
            "stimulus": candidate.stimulus.text,
            "response": candidate.response.text if candidate.response else None,
            "reinforcement": candidate.reinforcement.text if candidate.reinforcement else None,
            "pause_before_response": round(candidate.pause_before_response, 3),
        },
    }
    if book_ctx is not None:
        query["book_context"] = book_ctx.to_dict()
    try:
        answer = judge.judge(query)
    except BackendError as exc:
        logger.warning("judgment escalation failed for %s, keeping rule verdict: %s", candidate.id, exc)
        return False
    return answer.get("verdict") == "reject"


def detect(
    candidates: Sequence[Candidate],
    kb: KnowledgeBase,
    *,
    book_ctx: BookContext | None = None,
    judge=None,
    rng: random.Random | None = None,
) -> list[PredictedSegment]:
    """Route, verify and refine candidates, then suppress same-label duplicates.

    A judgment backend, if given, may veto an accepted candidate; it can
    never rescue a rejected one.
    """
    accepted: list[tuple[PredictedSegment, int]] = []
    for cand in candidates:
        expert = route(cand)
        verdict = verify(expert, cand, kb)
        if not verdict.accepted:
            logger.debug("%s rejected by %s: %s", cand.id, expert.value, verdict.reason)
            continue
        trace = [
            f"scan:{cand.pattern.value}",
            f"stimulus:{cand.features.stimulus_rule}",
            f"cue:{cand.cue.value}",
            f"expert:{expert.value}",
        ]
        trace += [f"rule:{rid}" for rid in verdict.fired_rules]
        if judge is not None:
            if _judge_veto(judge, expert, cand, book_ctx):
                logger.debug("%s vetoed by judgment backend", cand.id)
                continue
            trace.append("judge:accept")
        start, end, trims = _refine(expert, cand, kb)
        trace += [f"trim:{rid}" for rid in trims]
        seg = PredictedSegment(start, end, expert, cand.id, tuple(trace))
        accepted.append((seg, verdict.require_hits))
    return suppress_overlaps(accepted, rng)


def _overlap(a: PredictedSegment, b: PredictedSegment) -> float:
    return max(0.0, min(a.t_end, b.t_end) - max(a.t_start, b.t_start))


def suppress_overlaps(
    scored: Sequence[tuple[PredictedSegment, int]], rng: random.Random | None = None
) -> list[PredictedSegment]:
    """Among same-label segments overlapping more than half of the shorter, keep one.

    The survivor fired more Require rules; ties go to the earlier start, or
    to a seeded draw when ``rng`` is supplied.
    """
    if rng is None:
        order = sorted(scored, key=lambda item: (-item[1], item[0].t_start, item[0].candidate_id))
    else:
        keyed = [(-hits, rng.random(), seg.candidate_id, seg, hits) for seg, hits in scored]
        order = [(seg, hits) for *_, seg, hits in sorted(keyed, key=lambda k: k[:3])]
    kept: list[PredictedSegment] = []
    for seg, _ in order:
        clash = any(
            k.label is seg.label and _overlap(k, seg) > OVERLAP_FRACTION * min(k.duration, seg.duration)
            for k in kept
        )
        if not clash:
            kept.append(seg)
    return sorted(kept, key=lambda s: (s.t_start, s.t_end, s.label.value, s.candidate_id))


def run_detection(
    transcript: Transcript,
    book_ctx: BookContext | None,
    kb: KnowledgeBase,
    *,
    judge=None,
    rng: random.Random | None = None,
) -> list[PredictedSegment]:
    """Scan, route, verify and refine one session."""
    kb.validate()
    candidates = scan_candidates(transcript, book_ctx, kb.scan_config())
    return detect(candidates, kb, book_ctx=book_ctx, judge=judge, rng=rng)
