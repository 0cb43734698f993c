"""Progressive knowledge refinement by greedy single-mutation hill climbing.

Each iteration runs detection on the training corpus with the best rule set
so far, tallies the error classes, proposes bounded single-rule mutations
for the dominant class, and adopts the best one only if it strictly raises
training F1. The loop stops after ``patience`` consecutive iterations
without improvement, or at ``max_iters``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

from .bookctx import BookContext, build_book_context
from .datamodel import GoldSegment, PredictedSegment, StrategyLabel, Transcript
from .errors import BackendError, KnowledgeBaseError
from .evaluation import (
    STRATEGIES,
    EvalReport,
    MatchResult,
    boundary_ok,
    compute_report,
    match_by_strategy,
)
from .experts import route, run_detection
from .knowledge import ChangelogEntry, KnowledgeBase, RuleKind, Stage
from .scanner import scan_candidates

logger = logging.getLogger(__name__)

MAX_PROPOSALS = 8
NUDGE = 0.5
MAX_EXEMPLARS = 5


@dataclass(frozen=True)
class TrainingSession:
    session_id: str
    transcript: Transcript
    golds: tuple[GoldSegment, ...]
    book_ctx: BookContext | None = None

    def context(self) -> BookContext:
        return self.book_ctx if self.book_ctx is not None else build_book_context(self.transcript)


@dataclass(frozen=True)
class SessionResult:
    session: TrainingSession
    preds: tuple[PredictedSegment, ...]
    matches: dict[StrategyLabel, MatchResult]


@dataclass(frozen=True)
class CorpusResult:
    f1: float
    report: EvalReport
    sessions: tuple[SessionResult, ...]


class CorpusEvaluator:
    """Runs detection over a fixed corpus and scores it; book contexts are computed once."""

    def __init__(self, corpus: Sequence[TrainingSession], tol: float = 1.0, mode: str = "micro"):
        self.corpus = [replace(s, book_ctx=s.context()) for s in corpus]
        self.tol = tol
        self.mode = mode

    def __call__(self, kb: KnowledgeBase) -> CorpusResult:
        results = []
        totals = {s: [0, 0, 0] for s in STRATEGIES}
        for sess in self.corpus:
            preds = tuple(run_detection(sess.transcript, sess.book_ctx, kb))
            matches = match_by_strategy(sess.golds, preds, self.tol)
            for s, m in matches.items():
                totals[s][0] += m.tp
                totals[s][1] += m.fp
                totals[s][2] += m.fn
            results.append(SessionResult(sess, preds, matches))
        report = compute_report({s: tuple(v) for s, v in totals.items()})
        return CorpusResult(report.headline(self.mode).f1, report, tuple(results))


@dataclass(frozen=True)
class ErrorSummary:
    fp_by_strategy: dict[StrategyLabel, int]
    fn_by_strategy: dict[StrategyLabel, int]
    boundary_misses: int = 0
    cue_mismatches: int = 0
    exemplars: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return sum(self.fp_by_strategy.values()) + sum(self.fn_by_strategy.values())

    def error_classes(self) -> list[tuple[str, StrategyLabel | None, int]]:
        """Error classes by descending count; ties keep the fixed order below."""
        classes: list[tuple[str, StrategyLabel | None, int]] = []
        for s in STRATEGIES:
            classes.append(("fn", s, self.fn_by_strategy.get(s, 0)))
        for s in STRATEGIES:
            classes.append(("fp", s, self.fp_by_strategy.get(s, 0)))
        classes.append(("boundary", None, self.boundary_misses))
        classes.append(("cue", None, self.cue_mismatches))
        ranked = sorted(enumerate(classes), key=lambda item: (-item[1][2], item[0]))
        return [c for _, c in ranked if c[2] > 0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "fp_by_strategy": {s.value: self.fp_by_strategy.get(s, 0) for s in STRATEGIES},
            "fn_by_strategy": {s.value: self.fn_by_strategy.get(s, 0) for s in STRATEGIES},
            "boundary_misses": self.boundary_misses,
            "cue_mismatches": self.cue_mismatches,
            "exemplars": list(self.exemplars),
        }


def _near_miss(gold: GoldSegment, pred: PredictedSegment, tol: float) -> bool:
    """Same label, overlapping, core covered, but boundaries outside tolerance."""
    if pred.t_end <= gold.t_start or pred.t_start >= gold.t_end:
        return False
    if gold.core_span is not None and not (pred.t_start <= gold.core_span[0] and pred.t_end >= gold.core_span[1]):
        return False
    return not boundary_ok(gold, pred, tol)


def categorize_errors(results: Sequence[SessionResult], kb: KnowledgeBase, tol: float = 1.0) -> ErrorSummary:
    fp: Counter[StrategyLabel] = Counter()
    fn: Counter[StrategyLabel] = Counter()
    boundary = 0
    cue = 0
    exemplars: list[str] = []
    for res in results:
        sid = res.session.session_id
        for s in STRATEGIES:
            golds = [g for g in res.session.golds if g.label is s]
            preds = [p for p in res.preds if p.label is s]
            m = res.matches[s]
            fn[s] += len(m.unmatched_gold)
            fp[s] += len(m.unmatched_pred)
            free_preds = list(m.unmatched_pred)
            for gi in m.unmatched_gold:
                g = golds[gi]
                near = [pj for pj in free_preds if _near_miss(g, preds[pj], tol)]
                if near:
                    pj = min(near, key=lambda j: abs(preds[j].t_start - g.t_start) + abs(preds[j].t_end - g.t_end))
                    free_preds.remove(pj)
                    boundary += 1
                    _note(exemplars, f"{sid}: boundary miss {s.value} gold [{g.t_start:.2f}, {g.t_end:.2f}] "
                                     f"pred [{preds[pj].t_start:.2f}, {preds[pj].t_end:.2f}]")
                else:
                    _note(exemplars, f"{sid}: missed {s.value} [{g.t_start:.2f}, {g.t_end:.2f}]")
            for pj in free_preds:
                p = preds[pj]
                _note(exemplars, f"{sid}: spurious {s.value} [{p.t_start:.2f}, {p.t_end:.2f}] ({p.candidate_id})")

        ctx = res.session.book_ctx
        for cand in scan_candidates(res.session.transcript, ctx, kb.scan_config()):
            t = cand.stimulus.t_start
            covering = [g for g in res.session.golds if g.t_start - tol <= t <= g.t_end]
            if covering and all(g.label is not route(cand) for g in covering):
                cue += 1
    return ErrorSummary(dict(fp), dict(fn), boundary, cue, tuple(exemplars))


def _note(exemplars: list[str], text: str) -> None:
    if len(exemplars) < MAX_EXEMPLARS:
        exemplars.append(text)


@dataclass(frozen=True)
class Mutation:
    """One reversible edit: a parameter value, a rule's enabled flag, or two rules' priorities."""

    kind: str
    target: str
    old: Any
    new: Any
    other: str | None = None

    @property
    def description(self) -> str:
        if self.kind == "param":
            return f"{self.target} {_num(self.old)} → {_num(self.new)}"
        if self.kind == "toggle":
            return f"{'enable' if self.new else 'disable'} {self.target}"
        return f"swap priority {self.target} ({self.old}) ↔ {self.other} ({self.new})"

    def apply(self, kb: KnowledgeBase) -> KnowledgeBase:
        if self.kind == "param":
            if kb.params.get(self.target) != self.old:
                raise KnowledgeBaseError(f"mutation expects {self.target}={self.old}, found {kb.params.get(self.target)}")
            params = dict(kb.params)
            params[self.target] = self.new
            return replace(kb, params=params)
        if self.kind == "toggle":
            rule = kb.rule(self.target)
            return kb.with_rule(replace(rule, enabled=self.new))
        if self.kind == "priority_swap":
            a, b = kb.rule(self.target), kb.rule(self.other or "")
            return kb.with_rule(replace(a, priority=b.priority)).with_rule(replace(b, priority=a.priority))
        raise KnowledgeBaseError(f"unknown mutation kind {self.kind!r}")

    def inverse(self) -> "Mutation":
        if self.kind == "priority_swap":
            return Mutation(self.kind, self.other or "", self.new, self.old, self.target)
        return Mutation(self.kind, self.target, self.new, self.old, self.other)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "target": self.target, "old": self.old, "new": self.new, "other": self.other}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Mutation":
        return cls(doc["kind"], doc["target"], doc["old"], doc["new"], doc.get("other"))


def _num(v: float) -> str:
    return f"{v:.1f}" if round(v, 1) == v else f"{v:g}"


def _nudge(kb: KnowledgeBase, name: str, sign: int) -> Mutation | None:
    old = kb.params[name]
    new = round(old + sign * NUDGE, 6)
    return Mutation("param", name, old, new) if new > 0 else None


def _toggles(kb: KnowledgeBase, expert: StrategyLabel, kind: RuleKind, enable: bool, skip: Sequence[str] = ()) -> list[Mutation]:
    stage = Stage.BOUNDARY if kind is RuleKind.TRIM else Stage.VERIFY
    return [
        Mutation("toggle", r.id, r.enabled, enable)
        for r in kb.rules_for(expert, stage, enabled_only=False)
        if r.kind is kind and r.enabled != enable and r.id not in skip
    ]


def _priority_swaps(kb: KnowledgeBase) -> list[Mutation]:
    out = []
    for s in STRATEGIES:
        rules = kb.rules_for(s, Stage.VERIFY, enabled_only=False)
        for a, b in zip(rules, rules[1:]):
            if a.priority != b.priority:
                out.append(Mutation("priority_swap", a.id, a.priority, b.priority, b.id))
    return out


def _class_proposals(kb: KnowledgeBase, cls: str, s: StrategyLabel | None) -> list[Mutation | None]:
    M, MM, TD = StrategyLabel.MODELING, StrategyLabel.MAND_MODEL, StrategyLabel.TIME_DELAY
    R, F, T = RuleKind.REQUIRE, RuleKind.FORBID, RuleKind.TRIM
    if cls == "fn" and s is TD:
        return [_nudge(kb, "td_pause_min", -1), _nudge(kb, "response_gap_max", +1),
                *_toggles(kb, TD, F, False), *_toggles(kb, TD, R, False, skip=("time_delay.require.pause",))]
    if cls == "fp" and s is TD:
        return [_nudge(kb, "td_pause_min", +1), *_toggles(kb, TD, F, True), *_toggles(kb, TD, R, True)]
    if cls == "fn" and s is M:
        return [*_toggles(kb, M, F, False), _nudge(kb, "td_pause_min", +1), *_toggles(kb, M, R, False)]
    if cls == "fp" and s is M:
        return [*_toggles(kb, M, F, True), *_toggles(kb, M, R, True), _nudge(kb, "td_pause_min", -1)]
    if cls == "fn" and s is MM:
        return [*_toggles(kb, MM, R, False), _nudge(kb, "response_gap_max", +1), _nudge(kb, "reinforce_gap_max", +1),
                *_toggles(kb, MM, F, False)]
    if cls == "fp" and s is MM:
        return [*_toggles(kb, MM, F, True), *_toggles(kb, MM, R, True), _nudge(kb, "response_gap_max", -1),
                _nudge(kb, "reinforce_gap_max", -1)]
    if cls == "boundary":
        trims = [m for e in STRATEGIES for m in _toggles(kb, e, T, True) + _toggles(kb, e, T, False)]
        return [_nudge(kb, "attempt_tail", -1), _nudge(kb, "attempt_tail", +1), _nudge(kb, "reinforce_gap_max", -1),
                _nudge(kb, "turn_merge_gap", +1), _nudge(kb, "turn_merge_gap", -1), *trims]
    if cls == "cue":
        return [_nudge(kb, "td_pause_min", -1), _nudge(kb, "td_pause_min", +1), *_priority_swaps(kb)]
    return []


def enumerate_mutations(summary: ErrorSummary, kb: KnowledgeBase) -> list[Mutation]:
    """Built-in proposer: up to eight mutations aimed at the dominant error class.

    Falls through to the next class when the dominant one has nothing left to try.
    """
    for cls, s, _ in summary.error_classes():
        props: list[Mutation] = []
        for m in _class_proposals(kb, cls, s):
            if m is not None and m not in props:
                props.append(m)
        if props:
            return props[:MAX_PROPOSALS]
    return []


class JudgmentProposer:
    """Asks a judgment backend for mutations; malformed suggestions are dropped."""

    def __init__(self, backend):
        self.backend = backend

    def __call__(self, summary: ErrorSummary, kb: KnowledgeBase) -> list[Mutation]:
        try:
            answer = self.backend.judge(
                {
                    "task": "refine",
                    "question": "Which single-rule mutations would fix the most frequent error patterns?",
                    "candidate": {"errors": summary.to_dict(), "knowledge_base": kb.to_dict()},
                }
            )
        except BackendError as exc:
            logger.warning("mutation proposer unavailable: %s", exc)
            return []
        out = []
        for doc in answer.get("mutations", ())[:MAX_PROPOSALS]:
            try:
                m = Mutation.from_dict(doc)
                m.apply(kb).validate()
            except (KeyError, TypeError, KnowledgeBaseError) as exc:
                logger.warning("dropping proposed mutation %r: %s", doc, exc)
                continue
            out.append(m)
        return out


Proposer = Callable[[ErrorSummary, KnowledgeBase], list[Mutation]]


def propose_mutations(summary: ErrorSummary, kb: KnowledgeBase, proposer: Proposer | None = None) -> list[Mutation]:
    if summary.total == 0 and summary.boundary_misses == 0:
        return []
    return (proposer or enumerate_mutations)(summary, kb)


@dataclass(frozen=True)
class RefinementStep:
    iteration: int
    description: str
    train_f1: float
    accepted: bool

    def to_dict(self) -> dict[str, Any]:
        return {"iteration": self.iteration, "description": self.description, "train_f1": self.train_f1, "accepted": self.accepted}


@dataclass
class RefinementHistory:
    initial_f1: float
    best_version: int
    best_f1: float
    steps: list[RefinementStep] = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "initial_f1": self.initial_f1,
            "best_version": self.best_version,
            "best_f1": self.best_f1,
            "steps": [s.to_dict() for s in self.steps],
        }


def accept_mutation(kb: KnowledgeBase, mutation: Mutation, train_f1: float) -> KnowledgeBase:
    """Apply ``mutation`` as a new version and log it in the changelog."""
    new = mutation.apply(kb)
    version = kb.version + 1
    entry = ChangelogEntry(version, mutation.description, train_f1, mutation.to_dict())
    return replace(new, version=version, changelog=kb.changelog + (entry,)).validate()


def replay_changelog(kb0: KnowledgeBase, changelog: Sequence[ChangelogEntry]) -> KnowledgeBase:
    kb = kb0
    for entry in changelog:
        if entry.mutation is None:
            raise KnowledgeBaseError(f"changelog entry v{entry.version} carries no mutation")
        kb = accept_mutation(kb, Mutation.from_dict(entry.mutation), entry.train_f1)
    return kb


def refine_loop(
    corpus: Sequence[TrainingSession],
    kb0: KnowledgeBase,
    evaluator: Callable[[KnowledgeBase], CorpusResult] | None = None,
    patience: int = 3,
    max_iters: int = 20,
    proposer: Proposer | None = None,
    tol: float = 1.0,
    mode: str = "micro",
) -> tuple[KnowledgeBase, RefinementHistory]:
    if not corpus:
        raise ValueError("refinement corpus is empty")
    if patience < 1 or max_iters < 1:
        raise ValueError("patience and max_iters must be >= 1")
    kb0.validate()
    evaluator = evaluator or CorpusEvaluator(corpus, tol, mode)

    best_kb = kb0
    current = evaluator(best_kb)
    history = RefinementHistory(current.f1, kb0.version, current.f1)
    stale = 0
    iteration = 0
    while iteration < max_iters and stale < patience:
        iteration += 1
        summary = categorize_errors(current.sessions, best_kb, tol)
        proposals = propose_mutations(summary, best_kb, proposer)
        trial: tuple[Mutation, CorpusResult] | None = None
        for mut in proposals:
            res = evaluator(mut.apply(best_kb))
            if trial is None or res.f1 > trial[1].f1:
                trial = (mut, res)
        if trial is not None and trial[1].f1 > history.best_f1:
            mut, res = trial
            best_kb = accept_mutation(best_kb, mut, res.f1)
            current = res
            history.best_f1 = res.f1
            history.best_version = best_kb.version
            history.steps.append(RefinementStep(iteration, mut.description, res.f1, True))
            stale = 0
            logger.info("iteration %d: accepted %s, train F1 %.4f", iteration, mut.description, res.f1)
        else:
            desc = trial[0].description if trial else "no proposals"
            f1 = trial[1].f1 if trial else history.best_f1
            history.steps.append(RefinementStep(iteration, desc, f1, False))
            stale += 1
            logger.info("iteration %d: no improvement (%s), patience %d/%d", iteration, desc, stale, patience)
    return best_kb, history
