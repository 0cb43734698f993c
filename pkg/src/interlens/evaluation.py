"""Segment-level evaluation under the three-criterion protocol.

A prediction counts as a true positive for a gold segment only if the labels
agree, it covers the annotated interaction core (when one is given), and both
endpoints fall within ``tol`` seconds of the gold boundaries. Gold and
predictions are paired by an optimal one-to-one matching.
"""

from __future__ import annotations

import itertools
import statistics
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datamodel import GoldSegment, PredictedSegment, StrategyLabel
from .errors import ConfigError

# Comparison slack for float noise only; far below the 1e-6 s resolution the
# tolerance edge must distinguish.
EPS = 1e-9
STRATEGIES = (StrategyLabel.MAND_MODEL, StrategyLabel.MODELING, StrategyLabel.TIME_DELAY)


def boundary_ok(gold: GoldSegment, pred: PredictedSegment, tol: float = 1.0) -> bool:
    return abs(pred.t_start - gold.t_start) <= tol + EPS and abs(pred.t_end - gold.t_end) <= tol + EPS


def complete(gold: GoldSegment, pred: PredictedSegment, tol: float = 1.0) -> bool:
    """Prediction covers the gold interaction core; without a core, the boundary test stands in."""
    if gold.core_span is None:
        return boundary_ok(gold, pred, tol)
    core_start, core_end = gold.core_span
    return pred.t_start <= core_start + EPS and pred.t_end >= core_end - EPS


def admissible(gold: GoldSegment, pred: PredictedSegment, tol: float = 1.0) -> bool:
    if tol <= 0:
        raise ConfigError(f"tolerance must be > 0, got {tol}")
    return gold.label is pred.label and boundary_ok(gold, pred, tol) and complete(gold, pred, tol)


def deviation(gold: GoldSegment, pred: PredictedSegment) -> float:
    return abs(pred.t_start - gold.t_start) + abs(pred.t_end - gold.t_end)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...] = ()
    unmatched_gold: tuple[int, ...] = ()
    unmatched_pred: tuple[int, ...] = ()

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gold)


def match_segments(golds: Sequence[GoldSegment], preds: Sequence[PredictedSegment], tol: float = 1.0) -> MatchResult:
    """Maximum-cardinality matching over admissible pairs, minimizing total boundary deviation.

    Solved as one assignment problem: admissible pairs cost
    ``deviation - bonus`` with a bonus larger than any total deviation, so
    cardinality dominates; inadmissible pairs cost 0 and are discarded.
    """
    if tol <= 0:
        raise ConfigError(f"tolerance must be > 0, got {tol}")
    n, m = len(golds), len(preds)
    if n == 0 or m == 0:
        return MatchResult((), tuple(range(n)), tuple(range(m)))
    ok = np.zeros((n, m), dtype=bool)
    dev = np.zeros((n, m))
    for i, g in enumerate(golds):
        for j, p in enumerate(preds):
            if admissible(g, p, tol):
                ok[i, j] = True
                dev[i, j] = deviation(g, p)
    if not ok.any():
        return MatchResult((), tuple(range(n)), tuple(range(m)))
    bonus = 2.0 * (dev.max() + 1.0) * min(n, m) + 1.0
    cost = np.where(ok, dev - bonus, 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted((int(i), int(j)) for i, j in zip(rows, cols) if ok[i, j]))
    used_g = {i for i, _ in pairs}
    used_p = {j for _, j in pairs}
    return MatchResult(
        pairs,
        tuple(i for i in range(n) if i not in used_g),
        tuple(j for j in range(m) if j not in used_p),
    )


def brute_force_max_matching(golds: Sequence[GoldSegment], preds: Sequence[PredictedSegment], tol: float = 1.0) -> tuple[int, float]:
    """Enumerate every injective pairing; return (max cardinality, min deviation at that cardinality).

    Exponential. Intended as a test oracle for small inputs.
    """
    n, m = len(golds), len(preds)
    best = (0, 0.0)
    if n == 0 or m == 0:
        return best
    ok = [[admissible(g, p, tol) for p in preds] for g in golds]
    # assign each gold a pred index or None (m means unmatched)
    for choice in itertools.product(range(m + 1), repeat=n):
        used = [c for c in choice if c < m]
        if len(used) != len(set(used)):
            continue
        if any(c < m and not ok[i][c] for i, c in enumerate(choice)):
            continue
        card = len(used)
        total = sum(deviation(golds[i], preds[c]) for i, c in enumerate(choice) if c < m)
        if card > best[0] or (card == best[0] and card > 0 and total < best[1]):
            best = (card, total)
    return best


@dataclass(frozen=True)
class Metrics:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class StrategyMetrics(Metrics):
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "StrategyMetrics":
        p, r, f = prf(tp, fp, fn)
        return cls(p, r, f, tp, fp, fn)

    def to_dict(self) -> dict[str, float]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, **super().to_dict()}


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def macro_average(per_strategy: Mapping[StrategyLabel, Metrics]) -> Metrics:
    """Unweighted mean of per-strategy precision, recall and F1 over all three strategies."""
    vals = [per_strategy.get(s, Metrics()) for s in STRATEGIES]
    k = len(vals)
    return Metrics(
        sum(v.precision for v in vals) / k,
        sum(v.recall for v in vals) / k,
        sum(v.f1 for v in vals) / k,
    )


@dataclass(frozen=True)
class EvalReport:
    per_strategy: dict[StrategyLabel, StrategyMetrics]
    aggregate_macro: Metrics
    aggregate_micro: Metrics

    def headline(self, mode: str = "micro") -> Metrics:
        if mode == "micro":
            return self.aggregate_micro
        if mode == "macro":
            return self.aggregate_macro
        raise ConfigError(f"unknown aggregation mode {mode!r}")

    def flat(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for s in STRATEGIES:
            for k, v in self.per_strategy[s].to_dict().items():
                out[f"{s.value}.{k}"] = float(v)
        for k, v in self.aggregate_macro.to_dict().items():
            out[f"macro.{k}"] = v
        for k, v in self.aggregate_micro.to_dict().items():
            out[f"micro.{k}"] = v
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_strategy": {s.value: self.per_strategy[s].to_dict() for s in STRATEGIES},
            "aggregate_macro": self.aggregate_macro.to_dict(),
            "aggregate_micro": self.aggregate_micro.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "EvalReport":
        per = {}
        for s in STRATEGIES:
            d = doc["per_strategy"][s.value]
            per[s] = StrategyMetrics(d["precision"], d["recall"], d["f1"], int(d["tp"]), int(d["fp"]), int(d["fn"]))
        return cls(per, Metrics(**doc["aggregate_macro"]), Metrics(**doc["aggregate_micro"]))


Counts = tuple[int, int, int]


def compute_report(per_strategy: Mapping[StrategyLabel, MatchResult | Counts | StrategyMetrics]) -> EvalReport:
    """Build per-strategy, macro and micro metrics.

    Values may be match results, ``(tp, fp, fn)`` tuples, or ready-made
    :class:`StrategyMetrics` (whose precision/recall/F1 are then taken as
    given for the macro mean). Missing strategies count as empty.
    """
    per: dict[StrategyLabel, StrategyMetrics] = {}
    for s in STRATEGIES:
        item = per_strategy.get(s)
        if item is None:
            per[s] = StrategyMetrics()
        elif isinstance(item, StrategyMetrics):
            per[s] = item
        elif isinstance(item, MatchResult):
            per[s] = StrategyMetrics.from_counts(item.tp, item.fp, item.fn)
        else:
            per[s] = StrategyMetrics.from_counts(*item)
    tp = sum(m.tp for m in per.values())
    fp = sum(m.fp for m in per.values())
    fn = sum(m.fn for m in per.values())
    return EvalReport(per, macro_average(per), Metrics(*prf(tp, fp, fn)))


def match_by_strategy(
    golds: Sequence[GoldSegment], preds: Sequence[PredictedSegment], tol: float = 1.0
) -> dict[StrategyLabel, MatchResult]:
    """Match within each label; indices refer to the per-label sublists."""
    out = {}
    for s in STRATEGIES:
        out[s] = match_segments([g for g in golds if g.label is s], [p for p in preds if p.label is s], tol)
    return out


def evaluate_sessions(
    sessions: Iterable[tuple[Sequence[GoldSegment], Sequence[PredictedSegment]]], tol: float = 1.0
) -> EvalReport:
    """Match each session separately and pool counts per strategy."""
    totals = {s: [0, 0, 0] for s in STRATEGIES}
    for golds, preds in sessions:
        for s, res in match_by_strategy(golds, preds, tol).items():
            totals[s][0] += res.tp
            totals[s][1] += res.fp
            totals[s][2] += res.fn
    return compute_report({s: tuple(v) for s, v in totals.items()})


@dataclass(frozen=True)
class RunAggregate:
    n_runs: int
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"n_runs": self.n_runs, "mean": self.mean, "std": self.std}


def aggregate_runs(reports: Sequence[EvalReport]) -> RunAggregate:
    """Per-metric mean and sample standard deviation (N - 1); std is 0 for one run."""
    if not reports:
        raise ValueError("aggregate_runs needs at least one report")
    flats = [r.flat() for r in reports]
    mean, std = {}, {}
    for key in flats[0]:
        vals = [f[key] for f in flats]
        mean[key] = statistics.fmean(vals)
        std[key] = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return RunAggregate(len(reports), mean, std)
