"""Versioned per-expert rule sets.

A rule is a declarative predicate ``field op value`` over documented
candidate (verification) or trailing-turn (boundary) fields. Values may
reference knowledge-base parameters as ``"$name"``, which is how threshold
mutations reach both the scanner and the experts.
"""

from __future__ import annotations

import enum
import json
import operator
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .datamodel import StrategyLabel
from .errors import KnowledgeBaseError
from .scanner import Candidate, ScanConfig, TurnFeatures


class Stage(str, enum.Enum):
    VERIFY = "verify"
    BOUNDARY = "boundary"


class RuleKind(str, enum.Enum):
    REQUIRE = "require"
    FORBID = "forbid"
    TRIM = "trim"


OPERATORS: dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    ">=": operator.ge,
    "<=": operator.le,
    ">": operator.gt,
    "<": operator.lt,
}

CANDIDATE_FIELDS: dict[str, Callable[[Candidate], Any]] = {
    "pattern": lambda c: c.pattern.value,
    "cue": lambda c: c.cue.value,
    "has_response": lambda c: c.response is not None,
    "has_reinforcement": lambda c: c.reinforcement is not None,
    "pause_before_response": lambda c: c.pause_before_response,
    "n_trailing": lambda c: len(c.trailing),
    "reinforcement.echoes_child": lambda c: c.reinforcement_echoes,
    "stimulus.is_question": lambda c: c.features.is_question,
    "stimulus.is_directive": lambda c: c.features.is_directive,
    "stimulus.is_mand": lambda c: c.features.is_mand,
    "stimulus.frame_match": lambda c: c.features.frame_match,
    "stimulus.frame_cutoff": lambda c: c.features.frame_cutoff,
    "stimulus.has_target": lambda c: c.features.has_target,
    "stimulus.target_repetition": lambda c: c.features.target_repetition,
    "stimulus.echoes_child": lambda c: c.features.echoes_child,
    "stimulus.has_book_grounding": lambda c: c.features.has_book_grounding,
    "stimulus.has_action": lambda c: c.stimulus.has_action,
    "stimulus.n_tokens": lambda c: c.features.n_tokens,
}

TURN_FIELDS: dict[str, Callable[[TurnFeatures], Any]] = {
    "turn.related": lambda f: f.has_book_grounding,
    "turn.has_target": lambda f: f.has_target,
    "turn.frame_match": lambda f: f.frame_match,
    "turn.is_question": lambda f: f.is_question,
    "turn.topic_shift": lambda f: f.topic_shift,
    "turn.echoes_child": lambda f: f.echoes_child,
}

DEFAULT_PARAMS: dict[str, float] = {
    "turn_merge_gap": 1.0,
    "response_gap_max": 5.0,
    "reinforce_gap_max": 5.0,
    "td_pause_min": 3.0,
    "attempt_tail": 3.0,
    "slack": 2.0,
}


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: Any

    @classmethod
    def parse(cls, spec: str | dict[str, Any]) -> "Predicate":
        """Accept ``{"field", "op", "value"}`` or a string such as ``"pause_before_response >= $td_pause_min"``."""
        if isinstance(spec, dict):
            return cls(spec["field"], spec["op"], spec["value"])
        parts = spec.split()
        if len(parts) != 3:
            raise KnowledgeBaseError(f"cannot parse predicate {spec!r}")
        name, op, raw = parts
        value: Any
        if raw in ("true", "false"):
            value = raw == "true"
        elif raw.startswith("$"):
            value = raw
        else:
            try:
                value = float(raw)
            except ValueError:
                value = raw
        return cls(name, op, value)

    def resolve(self, params: dict[str, float]) -> Any:
        if isinstance(self.value, str) and self.value.startswith("$"):
            return params[self.value[1:]]
        return self.value

    def __str__(self) -> str:
        value = str(self.value).lower() if isinstance(self.value, bool) else self.value
        return f"{self.field} {self.op} {value}"

    def to_dict(self) -> dict[str, Any]:
        return {"field": self.field, "op": self.op, "value": self.value}


@dataclass(frozen=True)
class Rule:
    id: str
    expert: StrategyLabel
    stage: Stage
    kind: RuleKind
    predicate: Predicate
    priority: int = 0
    enabled: bool = True
    description: str = ""

    @property
    def reason(self) -> str:
        return self.description or f"rule {self.id} failed ({self.predicate})"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "expert": self.expert.value,
            "stage": self.stage.value,
            "kind": self.kind.value,
            "predicate": self.predicate.to_dict(),
            "priority": self.priority,
            "enabled": self.enabled,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Rule":
        try:
            return cls(
                id=str(doc["id"]),
                expert=StrategyLabel.parse(doc["expert"]),
                stage=Stage(doc["stage"]),
                kind=RuleKind(doc["kind"]),
                predicate=Predicate.parse(doc["predicate"]),
                priority=int(doc.get("priority", 0)),
                enabled=bool(doc.get("enabled", True)),
                description=str(doc.get("description", "")),
            )
        except (KeyError, ValueError) as exc:
            raise KnowledgeBaseError(f"malformed rule {doc.get('id', '?')!r}: {exc}") from exc


@dataclass(frozen=True)
class ChangelogEntry:
    version: int
    description: str
    train_f1: float
    mutation: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"version": self.version, "description": self.description, "train_f1": self.train_f1, "mutation": self.mutation}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ChangelogEntry":
        return cls(int(doc["version"]), str(doc["description"]), float(doc["train_f1"]), doc.get("mutation"))


@dataclass(frozen=True)
class KnowledgeBase:
    version: int = 1
    rules: tuple[Rule, ...] = ()
    params: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PARAMS))
    changelog: tuple[ChangelogEntry, ...] = ()

    def rules_for(self, expert: StrategyLabel, stage: Stage, enabled_only: bool = True) -> list[Rule]:
        rules = [r for r in self.rules if r.expert is expert and r.stage is stage and (r.enabled or not enabled_only)]
        return sorted(rules, key=lambda r: (-r.priority, r.id))

    def rule(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise KnowledgeBaseError(f"no rule {rule_id!r}")

    def scan_config(self) -> ScanConfig:
        return ScanConfig.from_params(self.params)

    def with_rule(self, new: Rule) -> "KnowledgeBase":
        return replace(self, rules=tuple(new if r.id == new.id and r.expert is new.expert else r for r in self.rules))

    def validate(self) -> "KnowledgeBase":
        """Raise :class:`KnowledgeBaseError` on any structural problem; return self."""
        seen = set()
        for r in self.rules:
            key = (r.expert, r.stage, r.id)
            if key in seen:
                raise KnowledgeBaseError(f"duplicate rule {r.id!r} for {r.expert.value}/{r.stage.value}")
            seen.add(key)
            fields = TURN_FIELDS if r.stage is Stage.BOUNDARY else CANDIDATE_FIELDS
            if r.predicate.field not in fields:
                raise KnowledgeBaseError(f"rule {r.id!r}: unknown field {r.predicate.field!r} for stage {r.stage.value}")
            if r.predicate.op not in OPERATORS:
                raise KnowledgeBaseError(f"rule {r.id!r}: unknown operator {r.predicate.op!r}")
            if (r.stage is Stage.BOUNDARY) != (r.kind is RuleKind.TRIM):
                raise KnowledgeBaseError(f"rule {r.id!r}: {r.kind.value} rules do not belong to stage {r.stage.value}")
            v = r.predicate.value
            if isinstance(v, str) and v.startswith("$") and v[1:] not in self.params:
                raise KnowledgeBaseError(f"rule {r.id!r}: unknown parameter {v!r}")
        for name, value in self.params.items():
            if name in DEFAULT_PARAMS and not value > 0:
                raise KnowledgeBaseError(f"parameter {name} must be > 0, got {value}")
        missing = set(DEFAULT_PARAMS) - set(self.params)
        if missing:
            raise KnowledgeBaseError(f"missing parameters: {sorted(missing)}")
        try:
            self.scan_config()
        except TypeError as exc:
            raise KnowledgeBaseError(str(exc)) from exc
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "params": dict(sorted(self.params.items())),
            "rules": [r.to_dict() for r in self.rules],
            "changelog": [c.to_dict() for c in self.changelog],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "KnowledgeBase":
        try:
            params = dict(DEFAULT_PARAMS)
            params.update(doc.get("params", {}))
            return cls(
                version=int(doc["version"]),
                rules=tuple(Rule.from_dict(r) for r in doc["rules"]),
                params=params,
                changelog=tuple(ChangelogEntry.from_dict(c) for c in doc.get("changelog", ())),
            ).validate()
        except KeyError as exc:
            raise KnowledgeBaseError(f"knowledge base lacks {exc.args[0]!r}") from None


def evaluate_candidate_rule(rule: Rule, candidate: Candidate, params: dict[str, float]) -> bool:
    value = CANDIDATE_FIELDS[rule.predicate.field](candidate)
    return bool(OPERATORS[rule.predicate.op](value, rule.predicate.resolve(params)))


def evaluate_turn_rule(rule: Rule, feats: TurnFeatures, params: dict[str, float]) -> bool:
    value = TURN_FIELDS[rule.predicate.field](feats)
    return bool(OPERATORS[rule.predicate.op](value, rule.predicate.resolve(params)))


def load_kb(path: str | Path) -> KnowledgeBase:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise KnowledgeBaseError(f"{path}: malformed JSON: {exc.msg}") from None
    return KnowledgeBase.from_dict(doc)


def dump_kb(kb: KnowledgeBase) -> str:
    return json.dumps(kb.to_dict(), indent=2, sort_keys=False) + "\n"


M, MM, TD = StrategyLabel.MODELING, StrategyLabel.MAND_MODEL, StrategyLabel.TIME_DELAY


def _v(rid, expert, kind, pred, prio, desc, enabled=True) -> Rule:
    return Rule(rid, expert, Stage.VERIFY, kind, Predicate.parse(pred), prio, enabled, desc)


def default_knowledge_base(params: dict[str, float] | None = None) -> KnowledgeBase:
    """The v1 rule set.

    Modeling: a book-grounded demonstration that is not a mand, not an echo of
    the child and not an unfinished frame. Mand-Model: a prompt followed by
    the child's response and a contingent caregiver model. Time Delay: a
    book-grounded, non-interrogative stimulus followed by a pause of at least
    ``td_pause_min``.
    """
    R, F = RuleKind.REQUIRE, RuleKind.FORBID
    rules = [
        _v("modeling.require.grounding", M, R, "stimulus.has_book_grounding == true", 100, "no target-word modeling evidence"),
        _v("modeling.forbid.mand", M, F, "stimulus.is_mand == true", 90, "stimulus is a mand"),
        _v("modeling.forbid.echo", M, F, "stimulus.echoes_child == true", 80, "stimulus reinforces a prior child response"),
        _v("modeling.forbid.cutoff", M, F, "stimulus.frame_cutoff == true", 70, "unfinished frame invites completion"),
        _v("modeling.forbid.no_repetition", M, F, "stimulus.target_repetition == false", 60, "target word not repeated", enabled=False),
        _v("mand_model.require.mand", MM, R, "stimulus.is_mand == true", 100, "no prompt in stimulus"),
        _v("mand_model.require.model", MM, R, "has_reinforcement == true", 90, "no contingent model after the response"),
        _v("mand_model.forbid.long_pause", MM, F, "pause_before_response >= $td_pause_min", 50, "pause long enough for a time delay", enabled=False),
        _v("time_delay.require.pause", TD, R, "pause_before_response >= $td_pause_min", 100, "pause below threshold"),
        _v("time_delay.require.grounding", TD, R, "stimulus.has_book_grounding == true", 90, "no book-grounded response opportunity"),
        _v("time_delay.forbid.mand", TD, F, "stimulus.is_mand == true", 80, "interrogative stimulus is a mand"),
        _v("time_delay.forbid.no_response", TD, F, "has_response == false", 60, "no child response after the delay", enabled=False),
    ]
    for expert in (M, MM, TD):
        rules.append(Rule(f"{expert.value}.trim.unrelated", expert, Stage.BOUNDARY, RuleKind.TRIM,
                          Predicate.parse("turn.related == false"), 50, True, "trailing turn unrelated to the book"))
        rules.append(Rule(f"{expert.value}.trim.topic_shift", expert, Stage.BOUNDARY, RuleKind.TRIM,
                          Predicate.parse("turn.topic_shift == true"), 40, True, "trailing turn shifts topic"))
    merged = dict(DEFAULT_PARAMS)
    merged.update(params or {})
    return KnowledgeBase(version=1, rules=tuple(rules), params=merged).validate()
