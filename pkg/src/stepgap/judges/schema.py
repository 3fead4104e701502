"""Typed judge responses and their wire-format validation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Mapping

from ..errors import SchemaViolation

DRIFT_TYPES = ("none", "entity_drift", "relation_drift", "scope_drift")


class NliLabel(str, Enum):
    ENTAILMENT = "entailment"
    NEUTRAL = "neutral"
    CONTRADICTION = "contradiction"


@dataclass(frozen=True)
class Alignment:
    is_off_target: bool
    drift_type: str = "none"
    alignment_reasoning: str = ""


@dataclass(frozen=True)
class Abstention:
    is_abstention_step: bool
    abstention_is_accurate: bool = False
    abstention_reasoning: str = ""


@dataclass(frozen=True)
class QuoteSearch:
    entity_match: bool
    entity_match_reasoning: str = ""
    found_quote: bool = False
    evidence_quote: str = ""
    quote_search_reasoning: str = ""


@dataclass(frozen=True)
class Entailment:
    """LLM-routed entailment answer, present only when the request asked for it."""

    label: NliLabel
    entailment_reasoning: str = ""


@dataclass(frozen=True)
class LlmJudgeResponse:
    alignment: Alignment
    abstention: Abstention
    quote_search: QuoteSearch
    stage_confidences: Mapping[str, float] = field(default_factory=dict)
    entailment: Entailment | None = None

    def __post_init__(self) -> None:
        a, q = self.alignment, self.quote_search
        if a.drift_type not in DRIFT_TYPES:
            raise SchemaViolation(f"unknown drift_type {a.drift_type!r}")
        if (a.drift_type == "none") != (not a.is_off_target):
            raise SchemaViolation("drift_type must be 'none' exactly when is_off_target is false")
        if q.found_quote and not q.evidence_quote.strip():
            raise SchemaViolation("found_quote=true requires a non-empty evidence_quote")
        if not q.entity_match and q.found_quote:
            raise SchemaViolation("found_quote requires entity_match")
        for stage, p in self.stage_confidences.items():
            if not (isinstance(p, (int, float)) and 0.0 <= p <= 1.0):
                raise SchemaViolation(f"stage confidence for {stage} out of [0,1]: {p!r}")

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "step_minus1_alignment": asdict(self.alignment),
            "step_0_abstention_check": asdict(self.abstention),
            "step_1_quote_search": asdict(self.quote_search),
        }
        if self.entailment is not None:
            out["step_2_entailment"] = {
                "label": self.entailment.label.value,
                "entailment_reasoning": self.entailment.entailment_reasoning,
            }
        if self.stage_confidences:
            out["stage_confidences"] = dict(self.stage_confidences)
        return out

    @classmethod
    def from_wire(cls, obj: Mapping[str, Any]) -> "LlmJudgeResponse":
        if not isinstance(obj, Mapping):
            raise SchemaViolation("judge response is not an object")
        try:
            a = obj["step_minus1_alignment"]
            b = obj["step_0_abstention_check"]
            c = obj["step_1_quote_search"]
            alignment = Alignment(
                is_off_target=_bool(a, "is_off_target"),
                drift_type=str(a.get("drift_type", "none")),
                alignment_reasoning=str(a.get("alignment_reasoning", "")),
            )
            abstention = Abstention(
                is_abstention_step=_bool(b, "is_abstention_step"),
                abstention_is_accurate=_bool(b, "abstention_is_accurate", default=False),
                abstention_reasoning=str(b.get("abstention_reasoning", "")),
            )
            quote = QuoteSearch(
                entity_match=_bool(c, "entity_match"),
                entity_match_reasoning=str(c.get("entity_match_reasoning", "")),
                found_quote=_bool(c, "found_quote", default=False),
                evidence_quote=str(c.get("evidence_quote", "") or ""),
                quote_search_reasoning=str(c.get("quote_search_reasoning", "")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaViolation(f"missing or invalid field: {exc}") from None
        entailment = None
        if obj.get("step_2_entailment") is not None:
            entailment = parse_entailment(obj["step_2_entailment"])
        confidences = obj.get("stage_confidences") or {}
        if not isinstance(confidences, Mapping):
            raise SchemaViolation("stage_confidences must be an object")
        return cls(alignment, abstention, quote, dict(confidences), entailment)


def _bool(obj: Mapping[str, Any], key: str, default: bool | None = None) -> bool:
    if key not in obj:
        if default is None:
            raise KeyError(key)
        return default
    value = obj[key]
    if not isinstance(value, bool):
        raise SchemaViolation(f"{key} must be a boolean, got {value!r}")
    return value


def parse_entailment(obj: Mapping[str, Any]) -> Entailment:
    if not isinstance(obj, Mapping) or "label" not in obj:
        raise SchemaViolation("entailment section needs a label")
    try:
        label = NliLabel(str(obj["label"]).lower())
    except ValueError:
        raise SchemaViolation(f"unknown entailment label {obj['label']!r}") from None
    return Entailment(label, str(obj.get("entailment_reasoning", obj.get("reasoning", ""))))


@dataclass(frozen=True)
class NliVerdict:
    label: NliLabel
    scores: tuple[float, float, float]  # entailment, neutral, contradiction
    truncated: bool = False

    def __post_init__(self) -> None:
        if len(self.scores) != 3 or not math.isclose(sum(self.scores), 1.0, abs_tol=1e-6):
            raise ValueError(f"NLI scores must be three probabilities summing to 1: {self.scores}")

    @property
    def confidence(self) -> float:
        order = (NliLabel.ENTAILMENT, NliLabel.NEUTRAL, NliLabel.CONTRADICTION)
        return self.scores[order.index(self.label)]

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label.value, "scores": list(self.scores), "truncated": self.truncated}


@dataclass(frozen=True)
class JudgeConfig:
    endpoint: str | None = None
    model_name: str = "gpt-4.1-mini"
    timeout: float = 60.0
    max_retries: int = 3
    cache_dir: str | None = None
    entailment_threshold: float = 0.5
    contradiction_threshold: float = 0.5
    nli_endpoint: str | None = None
    premise_token_budget: int = 400
    max_concurrency: int = 8

    def __post_init__(self) -> None:
        for name in ("entailment_threshold", "contradiction_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


def _section(props: dict[str, Any]) -> dict[str, Any]:
    return {"type": "object", "properties": props, "required": list(props), "additionalProperties": False}


def response_json_schema(ask_entailment: bool = False) -> dict[str, Any]:
    """JSON schema for strict structured-output mode."""
    s, b = {"type": "string"}, {"type": "boolean"}
    props: dict[str, Any] = {
        "step_minus1_alignment": _section(
            {"is_off_target": b, "drift_type": {"type": "string", "enum": list(DRIFT_TYPES)}, "alignment_reasoning": s}
        ),
        "step_0_abstention_check": _section(
            {"is_abstention_step": b, "abstention_is_accurate": b, "abstention_reasoning": s}
        ),
        "step_1_quote_search": _section(
            {
                "entity_match": b,
                "entity_match_reasoning": s,
                "found_quote": b,
                "evidence_quote": s,
                "quote_search_reasoning": s,
            }
        ),
    }
    if ask_entailment:
        props["step_2_entailment"] = _section(
            {"label": {"type": "string", "enum": [l.value for l in NliLabel]}, "entailment_reasoning": s}
        )
    return _section(props)


ENTITY_FILTER_SCHEMA = _section(
    {"entity_matches": {"type": "array", "items": {"type": "boolean"}}, "reasoning": {"type": "string"}}
)
ENTAILMENT_SCHEMA = _section(
    {
        "label": {"type": "string", "enum": [l.value for l in NliLabel]},
        "entailment_reasoning": {"type": "string"},
    }
)
