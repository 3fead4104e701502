"""The five-stage gap-checking decision tree and its baseline variants.

Stages A-C (alignment, abstention, entity+quote) come from one structured LLM
judgment; Stage D checks the Stage C quote against the step's claim and
Stage E checks a conclusion's claim against entity-matched earlier snippets.
Each stage either emits a typed gap and stops or hands over to the next one.
"""

from __future__ import annotations

import logging
import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .errors import JudgeUnavailable
from .judges.llm import LlmJudge, TraceContext
from .judges.nli import NliJudge
from .judges.schema import LlmJudgeResponse, NliLabel
from .labels import REPAIR_FOR, GapType, RepairAction
from .trace import EvidenceSnippet, ReasoningTrace, Step, StepKind, accumulated_evidence

logger = logging.getLogger(__name__)

PATH_SEPARATOR = "→"

STAGE_OUTCOMES: dict[str, frozenset[str]] = {
    "A": frozenset({"on_target", "entity_drift", "relation_drift", "scope_drift"}),
    "B": frozenset({"no_marker", "not_abstention", "grounded_abstention", "wrong_abstention"}),
    "C": frozenset({"entity_mismatch", "quote_found", "no_quote", "no_claim"}),
    "D": frozenset({"entailment", "neutral", "contradiction"}),
    "E": frozenset({"entailment", "no_entailing_prior", "no_candidates"}),
    "gate": frozenset({"below_threshold"}),
    "baseline": frozenset(
        {"flag_everything", "nli_entailment", "nli_neutral", "nli_contradiction", "no_evidence", "no_claim"}
    ),
    "unchecked": frozenset({"judge_unavailable"}),
}

# (stage, gap type) pairs the tree may emit; NoGap exits are allowed at any stage
GAP_EXITS = frozenset(
    {("A", GapType.CC), ("B", GapType.CC), ("C", GapType.IE), ("D", GapType.CC), ("D", GapType.MB), ("E", GapType.IE)}
)

ABSTENTION_MARKERS = ("n/a", "unknown", "cannot determine", "cannot be determined")
_RETRACTION_RE = re.compile(r"\b(actually|wait|correction|i was wrong)\b", re.I)


def _prefix(stage: str) -> str:
    return f"stage{stage}" if stage in "ABCDE" else stage


@dataclass(frozen=True)
class StageDecision:
    stage: str
    outcome: str
    confidence: float | None = None
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.stage not in STAGE_OUTCOMES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.outcome not in STAGE_OUTCOMES[self.stage]:
            raise ValueError(f"outcome {self.outcome!r} not allowed for stage {self.stage}")

    @property
    def tag(self) -> str:
        return f"{_prefix(self.stage)}:{self.outcome}"

    def __str__(self) -> str:
        return self.tag + ("[truncated]" if self.truncated else "")

    @classmethod
    def parse(cls, text: str, confidence: float | None = None) -> "StageDecision":
        truncated = text.endswith("[truncated]")
        if truncated:
            text = text[: -len("[truncated]")]
        head, _, outcome = text.partition(":")
        stage = head[len("stage"):] if head.startswith("stage") else head
        return cls(stage, outcome, confidence, truncated)


def geometric_mean(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        return 1.0
    if any(v <= 0.0 for v in vals):
        return 0.0
    return math.exp(sum(math.log(v) for v in vals) / len(vals))


@dataclass(frozen=True)
class GapVerdict:
    gap_type: GapType
    confidence: float
    rationale: str
    pipeline_path: tuple[StageDecision, ...]
    unchecked: bool = False
    question_id: str | None = None
    step_index: int | None = None
    judgments: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)
    repair_action: RepairAction = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "gap_type", GapType.parse(self.gap_type))
        object.__setattr__(self, "repair_action", REPAIR_FOR[self.gap_type])
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")

    @property
    def has_gap(self) -> bool:
        return self.gap_type.is_gap

    @property
    def path_string(self) -> str:
        return PATH_SEPARATOR.join(str(d) for d in self.pipeline_path)

    @property
    def emitting_stage(self) -> str | None:
        return self.pipeline_path[-1].stage if self.pipeline_path else None

    def to_record(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "step_index": self.step_index,
            "gap_type": self.gap_type.value,
            "confidence": self.confidence,
            "rationale": self.rationale,
            "pipeline_path": self.path_string,
            "path_confidences": [d.confidence for d in self.pipeline_path],
            "repair_action": self.repair_action.value,
            "unchecked": self.unchecked,
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "GapVerdict":
        tags = [t for t in str(rec.get("pipeline_path", "")).split(PATH_SEPARATOR) if t]
        confs = rec.get("path_confidences") or [None] * len(tags)
        return cls(
            gap_type=GapType.parse(rec["gap_type"]),
            confidence=float(rec["confidence"]),
            rationale=str(rec.get("rationale", "")),
            pipeline_path=tuple(StageDecision.parse(t, c) for t, c in zip(tags, confs)),
            unchecked=bool(rec.get("unchecked", False)),
            question_id=rec.get("question_id"),
            step_index=rec.get("step_index"),
        )


class VariantName(str, Enum):
    STEPGAP = "StepGap"
    LLM_STRICT = "LlmStrict"
    LLM_ONLY = "LlmOnly"
    SINGLE_LLM_XL = "SingleLlmXl"
    NLI_ONLY = "NliOnly"
    FLAG_EVERYTHING = "FlagEverything"


LLM_ROUTED = frozenset({VariantName.LLM_STRICT, VariantName.LLM_ONLY, VariantName.SINGLE_LLM_XL})
ABLATABLE = frozenset({"A", "E"})


@dataclass(frozen=True)
class CheckerVariant:
    name: VariantName = VariantName.STEPGAP
    stage_ablations: frozenset[str] = frozenset()
    overall_confidence_threshold: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "name", VariantName(self.name))
        object.__setattr__(self, "stage_ablations", frozenset(self.stage_ablations))
        if not self.stage_ablations <= ABLATABLE:
            raise ValueError(f"only stages {sorted(ABLATABLE)} can be ablated, got {sorted(self.stage_ablations)}")
        if self.stage_ablations and self.name not in (VariantName.STEPGAP, VariantName.LLM_ONLY):
            raise ValueError("stage ablations apply to StepGap and LlmOnly only")
        t = self.overall_confidence_threshold
        if t is not None and not 0.0 <= t <= 1.0:
            raise ValueError(f"confidence threshold out of [0,1]: {t}")
        if self.name is VariantName.LLM_ONLY and t is None:
            object.__setattr__(self, "overall_confidence_threshold", 0.5)

    @property
    def uses_llm_entailment(self) -> bool:
        return self.name in LLM_ROUTED

    @property
    def needs_llm(self) -> bool:
        return self.name not in (VariantName.NLI_ONLY, VariantName.FLAG_EVERYTHING)

    @property
    def needs_nli(self) -> bool:
        return self.name in (VariantName.STEPGAP, VariantName.NLI_ONLY)

    def without(self, stages: Iterable[str]) -> "CheckerVariant":
        return replace(self, stage_ablations=self.stage_ablations | frozenset(stages))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name.value,
            "stage_ablations": sorted(self.stage_ablations),
            "overall_confidence_threshold": self.overall_confidence_threshold,
        }


@dataclass
class Judges:
    """The judge handles a check needs, plus per-kind call tallies."""

    llm: LlmJudge | None = None
    nli: NliJudge | None = None
    calls: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1

    def require_llm(self) -> LlmJudge:
        if self.llm is None:
            raise ValueError("this variant needs an LLM judge")
        return self.llm

    def require_nli(self) -> NliJudge:
        if self.nli is None:
            raise ValueError("this variant needs an NLI judge")
        return self.nli


def has_abstention_marker(text: str) -> bool:
    low = text.lower()
    return any(m in low for m in ABSTENTION_MARKERS)


def _normalize_claim(text: str) -> str:
    text = _RETRACTION_RE.sub(" ", text.lower())
    return " ".join(re.sub(r"[^\w\s]", " ", text).split())


def detect_retraction(step: Step, previous_claim: str) -> bool:
    """Surface retraction pattern present and the claim actually changed."""
    own_text = " ".join(t for t in (step.claim_text, step.answer_text or "") if t)
    if not _RETRACTION_RE.search(own_text):
        return False
    return _normalize_claim(step.claim()) != _normalize_claim(previous_claim)


class _Trail:
    """Accumulates stage decisions and rationale fragments for one step."""

    def __init__(self) -> None:
        self.path: list[StageDecision] = []
        self.notes: list[str] = []
        self.audit: dict[str, Any] = {"nli": []}

    def add(self, stage: str, outcome: str, confidence: float | None = None, note: str = "",
            truncated: bool = False) -> None:
        self.path.append(StageDecision(stage, outcome, confidence, truncated))
        if note:
            self.notes.append(f"{_prefix(stage)}: {note}")

    def verdict(self, gap: GapType) -> GapVerdict:
        confidence = geometric_mean(d.confidence for d in self.path if d.confidence is not None)
        rationale = " | ".join(self.notes) or self.path[-1].tag
        return GapVerdict(gap, confidence, rationale, tuple(self.path), judgments=self.audit)


def _unchecked(reason: str, audit: Mapping[str, Any] | None = None) -> GapVerdict:
    return GapVerdict(
        GapType.NO_GAP,
        1.0,
        f"judge unavailable: {reason}",
        (StageDecision("unchecked", "judge_unavailable"),),
        unchecked=True,
        judgments=dict(audit or {}),
    )


_NLI_TO_GAP_D = {NliLabel.ENTAILMENT: GapType.NO_GAP, NliLabel.NEUTRAL: GapType.MB, NliLabel.CONTRADICTION: GapType.CC}
_NLI_TO_GAP_BASELINE = {
    NliLabel.ENTAILMENT: GapType.NO_GAP,
    NliLabel.NEUTRAL: GapType.IE,
    NliLabel.CONTRADICTION: GapType.CC,
}


def _entails(step: Step, context: TraceContext, premise: str, hypothesis: str, variant: CheckerVariant,
             judges: Judges, trail: _Trail, stage: str) -> tuple[NliLabel, float | None, bool]:
    if variant.uses_llm_entailment:
        judges.count(f"llm_entailment_{stage}")
        label, conf = judges.require_llm().entail(step, context, premise, hypothesis)
        trail.audit["nli"].append({"stage": stage, "premise": premise, "hypothesis": hypothesis,
                                   "label": label.value, "judge": "llm"})
        return label, conf, False
    judges.count(f"nli_{stage}")
    verdict = judges.require_nli().judge(premise, hypothesis)
    trail.audit["nli"].append({"stage": stage, "premise": premise, "hypothesis": hypothesis, **verdict.to_dict()})
    return verdict.label, verdict.confidence, verdict.truncated


def _stage_e(step: Step, context: TraceContext, evidence_prefix: Sequence[EvidenceSnippet],
             variant: CheckerVariant, judges: Judges, trail: _Trail) -> GapVerdict:
    candidates = [s for s in evidence_prefix if s.source_step < step.index]
    if not candidates:
        trail.add("E", "no_candidates", note="no earlier evidence to verify against")
        return trail.verdict(GapType.IE)
    judges.count("llm_entity_filter")
    flags, filter_conf = judges.require_llm().entity_filter(step, context, candidates)
    trail.audit["entity_filter"] = flags
    matched = [c for c, ok in zip(candidates, flags) if ok]
    if not matched:
        trail.add("E", "no_candidates", filter_conf, "no earlier snippet is about the claimed entity")
        return trail.verdict(GapType.IE)
    # most recent evidence first; stable within a step
    matched.sort(key=lambda s: -s.source_step)
    hypothesis = step.claim()
    for snippet in matched:
        label, conf, truncated = _entails(step, context, snippet.body, hypothesis, variant, judges, trail, "E")
        if label is NliLabel.ENTAILMENT:
            trail.add("E", "entailment", conf, f"entailed by earlier snippet '{snippet.doc_title}'", truncated)
            return trail.verdict(GapType.NO_GAP)
    trail.add("E", "no_entailing_prior", None, f"none of {len(matched)} entity-matched earlier snippets entails the claim")
    return trail.verdict(GapType.IE)


def _tree(step: Step, context: TraceContext, evidence_prefix: Sequence[EvidenceSnippet],
          variant: CheckerVariant, judges: Judges, trail: _Trail) -> GapVerdict:
    judges.count("llm_step")
    resp: LlmJudgeResponse = judges.require_llm().judge_step(
        step, context, evidence_prefix, ask_entailment=variant.uses_llm_entailment
    )
    trail.audit["llm"] = resp.to_wire()
    confs = resp.stage_confidences
    claim = step.claim()

    if "A" not in variant.stage_ablations:
        a = resp.alignment
        if a.is_off_target:
            trail.add("A", a.drift_type, confs.get("A"), a.alignment_reasoning or a.drift_type.replace("_", " "))
            return trail.verdict(GapType.CC)
        trail.add("A", "on_target", confs.get("A"))

    if not has_abstention_marker(claim):
        trail.add("B", "no_marker")
    else:
        b = resp.abstention
        if not b.is_abstention_step:
            trail.add("B", "not_abstention", confs.get("B"))
        elif b.abstention_is_accurate:
            trail.add("B", "grounded_abstention", confs.get("B"), b.abstention_reasoning or "abstention is grounded")
            return trail.verdict(GapType.NO_GAP)
        else:
            trail.add("B", "wrong_abstention", confs.get("B"), b.abstention_reasoning or "evidence contains the answer")
            return trail.verdict(GapType.CC)

    q = resp.quote_search
    if not q.entity_match:
        trail.add("C", "entity_mismatch", confs.get("C"), q.entity_match_reasoning or "evidence is about another entity")
        return trail.verdict(GapType.IE)
    if not claim.strip():
        trail.add("C", "no_claim", confs.get("C"), "step issues a search without a claim")
        return trail.verdict(GapType.NO_GAP)
    if not q.found_quote:
        trail.add("C", "no_quote", confs.get("C"), q.quote_search_reasoning)
        if step.step_kind() is StepKind.CONCLUSION and "E" not in variant.stage_ablations:
            return _stage_e(step, context, evidence_prefix, variant, judges, trail)
        return trail.verdict(GapType.NO_GAP)
    trail.add("C", "quote_found", confs.get("C"), f"quote '{q.evidence_quote}'")

    if variant.uses_llm_entailment:
        if resp.entailment is None:
            raise JudgeUnavailable("LLM judge returned no entailment answer")
        label, conf, truncated = resp.entailment.label, confs.get("D"), False
        trail.audit["nli"].append({"stage": "D", "premise": q.evidence_quote, "hypothesis": claim,
                                   "label": label.value, "judge": "llm"})
    else:
        label, conf, truncated = _entails(step, context, q.evidence_quote, claim, variant, judges, trail, "D")
    trail.add("D", label.value, conf, f"quote vs claim: {label.value}", truncated)
    return trail.verdict(_NLI_TO_GAP_D[label])


def _nli_only(step: Step, evidence_prefix: Sequence[EvidenceSnippet], judges: Judges, trail: _Trail) -> GapVerdict:
    claim = step.claim()
    if not claim.strip():
        trail.add("baseline", "no_claim")
        return trail.verdict(GapType.NO_GAP)
    premise = "\n".join(s.body for s in evidence_prefix if s.body.strip())
    if not premise:
        trail.add("baseline", "no_evidence", note="no evidence retrieved so far")
        return trail.verdict(GapType.IE)
    judges.count("nli_baseline")
    v = judges.require_nli().judge(premise, claim)
    trail.audit["nli"].append({"stage": "baseline", "premise": premise, "hypothesis": claim, **v.to_dict()})
    trail.add("baseline", f"nli_{v.label.value}", v.confidence, f"evidence vs claim: {v.label.value}", v.truncated)
    return trail.verdict(_NLI_TO_GAP_BASELINE[v.label])


def apply_confidence_gate(verdict: GapVerdict, threshold: float | None) -> GapVerdict:
    """Suppress a gap verdict to NoGap when its overall confidence is below ``threshold``."""
    if threshold is None or not verdict.has_gap or verdict.unchecked or verdict.confidence >= threshold:
        return verdict
    path = verdict.pipeline_path + (StageDecision("gate", "below_threshold"),)
    rationale = f"{verdict.rationale} | gate: {verdict.gap_type.value} suppressed at confidence {verdict.confidence:.3f} < {threshold}"
    return replace(verdict, gap_type=GapType.NO_GAP, pipeline_path=path, rationale=rationale)


def check_step(step: Step, evidence_prefix: Sequence[EvidenceSnippet], variant: CheckerVariant,
               judges: Judges, context: TraceContext | None = None) -> GapVerdict:
    """Run one checker invocation on ``step`` given the evidence accumulated so far."""
    context = context or TraceContext("", "")
    trail = _Trail()
    if variant.name is VariantName.FLAG_EVERYTHING:
        trail.add("baseline", "flag_everything")
        return trail.verdict(GapType.IE)
    try:
        if variant.name is VariantName.NLI_ONLY:
            verdict = _nli_only(step, evidence_prefix, judges, trail)
        else:
            verdict = _tree(step, context, evidence_prefix, variant, judges, trail)
    except JudgeUnavailable as exc:
        logger.warning("step %s of %s unchecked: %s", step.index, context.question_id or "?", exc)
        judges.count("unchecked")
        return _unchecked(str(exc), trail.audit)
    return apply_confidence_gate(verdict, variant.overall_confidence_threshold)


def check_trace(trace: ReasoningTrace, variant: CheckerVariant, judges: Judges) -> list[GapVerdict]:
    verdicts = []
    for step in trace.steps:
        prefix = accumulated_evidence(trace, step.index)
        context = TraceContext.for_step(trace, step.index)
        v = check_step(step, prefix, variant, judges, context)
        verdicts.append(replace(v, question_id=trace.question_id, step_index=step.index))
    return verdicts


def gap_exit(verdict: GapVerdict) -> tuple[str, GapType] | None:
    """The (stage, type) that emitted a gap, or None for NoGap and non-tree verdicts."""
    if not verdict.has_gap or verdict.emitting_stage not in ("A", "B", "C", "D", "E"):
        return None
    return (verdict.emitting_stage, verdict.gap_type)
