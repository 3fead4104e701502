"""LLM judge: request building, schema enforcement and an OpenAI-compatible client."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Sequence

import httpx

from ..errors import JudgeUnavailable, SchemaViolation
from ..trace import EvidenceSnippet, ReasoningTrace, Step, StepKind
from . import prompts
from .cache import Backend
from .schema import (
    ENTAILMENT_SCHEMA,
    ENTITY_FILTER_SCHEMA,
    LlmJudgeResponse,
    NliLabel,
    parse_entailment,
    response_json_schema,
)

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "STEPGAP_JUDGE_ENDPOINT"
ENV_API_KEY = "STEPGAP_JUDGE_API_KEY"
ENV_MODEL = "STEPGAP_JUDGE_MODEL"
ENV_NLI_ENDPOINT = "STEPGAP_NLI_ENDPOINT"


@dataclass(frozen=True)
class TraceContext:
    question_id: str
    question: str
    previous_steps: tuple[str, ...] = ()

    @classmethod
    def for_step(cls, trace: ReasoningTrace, step_index: int, history: int = 3) -> "TraceContext":
        earlier = trace.steps[: step_index - 1]
        summaries = tuple(step_summary(s) for s in earlier[-history:]) if history > 0 else ()
        return cls(trace.question_id, trace.question, summaries)


def step_summary(step: Step) -> str:
    if step.step_kind() is StepKind.CONCLUSION:
        return f"[{step.index}] answer: {step.answer_text}"
    text = step.claim_text or "(no claim)"
    if step.query is not None:
        text += f" | search: {step.query}"
    return f"[{step.index}] {text}"


def step_text(step: Step) -> str:
    parts = [step.claim_text] if step.claim_text else []
    if step.query is not None:
        parts.append(f"<search>{step.query}</search>")
    if step.answer_text is not None:
        parts.append(f"<answer>{step.answer_text}</answer>")
    return " ".join(parts)


def _snippet(s: EvidenceSnippet) -> dict[str, Any]:
    return {"title": s.doc_title, "lead": s.lead_sentence, "text": s.body, "step": s.source_step}


class LlmJudge:
    """Turns steps into structured requests and validates the responses.

    A response that violates the schema is re-requested once; a second
    violation is reported as :class:`JudgeUnavailable`.
    """

    def __init__(self, backend: Backend, schema_retries: int = 1):
        self.backend = backend
        self.schema_retries = schema_retries

    def _request(self, kind: str, fields: dict[str, Any], messages: list[dict[str, str]],
                 schema: dict[str, Any], parse):
        last: SchemaViolation | None = None
        for attempt in range(self.schema_retries + 1):
            payload = {"kind": kind, "fields": fields, "messages": messages, "schema": schema}
            if attempt:
                payload["attempt"] = attempt
            raw = self.backend.call(payload)
            try:
                return parse(raw)
            except SchemaViolation as exc:
                logger.warning("schema violation on %s request (attempt %d): %s", kind, attempt + 1, exc)
                last = exc
        raise JudgeUnavailable(f"judge kept violating the {kind} schema: {last}")

    def step_fields(self, step: Step, context: TraceContext, evidence_pool: Sequence[EvidenceSnippet],
                    ask_entailment: bool = False) -> dict[str, Any]:
        own = [_snippet(s) for s in evidence_pool if s.source_step == step.index]
        prior = [_snippet(s) for s in evidence_pool if s.source_step < step.index]
        conclusion = step.step_kind() is StepKind.CONCLUSION
        return {
            "question_id": context.question_id,
            "step_index": step.index,
            "step_kind": step.step_kind().value,
            "question": context.question,
            "previous_steps": list(context.previous_steps),
            "step_text": step_text(step),
            "claim": step.claim(),
            "query": step.query,
            "evidence": own,
            "global_evidence": prior if conclusion else [],
            "ask_entailment": ask_entailment,
        }

    def judge_step(self, step: Step, context: TraceContext, evidence_pool: Sequence[EvidenceSnippet],
                   ask_entailment: bool = False) -> LlmJudgeResponse:
        fields = self.step_fields(step, context, evidence_pool, ask_entailment)

        def parse(raw: dict[str, Any]) -> LlmJudgeResponse:
            resp = LlmJudgeResponse.from_wire(raw)
            if ask_entailment and resp.quote_search.found_quote and resp.entailment is None:
                raise SchemaViolation("entailment section required but missing")
            return resp

        return self._request("step", fields, prompts.step_prompt(fields), response_json_schema(ask_entailment), parse)

    def entity_filter(self, step: Step, context: TraceContext, candidates: Sequence[EvidenceSnippet]
                      ) -> tuple[list[bool], float | None]:
        fields = {
            "question_id": context.question_id,
            "step_index": step.index,
            "question": context.question,
            "claim": step.claim(),
            "candidates": [_snippet(s) for s in candidates],
        }

        def parse(raw: dict[str, Any]) -> tuple[list[bool], float | None]:
            flags = raw.get("entity_matches")
            if not isinstance(flags, list) or len(flags) != len(candidates) or not all(
                isinstance(f, bool) for f in flags
            ):
                raise SchemaViolation(f"entity_matches must hold {len(candidates)} booleans: {flags!r}")
            return flags, _confidence(raw)

        return self._request("entity_filter", fields, prompts.entity_filter_prompt(fields), ENTITY_FILTER_SCHEMA, parse)

    def entail(self, step: Step, context: TraceContext, premise: str, hypothesis: str
               ) -> tuple[NliLabel, float | None]:
        fields = {
            "question_id": context.question_id,
            "step_index": step.index,
            "question": context.question,
            "premise": premise,
            "hypothesis": hypothesis,
        }

        def parse(raw: dict[str, Any]) -> tuple[NliLabel, float | None]:
            return parse_entailment(raw).label, _confidence(raw)

        return self._request("entailment", fields, prompts.entailment_prompt(fields), ENTAILMENT_SCHEMA, parse)


def _confidence(raw: dict[str, Any]) -> float | None:
    value = raw.get("confidence")
    if value is None:
        return None
    if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise SchemaViolation(f"confidence out of [0,1]: {value!r}")
    return float(value)


# --------------------------------------------------------------------------
# OpenAI-compatible chat-completions client

# decision fields whose chosen token probability is a stage confidence
_CONFIDENCE_FIELDS = {
    "is_off_target": "A",
    "is_abstention_step": "B",
    "entity_match": "C",
    "label": "D",
}
_KEY_BEFORE_VALUE = re.compile(r'"(\w+)"\s*:\s*"?$')


def stage_confidences_from_logprobs(tokens: Sequence[dict[str, Any]]) -> dict[str, float]:
    """Probability of the first value token emitted after each decision key."""
    out: dict[str, float] = {}
    text = ""
    for tok in tokens:
        piece = tok.get("token", "")
        m = _KEY_BEFORE_VALUE.search(text)
        if m and piece.strip().strip('"') and m.group(1) in _CONFIDENCE_FIELDS:
            stage = _CONFIDENCE_FIELDS[m.group(1)]
            out.setdefault(stage, math.exp(float(tok.get("logprob", 0.0))))
        text += piece
    return out


class OpenAICompatBackend:
    """POSTs chat-completion requests in strict ``json_schema`` mode."""

    backend_id = "openai-chat"

    def __init__(
        self,
        endpoint: str | None = None,
        model_name: str | None = None,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        max_concurrency: int = 8,
        client: httpx.Client | None = None,
    ):
        self.endpoint = (endpoint or os.environ.get(ENV_ENDPOINT) or "https://api.openai.com/v1").rstrip("/")
        self.model_name = model_name or os.environ.get(ENV_MODEL) or "gpt-4.1-mini"
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.max_retries = max_retries
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def _body(self, payload: dict[str, Any]) -> dict[str, Any]:
        return {
            "model": self.model_name,
            "messages": payload["messages"],
            "temperature": 0,
            "logprobs": True,
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": f"stepgap_{payload['kind']}", "strict": True, "schema": payload["schema"]},
            },
        }

    def call(self, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.endpoint}/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                with self._slots:
                    resp = self._client.post(url, json=self._body(payload), headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                choice = resp.json()["choices"][0]
                break
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                time.sleep(min(2**attempt, 16))
        else:
            raise JudgeUnavailable(f"{url} failed after {self.max_retries} attempts: {last}")
        content = choice.get("message", {}).get("content") or ""
        try:
            parsed = json.loads(content)
        except json.JSONDecodeError:
            # surfaces as a schema violation so the judge re-asks once
            return {"_unparseable": content}
        logprobs = (choice.get("logprobs") or {}).get("content")
        if payload["kind"] == "step" and logprobs:
            parsed["stage_confidences"] = stage_confidences_from_logprobs(logprobs)
        elif logprobs:
            confs = stage_confidences_from_logprobs(logprobs)
            if confs:
                parsed["confidence"] = min(confs.values())
        return parsed
