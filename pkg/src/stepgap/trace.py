"""Search-interleaved reasoning traces: data model, tag-grammar parser and file IO.

A generator transcript is segmented into steps. Each ``<search>...</search>``
(or Hermes-style ``<tool_call>`` whose action is ``search``) and each
``<answer>...</answer>`` closes a step; the free text preceding the tag is the
step's claim, and an ``<information>`` / ``<tool_response>`` block directly
after a search supplies the evidence retrieved by that search.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

from .errors import IndexOutOfRange, MalformedRecord, MalformedTrace
from .labels import GapType

logger = logging.getLogger(__name__)


class StepKind(str, Enum):
    INFERENCE = "inference"
    CONCLUSION = "conclusion"


@dataclass(frozen=True)
class EvidenceSnippet:
    doc_title: str
    lead_sentence: str
    body: str
    source_step: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.doc_title, self.body)

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_title": self.doc_title,
            "lead_sentence": self.lead_sentence,
            "body": self.body,
            "source_step": self.source_step,
        }


@dataclass(frozen=True)
class Step:
    index: int
    claim_text: str
    query: str | None = None
    evidence: tuple[EvidenceSnippet, ...] = ()
    answer_text: str | None = None
    token_span: tuple[int, int] | None = None
    raw_text: str = ""

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("step index is 1-based")
        if self.token_span is not None:
            lo, hi = self.token_span
            if lo < 0 or lo >= hi:
                raise ValueError(f"invalid token span {self.token_span} for step {self.index}")

    def step_kind(self) -> StepKind:
        if self.answer_text is not None:
            return StepKind.CONCLUSION
        return StepKind.INFERENCE

    @property
    def is_search(self) -> bool:
        return self.query is not None and self.answer_text is None

    @property
    def is_answer(self) -> bool:
        return self.answer_text is not None

    def claim(self) -> str:
        """The text a gap check treats as the step's hypothesis."""
        if self.step_kind() is StepKind.CONCLUSION:
            return self.answer_text or ""
        return self.claim_text


@dataclass(frozen=True)
class ReasoningTrace:
    question_id: str
    question: str
    steps: tuple[Step, ...]
    gold_answer: str | None = None
    predicted_answer: str | None = None
    em_correct: bool | None = None
    rollout_id: str | None = None

    def __post_init__(self) -> None:
        for expected, step in enumerate(self.steps, start=1):
            if step.index != expected:
                raise ValueError(
                    f"{self.question_id}: step indices must be contiguous 1..n, got {step.index} at {expected}"
                )

    def __len__(self) -> int:
        return len(self.steps)

    def step(self, i: int) -> Step:
        if not 1 <= i <= len(self.steps):
            raise IndexOutOfRange(f"step {i} outside 1..{len(self.steps)}")
        return self.steps[i - 1]

    @property
    def num_tokens(self) -> int | None:
        spans = [s.token_span for s in self.steps if s.token_span is not None]
        return max(hi for _, hi in spans) if spans else None


@dataclass(frozen=True)
class GoldStepLabel:
    question_id: str
    step_index: int
    label: GapType
    justification: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", GapType.parse(self.label))


def accumulated_evidence(trace: ReasoningTrace, i: int) -> list[EvidenceSnippet]:
    """Union of the evidence of steps 1..i, first occurrence kept, in step order."""
    if not 1 <= i <= len(trace.steps):
        raise IndexOutOfRange(f"step {i} outside 1..{len(trace.steps)}")
    seen: set[tuple[str, str]] = set()
    pool: list[EvidenceSnippet] = []
    for step in trace.steps[:i]:
        for snippet in step.evidence:
            if snippet.key in seen:
                continue
            seen.add(snippet.key)
            pool.append(snippet)
    return pool


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_tokens(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


def token_f1(a: str, b: str) -> float:
    ta, tb = normalize_tokens(a), normalize_tokens(b)
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    overlap = sum((Counter(ta) & Counter(tb)).values())
    return 2 * overlap / (len(ta) + len(tb))


def exact_match(prediction: str, gold: str) -> bool:
    def norm(s: str) -> str:
        s = s.lower().translate(_PUNCT_TABLE)
        s = re.sub(r"\b(a|an|the)\b", " ", s)
        return " ".join(s.split())

    return norm(prediction) == norm(gold)


# --------------------------------------------------------------------------
# parser

_OPEN_RE = re.compile(r"<(search|answer|tool_call|information|tool_response)>")
_STRAY_CLOSE_RE = re.compile(r"</(search|answer|tool_call|information|tool_response)>")
_THINK_RE = re.compile(r"</?think>")
# quoted titles may themselves contain parentheses: Doc 1(Title: "Tom Hale (footballer)")
_DOC_RE = re.compile(r"Doc\s*\d+\s*\(Title:\s*(?:\"(.*?)\"|(.*?))\)\s*", re.S)
_SENT_END_RE = re.compile(r"(?<=[.!?])\s+")
_EVIDENCE_TAGS = {"information", "tool_response"}
_RESPONSE_FOR = {"search": "information", "tool_call": "tool_response"}


def _lead_sentence(body: str) -> str:
    body = body.strip()
    return _SENT_END_RE.split(body, maxsplit=1)[0] if body else ""


def parse_evidence_block(block: str, source_step: int) -> list[EvidenceSnippet]:
    """Split a retrieval block into snippets.

    Understands a JSON list of ``{"title"|"doc_title", "text"|"body"}``
    objects and the ``Doc k(Title: ...) body`` listing; anything else becomes
    a single untitled snippet.
    """
    text = block.strip()
    if not text:
        return []
    if text[0] in "[{":
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = None
        if isinstance(data, dict):
            data = data.get("results", data.get("documents", [data]))
        if isinstance(data, list) and all(isinstance(d, dict) for d in data):
            out = []
            for d in data:
                title = str(d.get("doc_title", d.get("title", "")))
                body = str(d.get("body", d.get("text", d.get("contents", ""))))
                out.append(
                    EvidenceSnippet(title, str(d.get("lead_sentence", _lead_sentence(body))), body, source_step)
                )
            return out
    matches = list(_DOC_RE.finditer(text))
    if not matches:
        return [EvidenceSnippet("", _lead_sentence(text), text, source_step)]
    out = []
    for m, nxt in zip(matches, matches[1:] + [None]):
        title = (m.group(1) if m.group(1) is not None else m.group(2)).strip()
        body = text[m.end() : nxt.start() if nxt else len(text)].strip()
        out.append(EvidenceSnippet(title, _lead_sentence(body), body, source_step))
    return out


def _clean_claim(fragments: Iterable[str]) -> str:
    text = " ".join(_THINK_RE.sub(" ", f) for f in fragments)
    return " ".join(text.split())


def _find_close(raw: str, tag: str, start: int) -> int:
    close = raw.find(f"</{tag}>", start)
    if close < 0:
        raise MalformedTrace(f"unclosed <{tag}> at offset {start}")
    return close


def _tool_call_query(payload: str) -> str | None:
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise MalformedTrace(f"tool_call is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedTrace("tool_call must be a JSON object")
    action = obj.get("action", obj.get("name"))
    if action != "search":
        return None
    args = obj.get("arguments", obj.get("parameters", {}))
    if isinstance(args, str):
        try:
            args = json.loads(args)
        except json.JSONDecodeError:
            args = {"query": args}
    query = obj.get("query")
    if query is None and isinstance(args, dict):
        query = args.get("query", args.get("q"))
    return str(query) if query is not None else ""


@dataclass
class _Pending:
    start: int
    fragments: list[str] = field(default_factory=list)
    blocks: list[str] = field(default_factory=list)


def _check_free_text(segment: str, offset: int) -> None:
    stray = _STRAY_CLOSE_RE.search(segment)
    if stray:
        raise MalformedTrace(f"unmatched {stray.group(0)} at offset {offset + stray.start()}")


def segment_steps(raw: str) -> list[dict[str, Any]]:
    """Split generator output into raw step records (no evidence overrides)."""
    if not raw or not raw.strip():
        raise MalformedTrace("empty generator output")
    steps: list[dict[str, Any]] = []
    pending = _Pending(start=0)
    pos = 0

    def emit(end: int, query: str | None, answer: str | None) -> None:
        nonlocal pending
        index = len(steps) + 1
        evidence: list[EvidenceSnippet] = []
        for block in pending.blocks:
            evidence.extend(parse_evidence_block(block, index))
        steps.append(
            {
                "index": index,
                "claim_text": _clean_claim(pending.fragments),
                "query": query,
                "answer_text": answer,
                "evidence": evidence,
                "raw_text": raw[pending.start : end],
            }
        )
        pending = _Pending(start=end)

    while True:
        m = _OPEN_RE.search(raw, pos)
        if m is None:
            _check_free_text(raw[pos:], pos)
            pending.fragments.append(raw[pos:])
            break
        _check_free_text(raw[pos : m.start()], pos)
        pending.fragments.append(raw[pos : m.start()])
        tag = m.group(1)
        close = _find_close(raw, tag, m.end())
        content = raw[m.end() : close]
        end = close + len(tag) + 3
        if tag in _EVIDENCE_TAGS:
            pending.blocks.append(content)
            pos = end
            continue
        if tag == "answer":
            emit(end, None, content.strip())
            pos = end
            continue
        query = content.strip() if tag == "search" else _tool_call_query(content)
        # the retrieval block answering this search belongs to the same step
        resp_tag = _RESPONSE_FOR[tag]
        follow = re.compile(r"\s*<(" + resp_tag + r"|information)>").match(raw, end)
        if follow:
            resp_close = _find_close(raw, follow.group(1), follow.end())
            pending.blocks.append(raw[follow.end() : resp_close])
            end = resp_close + len(follow.group(1)) + 3
        emit(end, query, None)
        pos = end

    tail = raw[pending.start :]
    if tail.strip() and (_clean_claim(pending.fragments) or pending.blocks):
        emit(len(raw), None, None)
    elif steps:
        steps[-1]["raw_text"] += tail
    else:
        raise MalformedTrace("no steps found")
    return steps


def _snippets_from_records(records: Sequence[Mapping[str, Any]], source_step: int) -> tuple[EvidenceSnippet, ...]:
    out = []
    for rec in records:
        body = str(rec.get("body", rec.get("text", "")))
        title = str(rec.get("doc_title", rec.get("title", "")))
        lead = rec.get("lead_sentence")
        out.append(EvidenceSnippet(title, str(lead) if lead is not None else _lead_sentence(body), body, source_step))
    return tuple(out)


def parse_trace(raw: str, question_metadata: Mapping[str, Any]) -> ReasoningTrace:
    """Parse full generator output into a :class:`ReasoningTrace`.

    ``question_metadata`` carries ``question_id`` and ``question`` and may
    carry ``gold_answer``, ``predicted_answer``, ``em_correct``,
    ``rollout_id``, per-step ``evidence`` (mapping step ordinal to a list of
    snippet objects, replacing what was parsed for that step) and
    ``token_spans`` (one ``[l, r)`` pair per step).
    """
    records = segment_steps(raw)
    overrides = question_metadata.get("evidence") or {}
    spans = question_metadata.get("token_spans")
    if spans is not None and len(spans) != len(records):
        raise MalformedTrace(f"token_spans has {len(spans)} entries for {len(records)} steps")

    steps = []
    for rec in records:
        idx = rec["index"]
        evidence = tuple(rec["evidence"])
        override = overrides.get(str(idx), overrides.get(idx)) if isinstance(overrides, Mapping) else None
        if override is not None:
            evidence = _snippets_from_records(override, idx)
        span = tuple(spans[idx - 1]) if spans is not None and spans[idx - 1] is not None else None
        try:
            steps.append(
                Step(
                    index=idx,
                    claim_text=rec["claim_text"],
                    query=rec["query"],
                    evidence=evidence,
                    answer_text=rec["answer_text"],
                    token_span=span,  # type: ignore[arg-type]
                    raw_text=rec["raw_text"],
                )
            )
        except ValueError as exc:
            raise MalformedTrace(str(exc)) from None

    predicted = question_metadata.get("predicted_answer")
    if predicted is None:
        answers = [s.answer_text for s in steps if s.answer_text is not None]
        predicted = answers[-1] if answers else None
    gold = question_metadata.get("gold_answer")
    em = question_metadata.get("em_correct")
    if em is None and gold is not None and predicted is not None:
        golds = gold if isinstance(gold, list) else [gold]
        em = any(exact_match(predicted, g) for g in golds)
    if isinstance(gold, list):
        gold = gold[0] if gold else None
    return ReasoningTrace(
        question_id=str(question_metadata["question_id"]),
        question=str(question_metadata.get("question", "")),
        steps=tuple(steps),
        gold_answer=gold,
        predicted_answer=predicted,
        em_correct=None if em is None else bool(em),
        rollout_id=question_metadata.get("rollout_id"),
    )


def whitespace_token_count(text: str) -> int:
    return len(text.split())


def with_token_spans(
    trace: ReasoningTrace, count_tokens: Callable[[str], int] = whitespace_token_count
) -> ReasoningTrace:
    """Assign consecutive ``[l, r)`` spans from a token counter over each step's raw text."""
    steps = []
    offset = 0
    for step in trace.steps:
        n = max(1, count_tokens(step.raw_text))
        steps.append(replace(step, token_span=(offset, offset + n)))
        offset += n
    return replace(trace, steps=tuple(steps))


# --------------------------------------------------------------------------
# line-delimited files


def _iter_json_lines(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
            if not isinstance(obj, dict):
                raise MalformedRecord(f"{path}:{lineno}: record is not an object")
            yield lineno, obj


def trace_from_record(record: Mapping[str, Any]) -> ReasoningTrace:
    for key in ("question_id", "raw_output"):
        if key not in record:
            raise MalformedRecord(f"trace record missing {key!r}")
    return parse_trace(record["raw_output"], record)


def read_traces(path: str | Path) -> tuple[list[ReasoningTrace], list[str]]:
    """Read a trace file; returns parsed traces and the ids of skipped questions."""
    traces: list[ReasoningTrace] = []
    skipped: list[str] = []
    for lineno, rec in _iter_json_lines(path):
        try:
            traces.append(trace_from_record(rec))
        except MalformedTrace as exc:
            qid = str(rec.get("question_id", f"line{lineno}"))
            logger.warning("skipping %s: %s", qid, exc)
            skipped.append(qid)
    return traces, skipped


def read_gold_labels(path: str | Path) -> list[GoldStepLabel]:
    labels = []
    for lineno, rec in _iter_json_lines(path):
        try:
            labels.append(
                GoldStepLabel(
                    question_id=str(rec["question_id"]),
                    step_index=int(rec["step_index"]),
                    label=rec["label"],
                    justification=rec.get("justification"),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
    return labels


def write_json_lines(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
