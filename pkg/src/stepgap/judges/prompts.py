"""Prompt assembly for the LLM judge.

One prompt covers alignment, abstention and entity/quote search.  The
alignment section has an inference and a conclusion variant chosen by step
kind; conclusion steps with earlier evidence get a GLOBAL EVIDENCE block.
"""

from __future__ import annotations

import json
from typing import Any, Sequence

SYSTEM = (
    "You audit one step of a search-augmented multi-hop reasoning trace. "
    "Reply with a single JSON object that follows the provided schema exactly."
)

ALIGNMENT_INFERENCE = """\
SECTION A - SUBQUESTION ALIGNMENT
Decide whether this step aims at the entity and relation the question needs.
A retrieval miss is not misalignment: judge the step text, not the documents.
Set is_off_target = false when the step's entity appears in the question, is a
correct intermediate result, or is right even though retrieval returned the
wrong page.
Set is_off_target = true only when the step itself names the wrong target:
  entity_drift   - wrong subject
  relation_drift - wrong predicate (e.g. asks for a film's director when the
                   question needs the book's author)
  scope_drift    - a sub-part instead of the whole, or the reverse
drift_type is "none" exactly when is_off_target is false."""

ALIGNMENT_CONCLUSION = """\
SECTION A - CONCLUSION ALIGNMENT
If the answer is N/A or unknown, set is_off_target = false and continue to
section B.
Otherwise compare answer types:
  1. the attribute type the question asks for (place, year, person, country,
     yes/no, ...)
  2. the type of the value the answer gives
  3. a type mismatch is relation_drift; a wrong value of the right type is NOT
     drift.
drift_type is "none" exactly when is_off_target is false."""

ABSTENTION = """\
SECTION B - ABSTENTION
(ignore if section A flagged the step)
Does the step claim the answer is N/A or cannot be determined?
  - the evidence really lacks the fact: is_abstention_step = true,
    abstention_is_accurate = true
  - the evidence contains the fact: is_abstention_step = true,
    abstention_is_accurate = false
  - not an abstention: is_abstention_step = false"""

ENTITY_QUOTE = """\
SECTION C - ENTITY CONSISTENCY AND QUOTE
(ignore if section A or B flagged the step)
1. Which entity does the step target?
2. Which entity is the evidence about? Look at each document title and its
   first sentence.
3. Same entity -> entity_match = true and search for a quote.
   Different entity -> entity_match = false, found_quote = false.
A quote from a page about a different entity never counts.
Quote search (only when entity_match = true): copy an exact 5-20 word span of
the evidence that concerns the same entity and bears on the step's claim.
If none exists, found_quote = false and evidence_quote = ""."""

ENTAILMENT = """\
SECTION D - ENTAILMENT
(only when section C found a quote)
Does the quote, on its own, entail the step's claim? Answer "entailment",
"neutral" or "contradiction"."""


def _evidence_json(snippets: Sequence[dict[str, Any]]) -> str:
    return json.dumps(list(snippets), ensure_ascii=False, indent=1)


def step_prompt(fields: dict[str, Any]) -> list[dict[str, str]]:
    """Chat messages for a step judgment built from the request fields."""
    conclusion = fields["step_kind"] == "conclusion"
    parts: list[str] = []
    if conclusion and fields.get("global_evidence"):
        parts.append("GLOBAL EVIDENCE (retrieved at earlier steps)\n" + _evidence_json(fields["global_evidence"]))
    parts.append(ALIGNMENT_CONCLUSION if conclusion else ALIGNMENT_INFERENCE)
    parts.append(ABSTENTION)
    parts.append(ENTITY_QUOTE)
    if fields.get("ask_entailment"):
        parts.append(ENTAILMENT)
    previous = fields.get("previous_steps") or []
    parts.append(
        "\n".join(
            [
                f"QUESTION: {fields['question']}",
                "PREVIOUS STEPS:" if previous else "PREVIOUS STEPS: (none)",
                *[f"  - {p}" for p in previous],
                f"CURRENT STEP ({fields['step_kind']}): {fields['step_text']}",
                "EVIDENCE:",
                _evidence_json(fields.get("evidence") or []),
            ]
        )
    )
    return [{"role": "system", "content": SYSTEM}, {"role": "user", "content": "\n\n".join(parts)}]


def entity_filter_prompt(fields: dict[str, Any]) -> list[dict[str, str]]:
    body = "\n".join(
        [
            "For each candidate document below, decide whether it is about the entity the",
            "step's claim concerns (check its title and first sentence). Return one boolean",
            "per candidate, in order, as entity_matches.",
            f"QUESTION: {fields['question']}",
            f"CLAIM: {fields['claim']}",
            "CANDIDATES:",
            _evidence_json(fields["candidates"]),
        ]
    )
    return [{"role": "system", "content": SYSTEM}, {"role": "user", "content": body}]


def entailment_prompt(fields: dict[str, Any]) -> list[dict[str, str]]:
    body = "\n".join(
        [
            "Does the premise entail the hypothesis? Answer entailment, neutral or contradiction.",
            f"QUESTION: {fields['question']}",
            f"PREMISE: {fields['premise']}",
            f"HYPOTHESIS: {fields['hypothesis']}",
        ]
    )
    return [{"role": "system", "content": SYSTEM}, {"role": "user", "content": body}]
