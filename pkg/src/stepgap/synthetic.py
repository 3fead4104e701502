"""Synthetic benchmark shaped like the 82-question / 181-step human evaluation set.

Every step is given a planned checker route (e.g. ``d_neutral``: quote found,
NLI neutral -> MB) and the generator writes matching scripted-judge entries,
so running the checker with scripted backends reproduces the planned
verdicts exactly.  Plan totals:

* 2WikiMultiHopQA 29 Q / 66 steps, HotpotQA 23 / 53, MuSiQue 30 / 62;
  13 questions answered correctly;
* StepGap verdicts 74 NoGap / 69 IE / 27 CC / 11 MB;
* 56 of 69 wrong-answer questions flagged, 12 of 13 correct ones flagged;
  first flagged type on wrong answers 44 IE / 6 CC / 6 MB;
* 107 gold gaps (59%), 77 of them flagged.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .judges.scripted import write_script
from .labels import GapType
from .trace import write_json_lines

DATASETS = (
    # name, questions, steps, correct, three-step questions, unflagged wrong, unflagged correct
    ("2WikiMultiHopQA", 29, 66, 6, 8, 5, 1),
    ("HotpotQA", 23, 53, 4, 7, 4, 0),
    ("MuSiQue", 30, 62, 3, 2, 4, 0),
)

FIRST_GAP_WRONG = {"IE": 44, "CC": 6, "MB": 6}
FIRST_GAP_CORRECT = {"IE": 8, "CC": 3, "MB": 1}
LATER_GAPS = {"IE": 17, "CC": 18, "MB": 4}
FALSE_POSITIVES = 30
FALSE_NEGATIVES = {"IE": 20, "MB": 6, "CC": 4}
MISTYPED = 9

_FIRST = ["Anna", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Ines", "Jonas"]
_LAST = ["Albrecht", "Berger", "Castell", "Dorner", "Engel", "Falk", "Gruber", "Hahn", "Imhof", "Jansen"]
_PROFESSIONS = ["physicist", "actress", "composer", "novelist", "architect", "painter", "director", "chemist"]
_RELATIONS = [
    ("was born in", "birthplace", ["Bremen", "Leeds", "Graz", "Lyon", "Turin", "Aarhus", "Porto", "Gdansk"]),
    ("directed", "films directed", ["Silent Harbor", "The Long Field", "Glass River", "North Line", "Paper Moons"]),
    ("is a citizen of", "nationality", ["Germany", "Britain", "Austria", "France", "Italy", "Denmark"]),
    ("founded a company in", "company founding year", ["1921", "1934", "1948", "1957", "1966", "1973"]),
    ("married", "spouse", ["Lotte Weber", "Paul Kern", "Mira Stahl", "Otto Rainer", "Vera Lind"]),
    ("studied at", "education", ["Heidelberg University", "Trinity College", "ETH Zurich", "Sorbonne"]),
]

ROUTES_INFERENCE = {
    "NoGap": ["d_entail", "c_noquote", "d_entail", "b_grounded"],
    "IE": ["c_mismatch"],
    "CC": ["a_drift", "d_contra", "a_drift", "b_wrong"],
    "MB": ["d_neutral"],
}
ROUTES_CONCLUSION = {
    "NoGap": ["d_entail", "e_entail"],
    "IE": ["e_none", "c_mismatch"],
    "CC": ["d_contra", "a_drift", "b_wrong"],
    "MB": ["d_neutral"],
}
ROUTE_LABEL = {
    "d_entail": "NoGap", "c_noquote": "NoGap", "b_grounded": "NoGap", "e_entail": "NoGap",
    "c_mismatch": "IE", "e_none": "IE",
    "a_drift": "CC", "d_contra": "CC", "b_wrong": "CC",
    "d_neutral": "MB",
}
DRIFTS = ["relation_drift", "entity_drift", "scope_drift"]
NLI_SCORES = {
    "entailment": [0.91, 0.06, 0.03],
    "neutral": [0.12, 0.80, 0.08],
    "contradiction": [0.04, 0.09, 0.87],
}


@dataclass
class StepPlan:
    question_id: str
    step_index: int
    kind: str
    route: str
    predicted: str
    gold: str = "NoGap"
    drift: str = "none"


@dataclass
class SyntheticBenchmark:
    traces: list[dict[str, Any]]
    gold: list[dict[str, Any]]
    llm_script: list[dict[str, Any]]
    nli_script: list[dict[str, Any]]
    plan: list[StepPlan] = field(default_factory=list)

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "traces": d / "traces.jsonl",
            "gold": d / "gold.jsonl",
            "llm_script": d / "llm_script.jsonl",
            "nli_script": d / "nli_script.jsonl",
        }
        write_json_lines(paths["traces"], self.traces)
        write_json_lines(paths["gold"], self.gold)
        write_script(paths["llm_script"], self.llm_script)
        write_script(paths["nli_script"], self.nli_script)
        return paths


def _expand(counts: dict[str, int]) -> list[str]:
    return [k for k, n in counts.items() for _ in range(n)]


def _question_layout(rng: random.Random) -> list[dict[str, Any]]:
    questions = []
    for name, n_q, n_steps, n_correct, n_three, unflag_wrong, unflag_correct in DATASETS:
        assert 2 * n_q + n_three == n_steps
        roles = (
            [("unflagged", False)] * unflag_wrong
            + [("unflagged", True)] * unflag_correct
            + [("flagged", True)] * (n_correct - unflag_correct)
            + [("flagged", False)] * (n_q - unflag_wrong - n_correct)
        )
        flagged_idx = [i for i, (r, _) in enumerate(roles) if r == "flagged"]
        three = set(rng.sample(flagged_idx, n_three))
        for i, (role, correct) in enumerate(roles):
            questions.append(
                {"dataset": name, "role": role, "correct": correct, "n_steps": 3 if i in three else 2}
            )
    rng.shuffle(questions)
    for k, q in enumerate(questions):
        q["question_id"] = f"q{k:03d}"
    return questions


def _label_sequences(questions: list[dict[str, Any]], rng: random.Random) -> None:
    flagged = [q for q in questions if q["role"] == "flagged"]
    firsts_wrong = _expand(FIRST_GAP_WRONG)
    firsts_right = _expand(FIRST_GAP_CORRECT)
    rng.shuffle(firsts_wrong)
    rng.shuffle(firsts_right)
    later = _expand(LATER_GAPS)
    rng.shuffle(later)

    two = [q for q in flagged if q["n_steps"] == 2]
    three = [q for q in flagged if q["n_steps"] == 3]
    two_patterns = ["NG"] * 26 + ["GX"] * (len(two) - 26)
    three_patterns = ["NGX"] * (len(three) - 3) + ["NNG"] * 3
    rng.shuffle(two_patterns)
    rng.shuffle(three_patterns)
    for q, pat in zip(two + three, two_patterns + three_patterns):
        first = (firsts_right if q["correct"] else firsts_wrong).pop()
        seq = []
        for ch in pat:
            seq.append("NoGap" if ch == "N" else first if ch == "G" else later.pop())
        q["labels"] = seq
    for q in questions:
        if q["role"] == "unflagged":
            q["labels"] = ["NoGap"] * q["n_steps"]
    assert not firsts_wrong and not firsts_right and not later


def _assign_gold(plans: list[StepPlan], rng: random.Random) -> None:
    gaps = [p for p in plans if p.predicted != "NoGap"]
    clean = [p for p in plans if p.predicted == "NoGap"]
    fp = set(id(p) for p in rng.sample(gaps, FALSE_POSITIVES))
    fn_types = _expand(FALSE_NEGATIVES)
    fn = rng.sample(clean, len(fn_types))
    for p in plans:
        p.gold = p.predicted if p.predicted != "NoGap" and id(p) not in fp else "NoGap"
    for p, t in zip(fn, fn_types):
        p.gold = t
    tp = [p for p in gaps if id(p) not in fp]
    for p in rng.sample(tp, MISTYPED):
        p.gold = {"IE": "MB", "MB": "IE", "CC": "IE"}[p.predicted]


def _conf(rng: random.Random) -> float:
    return round(rng.uniform(0.55, 0.99), 3)


def _stage_confidences(rng: random.Random, route: str) -> dict[str, float]:
    confs = {"A": _conf(rng), "B": _conf(rng), "C": _conf(rng), "D": _conf(rng)}
    # the judge is unsure about some neutral calls; a 0.5 gate suppresses these
    if route == "d_neutral" and rng.random() < 0.5:
        confs["C"] = confs["D"] = round(rng.uniform(0.2, 0.35), 3)
    return confs


def synthetic_benchmark(seed: int = 0) -> SyntheticBenchmark:
    rng = random.Random(seed)
    questions = _question_layout(rng)
    _label_sequences(questions, rng)
    names = [f"{f} {l}" for f in _FIRST for l in _LAST]
    rng.shuffle(names)

    traces, llm_script, nli_script, plans = [], [], [], []
    counters: dict[tuple[str, str], int] = {}

    def next_route(kind: str, label: str) -> str:
        table = ROUTES_CONCLUSION if kind == "conclusion" else ROUTES_INFERENCE
        k = counters.get((kind, label), 0)
        counters[(kind, label)] = k + 1
        return table[label][k % len(table[label])]

    drift_k = 0
    llm_disagree_k = 0
    for qn, q in enumerate(questions):
        qid = q["question_id"]
        subject = names[qn]
        other = names[(qn + 41) % len(names)]
        profession = _PROFESSIONS[qn % len(_PROFESSIONS)]
        raw_parts: list[str] = []
        prior: list[dict[str, str]] = []  # snippets of earlier steps: title, body
        n = q["n_steps"]
        final_rel, _, final_pool = _RELATIONS[(qn + n) % len(_RELATIONS)]
        final_value = final_pool[(qn * 3 + n) % len(final_pool)]
        wrong_value = final_pool[(qn * 3 + n + 1) % len(final_pool)]
        answer = f"{subject} {final_rel} {final_value}"
        gold_answer = answer if q["correct"] else f"{subject} {final_rel} {wrong_value}"

        for i in range(1, n + 1):
            kind = "conclusion" if i == n else "inference"
            label = q["labels"][i - 1]
            route = next_route(kind, label)
            plan = StepPlan(qid, i, kind, route, label)
            if route == "a_drift":
                plan.drift = DRIFTS[drift_k % len(DRIFTS)]
                drift_k += 1
            plans.append(plan)

            rel, rel_query, pool = _RELATIONS[(qn + i) % len(_RELATIONS)]
            value = pool[(qn * 7 + i) % len(pool)]
            if kind == "inference":
                if route in ("b_grounded", "b_wrong"):
                    claim = f"The {rel_query} of {subject} is unknown."
                else:
                    claim = f"{subject} {rel} {value}."
                    if route == "d_neutral":
                        claim = f"{subject} {rel} {value}, so {subject} held {value} citizenship."
                title = other if route == "c_mismatch" else subject
                body = f"{title} is a {profession}. {title} {rel} {value} according to official records."
                quote = f"{title} {rel} {value} according to official records"
                query = f"{subject} {rel_query}"
                raw_parts.append(
                    f"<think>{claim}</think>\n<search>{query}</search>\n"
                    f"<information>Doc 1(Title: \"{title}\") {body}</information>\n"
                )
                hypothesis = claim
                own_snippet = {"title": title, "body": body}
            else:
                step_answer = "cannot be determined" if route == "b_wrong" else answer
                raw_parts.append(f"<think>So the final answer follows.</think>\n<answer>{step_answer}</answer>")
                hypothesis = step_answer
                last = prior[-1]
                quote = last["body"].split(". ", 1)[1].rstrip(".")
                own_snippet = None

            alignment = {"is_off_target": False, "drift_type": "none", "alignment_reasoning": "on target"}
            if route == "a_drift":
                alignment = {"is_off_target": True, "drift_type": plan.drift,
                             "alignment_reasoning": f"{plan.drift.replace('_', ' ')} away from the question"}
            abstention = {"is_abstention_step": False, "abstention_is_accurate": False, "abstention_reasoning": ""}
            if route == "b_grounded":
                abstention = {"is_abstention_step": True, "abstention_is_accurate": True,
                              "abstention_reasoning": "evidence does not state it"}
            elif route == "b_wrong":
                abstention = {"is_abstention_step": True, "abstention_is_accurate": False,
                              "abstention_reasoning": "evidence states the answer"}
            found = route in ("d_entail", "d_neutral", "d_contra", "a_drift", "b_wrong", "b_grounded")
            entity = route != "c_mismatch"
            quote_search = {
                "entity_match": entity,
                "entity_match_reasoning": "same entity" if entity else f"evidence is about {other}",
                "found_quote": found and entity,
                "evidence_quote": quote if found and entity else "",
                "quote_search_reasoning": "span located" if found else "no supporting span",
            }
            nli_label = {"d_neutral": "neutral", "d_contra": "contradiction"}.get(route, "entailment")
            llm_label = nli_label
            if route in ("d_entail", "d_neutral"):
                llm_disagree_k += 1
                if llm_disagree_k % 4 == 0:
                    llm_label = "contradiction" if route == "d_entail" else "entailment"
            response = {
                "step_minus1_alignment": alignment,
                "step_0_abstention_check": abstention,
                "step_1_quote_search": quote_search,
                "step_2_entailment": {"label": llm_label, "entailment_reasoning": "judged against quote"},
                "stage_confidences": _stage_confidences(rng, route),
            }
            llm_script.append({"match": {"kind": "step", "question_id": qid, "step_index": i}, "response": response})
            if found and entity and claim_needs_nli(route, kind, hypothesis):
                nli_script.append({"match": {"premise": quote, "hypothesis": hypothesis},
                                   "scores": NLI_SCORES[nli_label]})

            if kind == "conclusion" and route in ("e_entail", "e_none"):
                flags = [True] * len(prior)
                if route == "e_none" and len(prior) > 1:
                    flags[0] = False
                llm_script.append({"match": {"kind": "entity_filter", "question_id": qid, "step_index": i},
                                   "response": {"entity_matches": flags, "reasoning": "title check",
                                                "confidence": _conf(rng)}})
                for j, snip in enumerate(prior):
                    if not flags[j]:
                        continue
                    e_label = "entailment" if route == "e_entail" and j == len(prior) - 1 else "neutral"
                    nli_script.append({"match": {"premise": snip["body"], "hypothesis": hypothesis},
                                       "scores": NLI_SCORES[e_label]})
                    llm_script.append({"match": {"kind": "entailment", "question_id": qid, "step_index": i,
                                                 "premise": snip["body"]},
                                       "response": {"label": e_label, "entailment_reasoning": "prior snippet",
                                                    "confidence": _conf(rng)}})
            if own_snippet is not None:
                prior.append(own_snippet)
            # evidence-only baseline: all evidence so far as one premise
            baseline = {"d_entail": "entailment", "e_entail": "entailment", "d_contra": "contradiction",
                        "b_wrong": "contradiction"}.get(route, "neutral")
            nli_script.append({"match": {"premise": "\n".join(s["body"] for s in prior), "hypothesis": hypothesis},
                               "scores": NLI_SCORES[baseline]})

        traces.append(
            {
                "question_id": qid,
                "dataset": q["dataset"],
                "question": f"What is known about {subject} ({final_rel})?",
                "gold_answer": gold_answer,
                "em_correct": q["correct"],
                "raw_output": "".join(raw_parts),
            }
        )

    _assign_gold(plans, rng)
    gold = [{"question_id": p.question_id, "step_index": p.step_index, "label": p.gold} for p in plans]
    return SyntheticBenchmark(traces, gold, llm_script, nli_script, plans)


def claim_needs_nli(route: str, kind: str, hypothesis: str) -> bool:
    """Whether Stage D runs for this route with Stage A intact or ablated."""
    return route not in ("b_grounded",) and bool(hypothesis)


def expected_counts(bench: SyntheticBenchmark) -> dict[str, int]:
    counts = {t.value: 0 for t in GapType}
    for p in bench.plan:
        counts[p.predicted] += 1
    return counts
