"""Property-based checks of the invariants each module promises."""

from __future__ import annotations

import math
import random
from collections import Counter
from fractions import Fraction

import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from stepgap.checker import (
    GAP_EXITS,
    CheckerVariant,
    Judges,
    VariantName,
    check_step,
    gap_exit,
)
from stepgap.judges import LlmJudge, NliJudge, ScriptedNliBackend
from stepgap.judges.llm import TraceContext
from stepgap.judges.schema import NliLabel
from stepgap.labels import ALL_LABELS, GapType
from stepgap.metrics import (
    StepPrediction,
    answer_gap_crosstab,
    balanced_accuracy,
    bootstrap_ci,
    category_distribution,
    cohens_kappa,
    first_gap_distribution,
    qf1_trap_value,
    question_f1,
    step_prf,
    typed_f1,
)
from stepgap.reward import (
    RewardConfig,
    RewardVariant,
    base_reward,
    shape_branch,
    trajectory_return,
    with_lambda,
)
from stepgap.trace import (
    EvidenceSnippet,
    ReasoningTrace,
    Step,
    StepKind,
    accumulated_evidence,
    normalize_tokens,
    parse_trace,
    segment_steps,
    token_f1,
)

FAST = settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])

gap_types = st.sampled_from(list(GapType))
words = st.text(alphabet="abcdeXYZ ,.!?'-", min_size=0, max_size=40)
plain_words = st.lists(st.sampled_from(["alpha", "beta", "Gamma", "delta", "the", "of", "x1", "Beta,"]),
                       max_size=8).map(" ".join)


# --------------------------------------------------------------------------
# trace model

@st.composite
def raw_traces(draw):
    parts = []
    for _ in range(draw(st.integers(1, 5))):
        thought = draw(plain_words)
        kind = draw(st.sampled_from(["search", "tool", "bare"]))
        if kind == "search":
            parts.append(f"{thought} <search>{draw(plain_words)}</search>")
            if draw(st.booleans()):
                parts.append(f"<information>Doc 1(Title: T) {draw(plain_words)}.</information>")
        elif kind == "tool":
            parts.append(f'{thought} <tool_call>{{"name": "search", "arguments": {{"query": "q"}}}}</tool_call>')
        else:
            parts.append(thought + " . ")
        parts.append(draw(st.sampled_from(["", "\n", "  "])))
    if draw(st.booleans()):
        parts.append(f"so <answer>{draw(plain_words)}</answer>")
    raw = "".join(parts)
    assume(raw.strip())
    return raw


@FAST
@given(raw_traces())
def test_segmentation_lossless_and_kinds_total(raw):
    steps = segment_steps(raw)
    assert "".join(s["raw_text"] for s in steps) == raw
    trace = parse_trace(raw, {"question_id": "q", "question": "?"})
    assert all(s.step_kind() in (StepKind.INFERENCE, StepKind.CONCLUSION) for s in trace.steps)
    for i in range(1, len(trace.steps)):
        before = accumulated_evidence(trace, i)
        after = accumulated_evidence(trace, i + 1)
        assert after[: len(before)] == before
        assert all(s.source_step <= i for s in before)


@FAST
@given(words, words)
def test_token_f1_symmetric_and_one_iff_same_multiset(a, b):
    assert token_f1(a, b) == token_f1(b, a)
    assert 0.0 <= token_f1(a, b) <= 1.0
    same = Counter(normalize_tokens(a)) == Counter(normalize_tokens(b))
    assert (token_f1(a, b) == 1.0) == same


# --------------------------------------------------------------------------
# judges

@FAST
@given(st.lists(st.floats(0.0, 10.0), min_size=3, max_size=3),
       st.permutations(["entailment", "neutral", "contradiction"]), st.sampled_from(["probs", "logits"]))
def test_nli_scores_normalized_and_calibration_idempotent(scores, order, emits):
    assume(emits == "logits" or sum(scores) > 1e-6)
    backend = ScriptedNliBackend([{"match": {}, "scores": scores}], label_order=order, emits=emits)
    judge = NliJudge(backend)
    first = judge.calibrate()
    assert judge.calibrate() == first
    v = judge.judge("premise", "hypothesis")
    assert math.isclose(sum(v.scores), 1.0, abs_tol=1e-6)
    if v.label is NliLabel.ENTAILMENT:
        assert v.scores[0] >= judge.entailment_threshold
    # the same request answered twice gives the same verdict
    assert judge.judge("premise", "hypothesis") == v


# --------------------------------------------------------------------------
# checker

class RandomLlm:
    """Answers every request kind from one drawn configuration."""

    backend_id, model_name = "random", "m"

    def __init__(self, response, flags_seed, entail_label):
        self.response = response
        self.rng = random.Random(flags_seed)
        self.entail_label = entail_label
        self.kinds: list[str] = []

    def call(self, payload):
        self.kinds.append(payload["kind"])
        if payload["kind"] == "step":
            return self.response
        if payload["kind"] == "entity_filter":
            n = len(payload["fields"]["candidates"])
            return {"entity_matches": [self.rng.random() < 0.6 for _ in range(n)], "reasoning": "r"}
        return {"label": self.entail_label, "entailment_reasoning": "r"}


@st.composite
def llm_responses(draw):
    drift = draw(st.sampled_from(["none", "none", "entity_drift", "relation_drift", "scope_drift"]))
    is_abst = draw(st.booleans())
    entity = draw(st.booleans())
    quote = draw(st.sampled_from(["", "", "some quoted words"])) if entity else ""
    confs = {k: draw(st.floats(0.05, 1.0)) for k in draw(st.sets(st.sampled_from("ABCD")))}
    return {
        "step_minus1_alignment": {"is_off_target": drift != "none", "drift_type": drift, "alignment_reasoning": "r"},
        "step_0_abstention_check": {"is_abstention_step": is_abst,
                                    "abstention_is_accurate": is_abst and draw(st.booleans()),
                                    "abstention_reasoning": "r"},
        "step_1_quote_search": {"entity_match": entity, "entity_match_reasoning": "r", "found_quote": bool(quote),
                                "evidence_quote": quote, "quote_search_reasoning": "r"},
        "stage_confidences": confs,
        "step_2_entailment": {"label": draw(st.sampled_from(["entailment", "neutral", "contradiction"])),
                              "entailment_reasoning": "r"},
    }


@st.composite
def checker_inputs(draw):
    conclusion = draw(st.booleans())
    claim = draw(st.sampled_from(["Paris is big.", "The year is unknown.", "n/a", "", "Oslo"]))
    step = Step(3, "" if conclusion else claim, query=None if conclusion else "q",
                answer_text=claim if conclusion else None)
    prior = [EvidenceSnippet(f"T{k}", f"Body {k}.", f"Body {k}.", draw(st.integers(1, 3)))
             for k in range(draw(st.integers(0, 3)))]
    return step, prior


SCORES = {"entailment": [0.9, 0.05, 0.05], "neutral": [0.1, 0.8, 0.1], "contradiction": [0.05, 0.05, 0.9]}


@FAST
@given(checker_inputs(), llm_responses(), st.integers(0, 10**6), st.sampled_from(list(SCORES)),
       st.sampled_from([VariantName.STEPGAP, VariantName.LLM_STRICT, VariantName.LLM_ONLY]),
       st.sets(st.sampled_from("AE")))
def test_checker_routing_invariants(inp, response, seed, nli_label, name, ablate):
    step, prior = inp
    ablate = frozenset(ablate) if name in (VariantName.STEPGAP, VariantName.LLM_ONLY) else frozenset()
    variant = CheckerVariant(name, ablate)

    def once():
        llm = RandomLlm(response, seed, nli_label)
        nli_backend = ScriptedNliBackend([{"match": {}, "scores": SCORES[nli_label]}])
        nli = NliJudge(nli_backend)
        nli.calibrate()
        probes = nli_backend.calls
        v = check_step(step, prior, variant, Judges(llm=LlmJudge(llm), nli=nli), TraceContext("q", "?"))
        return v, llm.kinds, nli_backend.calls - probes

    v, kinds, nli_calls = once()
    assert not v.unchecked
    tags = [d.tag for d in v.pipeline_path]
    pair = gap_exit(v)
    assert pair is None or pair in GAP_EXITS
    if v.has_gap and v.pipeline_path[-1].stage != "gate":
        # early exit: the emitting stage is the last one visited
        assert v.emitting_stage in "ABCDE"
        later = "ABCDE"[("ABCDE".index(v.emitting_stage) + 1):]
        assert not any(d.stage in later for d in v.pipeline_path)
    if v.gap_type is GapType.MB:
        assert "stageC:quote_found" in tags and v.pipeline_path[-1].stage in ("D", "gate")
    if any(d.stage == "E" for d in v.pipeline_path):
        assert step.step_kind() is StepKind.CONCLUSION and "stageC:no_quote" in tags
        assert response["step_1_quote_search"]["entity_match"]
    for stage in ablate:
        assert not any(d.stage == stage for d in v.pipeline_path)
    if not any(d.stage in "DE" for d in v.pipeline_path):
        assert nli_calls == 0 and kinds == ["step"]
    if variant.uses_llm_entailment:
        assert nli_calls == 0
    again, kinds2, _ = once()
    assert again.path_string == v.path_string and again.gap_type is v.gap_type and kinds2 == kinds


# --------------------------------------------------------------------------
# reward

@st.composite
def traces_with_taus(draw):
    n = draw(st.integers(1, 6))
    steps = []
    for i in range(1, n + 1):
        kind = draw(st.sampled_from(["search", "answer", "plain"]))
        claim = draw(st.sampled_from(["A is B.", "Actually, A is C.", "Wait, A is B.", "Correction: D."]))
        if kind == "search":
            steps.append(Step(i, claim, query=draw(st.sampled_from(["a b c", "a b d", "x y", "a b c e"]))))
        elif kind == "answer":
            steps.append(Step(i, claim, answer_text=draw(st.sampled_from(["B", "C"]))))
        else:
            steps.append(Step(i, claim))
    taus = draw(st.lists(gap_types, min_size=n, max_size=n))
    return ReasoningTrace("q", "?", tuple(steps), em_correct=draw(st.booleans())), taus


@FAST
@given(traces_with_taus(), st.floats(0.0, 5.0))
def test_reward_return_identity_and_linearity(tt, c):
    trace, taus = tt
    b = trajectory_return(taus, trace)
    assert abs(b.total_return - (b.em + b.lam * math.fsum(s.base + s.shape for s in b.per_step))) <= 1e-12
    scaled = trajectory_return(taus, trace, with_lambda(RewardConfig(), c))
    assert math.isclose(scaled.total_return - scaled.em, c * (b.total_return - b.em), abs_tol=1e-12)
    for s in b.per_step:
        assert s.base == base_reward(s.tau)
        assert abs(s.base + s.shape) <= 1.0
        assert s.branch in ("none", "new_search_after_gap", "retract_after_cc", "answer_through_gap",
                            "near_duplicate_search")


@FAST
@given(traces_with_taus())
def test_reward_variant_consistency(tt):
    trace, taus = tt
    zero = RewardConfig(shape={k: 0.0 for k in RewardConfig().shape})
    typed_base = trajectory_return(taus, trace, RewardConfig(variant=RewardVariant.TYPED_BASE))
    assert typed_base.total_return == trajectory_return(taus, trace, zero).total_return
    collapsed = RewardConfig(base={"NoGap": 0.2, "CC": 0.0, "IE": 0.0, "MB": 0.0}, variant=RewardVariant.TYPED_BASE)
    assert trajectory_return(taus, trace, RewardConfig(variant=RewardVariant.BINARY_GAP)).total_return == \
        trajectory_return(taus, trace, collapsed).total_return


@FAST
@given(gap_types, st.sampled_from(["search", "answer", "plain"]), st.sampled_from(["x y", "a b c", "q r s t"]),
       st.sampled_from(["A", "Correction: B", "Actually A"]))
def test_exactly_one_shaping_branch(tau_prev, kind, query, claim):
    step = Step(2, claim, query=query if kind == "search" else None, answer_text="B" if kind == "answer" else None)
    branch, value = shape_branch(tau_prev, step, ["a b c"], "A")
    expected = {"none": 0.0, **RewardConfig().shape}[branch]
    assert value == expected
    if tau_prev is GapType.NO_GAP:
        assert branch == "none"


# --------------------------------------------------------------------------
# metrics

@st.composite
def labelled_predictions(draw, min_size=1):
    n = draw(st.integers(min_size, 20))
    out = []
    for i in range(n):
        out.append(StepPrediction(f"q{draw(st.integers(0, 4))}", i + 1, draw(gap_types), draw(gap_types),
                                  draw(st.booleans()) and draw(st.booleans()) and draw(st.booleans())))
    return out


@FAST
@given(labelled_predictions(), st.randoms(use_true_random=False))
def test_metrics_order_insensitive(preds, rnd):
    assume(any(not p.unchecked for p in preds))
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    correctness = {f"q{k}": k % 2 == 0 for k in range(5)}
    assert step_prf(preds) == step_prf(shuffled)
    assert balanced_accuracy(preds) == balanced_accuracy(shuffled)
    assert typed_f1(preds) == typed_f1(shuffled)
    assert answer_gap_crosstab(preds, correctness) == answer_gap_crosstab(shuffled, correctness)
    assert first_gap_distribution(preds, correctness) == first_gap_distribution(shuffled, correctness)
    dist = category_distribution(preds)
    assert math.isclose(sum(dist.values()), 1.0, abs_tol=1e-9) and set(dist) == {t.value for t in ALL_LABELS}
    ct = answer_gap_crosstab(preds, correctness)
    assert ct.total == len({p.question_id for p in preds if not p.unchecked})


@FAST
@given(labelled_predictions())
def test_typed_micro_never_exceeds_binary(preds):
    assume(any(not p.unchecked for p in preds))
    micro, binary = typed_f1(preds)["micro"], step_prf(preds)[2]
    if binary is None:
        assert micro is None or micro == 0.0
    else:
        assert micro is None or micro <= binary + 1e-9


@FAST
@given(st.integers(1, 60), st.integers(0, 60))
def test_flag_everything_qf1_identity(n_wrong, n_right):
    correctness = {f"w{i}": False for i in range(n_wrong)} | {f"r{i}": True for i in range(n_right)}
    preds = [StepPrediction(q, 1, GapType.IE) for q in correctness]
    w = Fraction(n_wrong, n_wrong + n_right)
    assert question_f1(preds, correctness) == float(qf1_trap_value(w) * 100)


@FAST
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=30))
def test_kappa_identical_is_one(labels):
    assert cohens_kappa(labels, list(labels)) == 1.0


@FAST
@given(st.integers(1, 15), st.integers(0, 1000))
def test_bootstrap_constant_statistic_contains_estimate(n, seed):
    preds = [StepPrediction("q", i + 1, GapType.IE, GapType.IE) for i in range(n)]
    lo, hi = bootstrap_ci(preds, lambda s: step_prf(s)[2], iters=50, seed=seed)
    assert lo <= step_prf(preds)[2] <= hi


@FAST
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=10))
def test_group_standardize_zero_mean_unit_std(returns):
    from stepgap.reward import group_standardize

    z = np.array(group_standardize(returns))
    if np.std(returns) == 0:
        assert not z.any()
    elif np.std(returns) > 1e-6:
        assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-6
