from __future__ import annotations

import json
import math

import httpx
import pytest

import golden
from stepgap.errors import CalibrationFailed, JudgeUnavailable, SchemaViolation, ScriptExhausted
from stepgap.judges import (
    CachedBackend,
    HttpNliBackend,
    JudgeCache,
    JudgeConfig,
    LlmJudge,
    LlmJudgeResponse,
    NliJudge,
    NliLabel,
    OpenAICompatBackend,
    ScriptedLlmBackend,
    ScriptedNliBackend,
    TraceContext,
    cache_key,
    load_script,
    write_script,
)
from stepgap.judges.llm import stage_confidences_from_logprobs
from stepgap.judges.nli import softmax, truncate_premise
from stepgap.judges.schema import NliVerdict, response_json_schema
from stepgap.trace import accumulated_evidence


def calibrated(entries=(), order=("entailment", "neutral", "contradiction"), emits="probs"):
    judge = NliJudge(ScriptedNliBackend(list(entries), label_order=order, emits=emits))
    judge.calibrate()
    return judge


def pair(scores, premise="p", hypothesis="h"):
    return {"match": {"premise": premise, "hypothesis": hypothesis}, "scores": scores}


# --------------------------------------------------------------------------
# schema


def test_response_invariants_enforced():
    good = golden.response(drift="relation_drift")
    assert LlmJudgeResponse.from_wire(good).alignment.drift_type == "relation_drift"
    bad_drift = golden.response()
    bad_drift["step_minus1_alignment"]["drift_type"] = "entity_drift"
    bad_quote = golden.response()
    bad_quote["step_1_quote_search"]["found_quote"] = True
    bad_entity = golden.response(entity=False, quote="q")
    bad_conf = golden.response(confs={"A": 1.5})
    for bad in (bad_drift, bad_quote, bad_entity, bad_conf, {"step_minus1_alignment": {}}):
        with pytest.raises(SchemaViolation):
            LlmJudgeResponse.from_wire(bad)


def test_wire_round_trip():
    wire = golden.response(quote="x", llm_label="neutral", confs={"A": 0.5})
    assert LlmJudgeResponse.from_wire(wire).to_wire() == LlmJudgeResponse.from_wire(
        LlmJudgeResponse.from_wire(wire).to_wire()).to_wire()


def test_json_schema_is_strict():
    schema = response_json_schema(ask_entailment=True)
    assert schema["additionalProperties"] is False
    assert "step_2_entailment" in schema["required"]
    assert "step_2_entailment" not in response_json_schema()["properties"]


def test_judge_config_thresholds():
    with pytest.raises(ValueError):
        JudgeConfig(entailment_threshold=1.0)
    with pytest.raises(ValueError):
        JudgeConfig(contradiction_threshold=0.0)


# --------------------------------------------------------------------------
# LLM judge over scripted backends


def test_scripted_replay_returns_exact_response():
    resp = golden.response(drift="relation_drift")
    backend = ScriptedLlmBackend([{"match": {"kind": "step"}, "response": resp}])
    trace = golden.whitehorse().trace()
    out = LlmJudge(backend).judge_step(trace.steps[0], TraceContext.for_step(trace, 1), accumulated_evidence(trace, 1))
    assert out.to_wire() == LlmJudgeResponse.from_wire(resp).to_wire()
    assert out.alignment.is_off_target and out.alignment.drift_type == "relation_drift"


def test_whitehorse_quote_found():
    case = golden.whitehorse()
    trace = case.trace()
    judge = LlmJudge(ScriptedLlmBackend(case.llm))
    out = judge.judge_step(trace.steps[0], TraceContext.for_step(trace, 1), accumulated_evidence(trace, 1))
    assert out.quote_search.entity_match and out.quote_search.found_quote
    assert "294,000 passengers" in out.quote_search.evidence_quote


def test_grounded_abstention_replay():
    case = golden.abstention()
    trace = case.trace()
    out = LlmJudge(ScriptedLlmBackend(case.llm)).judge_step(
        trace.steps[1], TraceContext.for_step(trace, 2), accumulated_evidence(trace, 2))
    assert "cannot be determined" in trace.steps[1].claim()
    assert out.abstention.is_abstention_step and out.abstention.abstention_is_accurate


def test_conclusion_prompt_carries_global_evidence_and_history():
    case = golden.kuhn()
    trace = case.trace()
    backend = ScriptedLlmBackend(case.llm)
    judge = LlmJudge(backend)
    judge.judge_step(trace.steps[3], TraceContext.for_step(trace, 4), accumulated_evidence(trace, 4))
    judge.judge_step(trace.steps[0], TraceContext.for_step(trace, 1), accumulated_evidence(trace, 1))
    conclusion, inference = (r["messages"][1]["content"] for r in backend.requests)
    assert conclusion.startswith("GLOBAL EVIDENCE")
    assert "Elfie Pertramer was a German actress" in conclusion
    assert "GLOBAL EVIDENCE" not in inference
    fields = backend.requests[0]["fields"]
    assert len(fields["previous_steps"]) == 3 and fields["step_kind"] == "conclusion"


def test_context_keeps_last_three_steps():
    trace = golden.kuhn().trace()
    assert TraceContext.for_step(trace, 1).previous_steps == ()
    assert len(TraceContext.for_step(trace, 4).previous_steps) == 3
    assert TraceContext.for_step(trace, 4).previous_steps[0].startswith("[1]")


def test_schema_violation_retried_once_then_unavailable():
    good = golden.response()
    bad = golden.response()
    bad["step_1_quote_search"]["found_quote"] = True  # no quote given
    trace = golden.whitehorse().trace()
    ctx, pool = TraceContext.for_step(trace, 1), accumulated_evidence(trace, 1)

    calls = []

    class Flaky:
        backend_id, model_name = "flaky", "m"

        def call(self, payload):
            calls.append(payload)
            return good if payload.get("attempt") else bad

    assert not LlmJudge(Flaky()).judge_step(trace.steps[0], ctx, pool).alignment.is_off_target
    assert len(calls) == 2

    always_bad = ScriptedLlmBackend([{"match": {"kind": "step"}, "response": bad}])
    with pytest.raises(JudgeUnavailable):
        LlmJudge(always_bad).judge_step(trace.steps[0], ctx, pool)
    assert always_bad.calls == 2


def test_entity_filter_length_checked():
    trace = golden.four_step().trace()
    ctx = TraceContext.for_step(trace, 4)
    pool = accumulated_evidence(trace, 4)
    backend = ScriptedLlmBackend([{"match": {"kind": "entity_filter"}, "response": {"entity_matches": [True]}}])
    with pytest.raises(JudgeUnavailable):
        LlmJudge(backend).entity_filter(trace.steps[3], ctx, pool)


# --------------------------------------------------------------------------
# NLI judge


def test_nli_threshold_examples():
    judge = calibrated([pair([0.9, 0.05, 0.05], "a"), pair([0.4, 0.35, 0.25], "b"), pair([0.55, 0.0, 0.55], "c"),
                        pair([0.1, 0.2, 0.7], "d")])
    assert judge.judge("a", "h").label is NliLabel.ENTAILMENT
    assert judge.judge("b", "h").label is NliLabel.NEUTRAL
    tie = judge.judge("c", "h")
    assert tie.label is NliLabel.NEUTRAL and tie.scores[0] == tie.scores[2] == 0.5
    assert judge.judge("d", "h").label is NliLabel.CONTRADICTION


def test_calibration_finds_permuted_order():
    order = ("contradiction", "entailment", "neutral")
    judge = calibrated([pair([0.9, 0.05, 0.05])], order=order)
    assert judge.mapping == (NliLabel.CONTRADICTION, NliLabel.ENTAILMENT, NliLabel.NEUTRAL)
    assert judge.mapping.index(NliLabel.ENTAILMENT) == 1
    assert judge.judge("p", "h").label is NliLabel.ENTAILMENT
    assert calibrated().mapping == (NliLabel.ENTAILMENT, NliLabel.NEUTRAL, NliLabel.CONTRADICTION)


def test_calibration_idempotent_and_logits_supported():
    judge = calibrated([pair([3.0, 0.0, -1.0])], order=("neutral", "contradiction", "entailment"), emits="logits")
    first = judge.mapping
    assert judge.calibrate() == first
    v = judge.judge("p", "h")
    assert math.isclose(sum(v.scores), 1.0, abs_tol=1e-9)
    assert v.label is NliLabel.ENTAILMENT  # dimension 0 of the canonical script maps to entailment


def test_uniform_backend_fails_calibration():
    class Uniform:
        backend_id, model_name, emits = "u", "u", "probs"

        def call(self, payload):
            return {"scores": [1 / 3, 1 / 3, 1 / 3]}

    with pytest.raises(CalibrationFailed):
        NliJudge(Uniform()).calibrate()
    with pytest.raises(CalibrationFailed):
        NliJudge(Uniform()).judge("p", "h")


def test_premise_truncation_flagged():
    long = " ".join(f"w{i}" for i in range(500))
    text, cut = truncate_premise(long, 400)
    assert cut and len(text.split()) == 400
    judge = NliJudge(ScriptedNliBackend([pair([0.9, 0.05, 0.05], text)]), premise_token_budget=400)
    judge.calibrate()
    assert judge.judge(long, "h").truncated


def test_nli_verdict_scores_must_sum_to_one():
    with pytest.raises(ValueError):
        NliVerdict(NliLabel.NEUTRAL, (0.5, 0.5, 0.5))
    assert softmax([0.0, 0.0]) == [0.5, 0.5]


# --------------------------------------------------------------------------
# cache


class Counting:
    backend_id, model_name = "count", "m"

    def __init__(self):
        self.calls = 0

    def call(self, payload):
        self.calls += 1
        return {"echo": payload["x"], "n": self.calls}


def test_cache_dedupes_identical_requests(tmp_path):
    inner = Counting()
    cached = CachedBackend(inner, JudgeCache(tmp_path))
    a = cached.call({"x": "evidence"})
    assert cached.call({"x": "evidence"}) == a
    cached.call({"x": "evidencf"})
    assert inner.calls == 2 and cached.hits == 1 and cached.misses == 2


def test_cache_survives_restart_byte_identical(tmp_path):
    first = CachedBackend(Counting(), JudgeCache(tmp_path)).call({"x": "é"})
    inner = Counting()
    again = CachedBackend(inner, JudgeCache(tmp_path)).call({"x": "é"})
    assert json.dumps(again, sort_keys=True) == json.dumps(first, sort_keys=True) and inner.calls == 0


def test_corrupt_entry_is_ignored_and_reissued(tmp_path):
    cache = JudgeCache(tmp_path)
    key = cache_key("count", "m", {"x": "y"})
    path = tmp_path / key[:2] / f"{key}.json"
    path.parent.mkdir(parents=True)
    path.write_text("{not json")
    inner = Counting()
    assert CachedBackend(inner, cache).call({"x": "y"})["echo"] == "y"
    assert inner.calls == 1 and path.with_suffix(".corrupt").exists()
    assert json.loads(path.read_text())["key"] == key


def test_cache_key_depends_on_backend_and_model():
    assert cache_key("a", "m", {"x": 1}) != cache_key("b", "m", {"x": 1})
    assert cache_key("a", "m", {"x": 1}) != cache_key("a", "n", {"x": 1})
    assert cache_key("a", "m", {"x": 1, "y": 2}) == cache_key("a", "m", {"y": 2, "x": 1})


def test_script_file_round_trip(tmp_path):
    entries = golden.kuhn().llm
    write_script(tmp_path / "s.jsonl", entries)
    assert load_script(tmp_path / "s.jsonl") == entries


def test_unmatched_script_request_raises():
    with pytest.raises(ScriptExhausted):
        ScriptedNliBackend([]).call({"premise": "a", "hypothesis": "b"})


# --------------------------------------------------------------------------
# wire clients against a mock transport


def _chat_response(content: str, logprobs=None):
    choice = {"message": {"role": "assistant", "content": content}}
    if logprobs is not None:
        choice["logprobs"] = {"content": logprobs}
    return {"choices": [choice]}


def test_openai_backend_posts_strict_schema_and_reads_confidences():
    seen = []
    resp = golden.response(quote="q")
    text = json.dumps(resp)
    logprobs = [{"token": '{"step_minus1_alignment": {"is_off_target": ', "logprob": 0.0},
                {"token": "false", "logprob": math.log(0.9)},
                {"token": ', "entity_match": ', "logprob": 0.0},
                {"token": "true", "logprob": math.log(0.8)}]

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content))
        assert request.headers["authorization"] == "Bearer k"
        return httpx.Response(200, json=_chat_response(text, logprobs))

    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = OpenAICompatBackend("http://judge.local/v1", "m", api_key="k", client=client)
    trace = golden.whitehorse().trace()
    out = LlmJudge(backend).judge_step(trace.steps[0], TraceContext.for_step(trace, 1), accumulated_evidence(trace, 1))
    body = seen[0]
    assert body["response_format"]["json_schema"]["strict"] is True
    assert body["temperature"] == 0 and body["model"] == "m"
    assert out.stage_confidences == {"A": pytest.approx(0.9), "C": pytest.approx(0.8)}


def test_openai_backend_retries_then_gives_up(monkeypatch):
    monkeypatch.setattr("stepgap.judges.llm.time.sleep", lambda s: None)
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(503)

    backend = OpenAICompatBackend("http://x", "m", api_key="", max_retries=3,
                                  client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(JudgeUnavailable):
        backend.call({"kind": "step", "messages": [], "schema": {}})
    assert len(attempts) == 3


def test_openai_backend_non_json_content_becomes_schema_retry():
    backend = OpenAICompatBackend("http://x", "m", api_key="", client=httpx.Client(
        transport=httpx.MockTransport(lambda r: httpx.Response(200, json=_chat_response("sorry, no")))))
    trace = golden.whitehorse().trace()
    with pytest.raises(JudgeUnavailable):
        LlmJudge(backend).judge_step(trace.steps[0], TraceContext("q", "?"), accumulated_evidence(trace, 1))


def test_http_nli_backend_and_logit_calibration():
    def handler(request):
        body = json.loads(request.content)
        if body["premise"] == body["hypothesis"]:
            return httpx.Response(200, json={"scores": [-2.0, 4.0, -1.0]})
        if "dead" in body["hypothesis"]:
            return httpx.Response(200, json={"scores": [3.0, -2.0, 0.0]})
        return httpx.Response(200, json={"scores": [2.5, -1.0, 0.0]})

    backend = HttpNliBackend("http://nli.local/predict", client=httpx.Client(transport=httpx.MockTransport(handler)))
    judge = NliJudge(backend)
    assert judge.calibrate() == (NliLabel.CONTRADICTION, NliLabel.ENTAILMENT, NliLabel.NEUTRAL)
    assert judge.judge("p", "h").label is NliLabel.CONTRADICTION


def test_logprob_extraction_skips_quote_tokens():
    toks = [{"token": '"label": ', "logprob": 0.0}, {"token": '"', "logprob": -5.0},
            {"token": "neutral", "logprob": math.log(0.6)}]
    assert stage_confidences_from_logprobs(toks) == {"D": pytest.approx(0.6)}
