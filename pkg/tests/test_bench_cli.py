from __future__ import annotations

import json
import time
from pathlib import Path

import pytest

import golden
from stepgap import bench
from stepgap.cli import main
from stepgap.errors import ConfigError
from stepgap.metrics import StepPrediction, step_prf
from stepgap.synthetic import synthetic_benchmark


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    return synthetic_benchmark(0).write(tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    cases = golden.golden_cases()
    gold = {(c.qid, i): exp[0] for c in cases for i, exp in enumerate(c.expected, start=1)}
    return golden.write_suite(cases, tmp_path_factory.mktemp("golden"), gold)


def scripted_args(paths, out, *extra, gold=True):
    args = ["--benchmark", str(paths["traces"]), "--llm-backend", "scripted", "--llm-script",
            str(paths.get("llm") or paths["llm_script"]), "--nli-backend", "scripted",
            "--nli-script", str(paths.get("nli") or paths["nli_script"]), "--out", str(out),
            "--cache-dir", str(Path(out) / "cache"), "--bootstrap-iters", "200"]
    if gold and "gold" in paths:
        args += ["--gold", str(paths["gold"])]
    return args + list(extra)


def read_lines(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# check


def test_check_golden_suite_deterministic(suite, tmp_path):
    for run in ("a", "b"):
        assert main(["check", *scripted_args(suite, tmp_path / run)]) == 0
    for name in ("verdicts.jsonl", "metrics.jsonl", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    verdicts = read_lines(tmp_path / "a" / "verdicts.jsonl")
    assert len(verdicts) == 12 and all(v["pipeline_path"] for v in verdicts)
    metrics = read_lines(tmp_path / "a" / "metrics.jsonl")[0]
    assert metrics["sF1"] == 100.0 and metrics["seed"] == 0
    for key in ("sP", "sR", "sF1_ci", "qF1", "balanced_accuracy", "typed_f1", "crosstab", "first_gap_distribution"):
        assert metrics[key] is not None, key


def test_manifest_records_everything(suite, tmp_path):
    assert main(["check", *scripted_args(suite, tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["command"] == "check"
    assert set(manifest["outputs"]) == {"verdicts.jsonl", "metrics.jsonl", "report.txt"}
    assert manifest["outputs"]["verdicts.jsonl"] == bench.file_sha256(tmp_path / "verdicts.jsonl")
    assert {"benchmark", "gold_labels", "llm_script", "nli_script"} <= set(manifest["inputs"])
    assert manifest["judge_calls"]["llm_step"] == 12 and manifest["unchecked"] == 0
    assert "api_key" not in json.dumps(manifest)


def test_flag_everything_variant(suite, tmp_path):
    assert main(["check", *scripted_args(suite, tmp_path), "--variant", "FlagEverything"]) == 0
    assert {v["gap_type"] for v in read_lines(tmp_path / "verdicts.jsonl")} == {"IE"}
    assert read_lines(tmp_path / "metrics.jsonl")[0]["balanced_accuracy"] == 50.0


def test_synthetic_run_reproducible_and_fast(synth, tmp_path):
    start = time.perf_counter()
    for run in ("a", "b"):
        assert main(["check", *scripted_args(synth, tmp_path / run), "--bootstrap-iters", "2000"]) == 0
    elapsed = time.perf_counter() - start
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"]
    assert elapsed < 10.0
    assert read_lines(tmp_path / "a" / "metrics.jsonl")[0]["n_steps"] == 181


# --------------------------------------------------------------------------
# ablate and sweep


def test_ablate_flips_and_shares_cache(tmp_path):
    cases, flips, gold = golden.ablation_cases()
    paths = golden.write_suite(cases, tmp_path / "in", gold)
    assert main(["ablate", *scripted_args(paths, tmp_path / "out")]) == 0
    rows = {r["config"]: r for r in read_lines(tmp_path / "out" / "ablation.jsonl")}
    assert set(rows) == {"full", "-A", "-E", "-AE"}
    for stage in ("A", "E"):
        flipped = sorted((f["question_id"], f["step_index"]) for f in rows[f"-{stage}"]["flipped"])
        assert flipped == sorted(flips[stage])
        assert rows[f"-{stage}"]["delta_sF1"] < 0
    both = read_lines(tmp_path / "out" / "verdicts_minus_AE.jsonl")
    assert not any("stageA" in v["pipeline_path"] or "stageE" in v["pipeline_path"] for v in both)
    # the ablated runs re-ask nothing the full run already asked
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert main(["check", *scripted_args(paths, tmp_path / "single")]) == 0
    single = json.loads((tmp_path / "single" / "manifest.json").read_text())
    assert manifest["backend_calls"]["llm_backend_calls"] == single["backend_calls"]["llm_backend_calls"]
    # without Stage A the three drift steps reach Stage D; they share one (quote, claim) pair, asked once
    assert manifest["backend_calls"]["nli_backend_calls"] == single["backend_calls"]["nli_backend_calls"] + 1
    assert manifest["backend_calls"]["llm_cache_hits"] > 0


def test_empty_ablation_equals_check(suite, tmp_path):
    assert main(["ablate", *scripted_args(suite, tmp_path / "ab"), "--stages", ""]) == 0
    assert main(["check", *scripted_args(suite, tmp_path / "ck")]) == 0
    full = read_lines(tmp_path / "ab" / "verdicts_full.jsonl")
    assert full == read_lines(tmp_path / "ck" / "verdicts.jsonl")


def test_sweep_limits(synth, tmp_path):
    assert main(["sweep", *scripted_args(synth, tmp_path / "s"), "--thresholds", "0,0.6,1"]) == 0
    rows = read_lines(tmp_path / "s" / "sweep.jsonl")
    assert main(["check", *scripted_args(synth, tmp_path / "c")]) == 0
    check = read_lines(tmp_path / "c" / "metrics.jsonl")[0]
    assert rows[0]["sF1"] == pytest.approx(check["sF1"])
    assert rows[-1]["n_gaps"] == 0 and rows[-1]["balanced_accuracy"] == 50.0
    assert (tmp_path / "s" / "sweep.tsv").read_text().startswith("threshold\t")


# --------------------------------------------------------------------------
# reward export


def worked_example(tmp_path, rollouts=1, em=True):
    raw = ("Looking up X. <search>X birthplace</search><information>X was born in Y.</information>"
           "Y next. <search>Y country</search><information>Y is a town.</information>"
           "Z now. <search>capital of Z</search><information>W is the capital of Z.</information>"
           "So W. <answer>W</answer>")
    recs, verdicts = [], []
    for r in range(rollouts):
        recs.append({"question_id": "wx", "rollout_id": f"r{r}", "question": "?", "gold_answer": "W" if em else "V",
                     "raw_output": raw, "token_spans": [[0, 4], [4, 9], [9, 12], [12, 15]]})
        for i, g in enumerate(["NoGap", "IE", "NoGap", "NoGap"], start=1):
            verdicts.append({"question_id": "wx", "rollout_id": f"r{r}", "step_index": i, "gap_type": g,
                             "confidence": 0.9, "pipeline_path": "", "unchecked": False})
    (tmp_path / "t.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    (tmp_path / "v.jsonl").write_text("".join(json.dumps(v) + "\n" for v in verdicts))
    return ["--benchmark", str(tmp_path / "t.jsonl"), "--verdicts", str(tmp_path / "v.jsonl"),
            "--out", str(tmp_path / "out")]


def test_reward_export_worked_example(tmp_path):
    assert main(["reward", *worked_example(tmp_path)]) == 0
    (rec,) = read_lines(tmp_path / "out" / "rewards.jsonl")
    assert abs(rec["total_return"] - 1.60) < 1e-12 and rec["advantages"] is None
    assert [s["branch"] for s in rec["per_step"]][2] == "new_search_after_gap"
    assert (tmp_path / "out" / "manifest.json").exists()


def test_reward_export_search_only(tmp_path):
    assert main(["reward", *worked_example(tmp_path), "--reward-variant", "SearchOnly"]) == 0
    (rec,) = read_lines(tmp_path / "out" / "rewards.jsonl")
    assert rec["total_return"] == 1.0 and rec["per_step"] == []


def test_reward_identical_group_zero_advantages(tmp_path):
    assert main(["reward", *worked_example(tmp_path, rollouts=8)]) == 0
    recs = read_lines(tmp_path / "out" / "rewards.jsonl")
    assert len(recs) == 8 and all(a == 0.0 for r in recs for a in r["advantages"])


def test_reward_missing_verdict_exit_code(tmp_path):
    args = worked_example(tmp_path)
    lines = (tmp_path / "v.jsonl").read_text().splitlines()
    (tmp_path / "v.jsonl").write_text("\n".join(lines[:2]) + "\n")
    assert main(["reward", *args]) == 4


# --------------------------------------------------------------------------
# distillation export


def test_distill_export_round_trip_and_self_agreement(suite, tmp_path):
    assert main(["distill-export", *scripted_args(suite, tmp_path / "d")]) == 0
    records = bench.read_distill_records(tmp_path / "d" / "distill.jsonl")
    assert len(records) == 12 and all(r["pipeline_path"] for r in records)
    assert all(r["llm_response"] for r in records)
    again = [json.loads(json.dumps(r)) for r in records]
    assert again == records
    assert main(["check", *scripted_args(suite, tmp_path / "c")]) == 0
    rerun = {(v["question_id"], v["step_index"]): v["gap_type"] for v in read_lines(tmp_path / "c" / "verdicts.jsonl")}
    preds = [StepPrediction(r["question_id"], r["step_index"], rerun[(r["question_id"], r["step_index"])],
                            r["gap_type"]) for r in records]
    assert step_prf(preds)[2] == 100.0


# --------------------------------------------------------------------------
# trap


def test_trap_command(synth, tmp_path):
    assert main(["trap", "--benchmark", str(synth["traces"]), "--out", str(tmp_path)]) == 0
    rows = read_lines(tmp_path / "trap.jsonl")
    assert [round(r["analytic_at_target"], 2) for r in rows] == [0.67, 0.79, 0.91]
    assert all(r["within_tolerance"] for r in rows)


# --------------------------------------------------------------------------
# exit codes and configuration


def test_exit_codes(suite, tmp_path, monkeypatch):
    monkeypatch.setattr("stepgap.judges.llm.time.sleep", lambda s: None)
    assert main(["check", "--benchmark", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 4
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert main(["check", "--benchmark", str(bad), "--out", str(tmp_path / "o")]) == 4
    assert main(["check", *scripted_args(suite, tmp_path / "o"), "--llm-script", str(tmp_path / "nope")]) == 2
    assert main(["check", *scripted_args(suite, tmp_path / "o"), "--confidence-threshold", "2"]) == 2
    assert main(["check", *scripted_args(suite, tmp_path / "o"), "--ablate", "C"]) == 2
    # a judge that knows no answers at all
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["check", *scripted_args(suite, tmp_path / "o"), "--llm-script", str(empty)]) == 3
    unreachable = ["check", "--benchmark", str(suite["traces"]), "--out", str(tmp_path / "o"),
                   "--cache-dir", str(tmp_path / "cache"), "--nli-backend", "scripted", "--nli-script",
                   str(suite["nli"]), "--endpoint", "http://127.0.0.1:9/v1"]
    assert main(unreachable) == 3


def test_config_precedence(suite, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        f'[run]\nbenchmark = "{suite["traces"]}"\nseed = 5\nbootstrap_iters = 100\n'
        '[judge]\nendpoint = "http://file/v1"\nmodel = "file-model"\n'
        '[variant]\nname = "LlmOnly"\nconfidence_threshold = 0.4\n[reward]\nlambda = 0.5\n'
    )
    c = bench.load_run_config(cfg, {}, environ={})
    assert (c.seed, c.judge_config.endpoint, c.variant.overall_confidence_threshold) == (5, "http://file/v1", 0.4)
    assert c.reward_config.lam == 0.5
    c = bench.load_run_config(cfg, {}, environ={"STEPGAP_JUDGE_ENDPOINT": "http://env/v1"})
    assert c.judge_config.endpoint == "http://env/v1" and c.judge_config.model_name == "file-model"
    c = bench.load_run_config(cfg, {"endpoint": "http://flag/v1", "seed": 9},
                              environ={"STEPGAP_JUDGE_ENDPOINT": "http://env/v1"})
    assert c.judge_config.endpoint == "http://flag/v1" and c.seed == 9
    rel = tmp_path / "sub"
    rel.mkdir()
    (rel / "r.toml").write_text('[run]\nbenchmark = "../data.jsonl"\n')
    assert bench.load_run_config(rel / "r.toml", {}, environ={}).benchmark_path == str(tmp_path / "data.jsonl")
    with pytest.raises(ConfigError):
        bench.load_run_config(None, {}, environ={})
    (rel / "bad.toml").write_text("[run]\nunknown_key = 1\n")
    with pytest.raises(ConfigError):
        bench.load_run_config(rel / "bad.toml", {}, environ={})


def test_synth_command(tmp_path):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} == {"traces.jsonl", "gold.jsonl", "llm_script.jsonl",
                                                   "nli_script.jsonl"}
