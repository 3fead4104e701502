"""Benchmark harness: run configuration, judge wiring, the six commands and
their output files (line-delimited records, plain-text tables, manifests)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .checker import CheckerVariant, GapVerdict, Judges, VariantName, apply_confidence_gate, check_trace
from .errors import ConfigError, JudgeUnavailable, MalformedRecord, MissingTokenSpan
from .judges.cache import CachedBackend, JudgeCache
from .judges.llm import ENV_ENDPOINT, ENV_MODEL, ENV_NLI_ENDPOINT, LlmJudge, OpenAICompatBackend
from .judges.nli import HttpNliBackend, NliJudge
from .judges.schema import JudgeConfig
from .judges.scripted import ScriptedLlmBackend, ScriptedNliBackend
from .labels import GapType
from .metrics import (
    MetricsReport,
    StepPrediction,
    build_report,
    category_distribution,
    step_prf,
    balanced_accuracy,
    question_f1,
    trap_experiment,
)
from .reward import RewardConfig, assign_dense_advantages, trajectory_return
from .trace import ReasoningTrace, read_gold_labels, read_traces, with_token_spans, write_json_lines

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_TRAP_STRATA = (0.5, 0.65, 0.84)


@dataclass
class RunConfig:
    benchmark_path: str
    gold_labels_path: str | None = None
    variant: CheckerVariant = field(default_factory=CheckerVariant)
    judge_config: JudgeConfig = field(default_factory=JudgeConfig)
    reward_config: RewardConfig = field(default_factory=RewardConfig)
    output_dir: str = "stepgap-run"
    seed: int = 0
    concurrency_limit: int = 4
    bootstrap_iters: int = 2000
    llm_backend: str = "openai"  # or "scripted"
    llm_script: str | None = None
    nli_backend: str = "http"  # or "scripted"
    nli_script: str | None = None
    nli_label_order: tuple[str, ...] = ("entailment", "neutral", "contradiction")
    verdicts_path: str | None = None
    assign_token_spans: bool = True
    config_path: str | None = None

    def __post_init__(self) -> None:
        if self.llm_backend not in ("openai", "scripted"):
            raise ConfigError(f"llm_backend must be 'openai' or 'scripted', got {self.llm_backend!r}")
        if self.nli_backend not in ("http", "scripted"):
            raise ConfigError(f"nli_backend must be 'http' or 'scripted', got {self.nli_backend!r}")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be at least 1")
        if self.bootstrap_iters < 1:
            raise ConfigError("bootstrap_iters must be at least 1")

    def snapshot(self) -> dict[str, Any]:
        """Config as recorded in manifests; credentials never appear here."""
        return {
            "benchmark_path": self.benchmark_path,
            "gold_labels_path": self.gold_labels_path,
            "variant": self.variant.to_dict(),
            "judge": dataclasses.asdict(self.judge_config),
            "reward": self.reward_config.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "concurrency_limit": self.concurrency_limit,
            "bootstrap_iters": self.bootstrap_iters,
            "llm_backend": self.llm_backend,
            "llm_script": self.llm_script,
            "nli_backend": self.nli_backend,
            "nli_script": self.nli_script,
            "nli_label_order": list(self.nli_label_order),
            "verdicts_path": self.verdicts_path,
        }


# --------------------------------------------------------------------------
# configuration: defaults < config file < environment < command-line flags

_RUN_KEYS = {
    "benchmark": "benchmark_path",
    "benchmark_path": "benchmark_path",
    "gold": "gold_labels_path",
    "gold_labels_path": "gold_labels_path",
    "output_dir": "output_dir",
    "seed": "seed",
    "concurrency_limit": "concurrency_limit",
    "bootstrap_iters": "bootstrap_iters",
    "verdicts": "verdicts_path",
    "verdicts_path": "verdicts_path",
    "assign_token_spans": "assign_token_spans",
}
_PATH_FIELDS = ("benchmark_path", "gold_labels_path", "llm_script", "nli_script", "verdicts_path")
_JUDGE_FIELDS = {f.name for f in dataclasses.fields(JudgeConfig)}


def _read_toml(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                    environ: Mapping[str, str] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a TOML file, environment and flag overrides.

    Flag overrides use flat keys: the ``RunConfig`` field names plus
    ``variant``, ``ablate``, ``confidence_threshold`` and any ``JudgeConfig``
    field.  ``None`` values in ``overrides`` mean "not given".
    """
    environ = os.environ if environ is None else environ
    data = _read_toml(path) if path else {}
    base_dir = Path(path).resolve().parent if path else None

    run: dict[str, Any] = {}
    for key, value in data.get("run", {}).items():
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown [run] key {key!r}")
        run[_RUN_KEYS[key]] = value
    judge_raw = dict(data.get("judge", {}))
    for key in ("llm_backend", "llm_script", "nli_backend", "nli_script", "nli_label_order"):
        if key in judge_raw:
            run[key] = judge_raw.pop(key)
    if "model" in judge_raw:
        judge_raw["model_name"] = judge_raw.pop("model")
    unknown = set(judge_raw) - _JUDGE_FIELDS
    if unknown:
        raise ConfigError(f"unknown [judge] keys {sorted(unknown)}")
    if base_dir is not None:
        for key in _PATH_FIELDS:
            if run.get(key):
                run[key] = str((base_dir / run[key]).resolve()) if not Path(run[key]).is_absolute() else run[key]
        if judge_raw.get("cache_dir") and not Path(judge_raw["cache_dir"]).is_absolute():
            judge_raw["cache_dir"] = str((base_dir / judge_raw["cache_dir"]).resolve())
    variant_raw = dict(data.get("variant", {}))

    # environment overrides for endpoints and model
    for env, key in ((ENV_ENDPOINT, "endpoint"), (ENV_MODEL, "model_name"), (ENV_NLI_ENDPOINT, "nli_endpoint")):
        if environ.get(env):
            judge_raw[key] = environ[env]

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("variant", "name"):
            variant_raw["name"] = value
        elif key == "ablate":
            variant_raw["ablate"] = value
        elif key == "confidence_threshold":
            variant_raw["confidence_threshold"] = value
        elif key in _JUDGE_FIELDS:
            judge_raw[key] = value
        elif key == "reward_config":
            run["reward_config"] = value
        else:
            run[key] = value

    try:
        variant = CheckerVariant(
            name=variant_raw.get("name", "StepGap"),
            stage_ablations=frozenset(_stage_set(variant_raw.get("ablate", ()))),
            overall_confidence_threshold=variant_raw.get("confidence_threshold"),
        )
        judge = JudgeConfig(**judge_raw)
        reward = run.pop("reward_config", None)
        if reward is None:
            reward = RewardConfig.from_dict(data["reward"]) if "reward" in data else RewardConfig()
        if "nli_label_order" in run:
            run["nli_label_order"] = tuple(run["nli_label_order"])
        if "benchmark_path" not in run:
            raise ConfigError("no benchmark given (set [run] benchmark or pass --benchmark)")
        return RunConfig(variant=variant, judge_config=judge, reward_config=reward,
                         config_path=str(path) if path else None, **run)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _stage_set(value: Any) -> set[str]:
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    return {str(v).upper() for v in value}


# --------------------------------------------------------------------------
# judges


@dataclass
class JudgeBundle:
    """Backends shared by every run of one command, so the cache is shared too."""

    cache: JudgeCache
    llm_backend: CachedBackend | None = None
    nli_backend: CachedBackend | None = None
    nli_judge: NliJudge | None = None

    def judges(self) -> Judges:
        llm = LlmJudge(self.llm_backend) if self.llm_backend is not None else None
        return Judges(llm=llm, nli=self.nli_judge)

    def backend_calls(self) -> dict[str, int]:
        out = {}
        for name, b in (("llm", self.llm_backend), ("nli", self.nli_backend)):
            if b is not None:
                out[f"{name}_backend_calls"] = b.misses
                out[f"{name}_cache_hits"] = b.hits
        return out


def build_judges(cfg: RunConfig, variants: Iterable[CheckerVariant]) -> JudgeBundle:
    variants = list(variants)
    jc = cfg.judge_config
    bundle = JudgeBundle(JudgeCache(jc.cache_dir))
    if any(v.needs_llm for v in variants):
        if cfg.llm_backend == "scripted":
            if not cfg.llm_script:
                raise ConfigError("llm_backend = 'scripted' needs llm_script")
            backend = ScriptedLlmBackend(_existing(cfg.llm_script), model_name=jc.model_name)
        else:
            backend = OpenAICompatBackend(jc.endpoint, jc.model_name, timeout=jc.timeout,
                                          max_retries=jc.max_retries, max_concurrency=jc.max_concurrency)
        bundle.llm_backend = CachedBackend(backend, bundle.cache)
    if any(v.needs_nli for v in variants):
        if cfg.nli_backend == "scripted":
            if not cfg.nli_script:
                raise ConfigError("nli_backend = 'scripted' needs nli_script")
            nli = ScriptedNliBackend(_existing(cfg.nli_script), label_order=cfg.nli_label_order)
        else:
            if not jc.nli_endpoint:
                raise ConfigError(f"variant needs an NLI judge: set judge.nli_endpoint or {ENV_NLI_ENDPOINT}")
            nli = HttpNliBackend(jc.nli_endpoint, timeout=jc.timeout, max_retries=jc.max_retries,
                                 max_concurrency=jc.max_concurrency)
        bundle.nli_backend = CachedBackend(nli, bundle.cache)
        bundle.nli_judge = NliJudge(bundle.nli_backend, jc.entailment_threshold, jc.contradiction_threshold,
                                    jc.premise_token_budget)
        bundle.nli_judge.calibrate()
    return bundle


def _existing(path: str) -> str:
    if not Path(path).is_file():
        raise ConfigError(f"file not found: {path}")
    return path


# --------------------------------------------------------------------------
# inputs


@dataclass
class Benchmark:
    traces: list[ReasoningTrace]
    skipped: list[str]
    gold: dict[tuple[str, int], GapType] | None

    @property
    def correctness(self) -> dict[str, bool | None]:
        out: dict[str, bool | None] = {}
        for t in self.traces:
            # with several rollouts per question, the question counts as the first rollout's outcome
            out.setdefault(t.question_id, t.em_correct)
        return out


def load_benchmark(cfg: RunConfig) -> Benchmark:
    if not Path(cfg.benchmark_path).is_file():
        raise MalformedRecord(f"benchmark file not found: {cfg.benchmark_path}")
    traces, skipped = read_traces(cfg.benchmark_path)
    if not traces:
        raise MalformedRecord(f"{cfg.benchmark_path}: no parseable traces")
    gold = None
    if cfg.gold_labels_path:
        if not Path(cfg.gold_labels_path).is_file():
            raise MalformedRecord(f"gold label file not found: {cfg.gold_labels_path}")
        gold = {(g.question_id, g.step_index): g.label for g in read_gold_labels(cfg.gold_labels_path)}
    return Benchmark(traces, skipped, gold)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(cfg: RunConfig) -> dict[str, str]:
    paths = {
        "benchmark": cfg.benchmark_path,
        "gold_labels": cfg.gold_labels_path,
        "llm_script": cfg.llm_script if cfg.llm_backend == "scripted" else None,
        "nli_script": cfg.nli_script if cfg.nli_backend == "scripted" else None,
        "verdicts": cfg.verdicts_path,
        "config": cfg.config_path,
    }
    return {k: file_sha256(p) for k, p in paths.items() if p and Path(p).is_file()}


# --------------------------------------------------------------------------
# running the checker


def run_variant(traces: Sequence[ReasoningTrace], variant: CheckerVariant, judges: Judges,
                concurrency_limit: int = 1) -> list[list[GapVerdict]]:
    """Check every trace; traces run concurrently, steps within a trace in order."""
    if concurrency_limit <= 1:
        return [check_trace(t, variant, judges) for t in traces]
    with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
        return list(pool.map(lambda t: check_trace(t, variant, judges), traces))


def predictions(traces: Sequence[ReasoningTrace], verdicts: Sequence[Sequence[GapVerdict]],
                gold: Mapping[tuple[str, int], GapType] | None = None) -> list[StepPrediction]:
    preds = []
    for trace, vs in zip(traces, verdicts):
        for v in vs:
            g = gold.get((trace.question_id, v.step_index)) if gold is not None else None
            preds.append(StepPrediction(trace.question_id, v.step_index, v.gap_type, g, v.unchecked))
    return preds


def verdict_records(traces: Sequence[ReasoningTrace], verdicts: Sequence[Sequence[GapVerdict]],
                    variant: CheckerVariant) -> list[dict[str, Any]]:
    out = []
    for trace, vs in zip(traces, verdicts):
        for v in vs:
            rec = v.to_record()
            rec["rollout_id"] = trace.rollout_id
            rec["variant"] = variant.name.value
            out.append(rec)
    return out


def read_verdicts(path: str | Path) -> dict[tuple[str, str | None], list[GapVerdict]]:
    """Stored verdicts grouped by (question_id, rollout_id), in step order."""
    grouped: dict[tuple[str, str | None], list[GapVerdict]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                v = GapVerdict.from_record(rec)
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
            grouped[(str(rec["question_id"]), rec.get("rollout_id"))].append(v)
    for vs in grouped.values():
        vs.sort(key=lambda v: v.step_index or 0)
    return dict(grouped)


# --------------------------------------------------------------------------
# reports


def _fmt(x: float | None, digits: int = 1) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def format_report(name: str, report: MetricsReport) -> str:
    ci = report.sF1_ci
    lines = [
        f"{'Variant':<16}{'sP':>7}{'sR':>7}{'sF1':>7}  {'95% CI':<15}{'Q-F1':>7}{'BA':>7}",
        f"{name:<16}{_fmt(report.sP):>7}{_fmt(report.sR):>7}{_fmt(report.sF1):>7}  "
        f"{(f'[{ci[0]:.1f}, {ci[1]:.1f}]' if ci else 'n/a'):<15}{_fmt(report.qF1):>7}"
        f"{_fmt(report.balanced_accuracy):>7}",
        "",
        "Category distribution (%)",
        f"{'Variant':<16}" + "".join(f"{t.value:>8}" for t in (GapType.NO_GAP, GapType.IE, GapType.CC, GapType.MB))
        + "  health",
        f"{name:<16}" + "".join(f"{100 * report.category_distribution.get(t.value, 0.0):>8.1f}"
                                for t in (GapType.NO_GAP, GapType.IE, GapType.CC, GapType.MB))
        + ("  ok" if report.health_flag else "  DEGENERATE"),
    ]
    for w in report.health_warnings:
        lines.append(f"  warning: {w}")
    ct = report.crosstab
    lines += [
        "",
        "Answer correctness vs gap detection (questions)",
        f"{'':<16}{'flagged':>9}{'unflagged':>11}",
        f"{'wrong answer':<16}{ct['TP']:>9}{ct['FN']:>11}",
        f"{'correct answer':<16}{ct['FP']:>9}{ct['TN']:>11}",
        "",
        "First flagged gap type on wrong answers (%)",
        "".join(f"{t:>8}" for t in ("IE", "CC", "MB")),
        "".join(f"{100 * report.first_gap_distribution.get(t, 0.0):>8.0f}" for t in ("IE", "CC", "MB")),
        "",
        f"steps={report.n_steps} questions={report.n_questions} unchecked={report.unchecked}",
    ]
    return "\n".join(lines) + "\n"


def write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


@dataclass
class Manifest:
    command: str
    config: dict[str, Any]
    seed: int
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    judge_calls: dict[str, int] = field(default_factory=dict)
    backend_calls: dict[str, int] = field(default_factory=dict)
    unchecked: int = 0
    wall_clock_seconds: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class RunWriter:
    """Single writer for one command's output directory; the manifest is written last."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.dir = Path(cfg.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.started = time.perf_counter()
        self.manifest = Manifest(command, cfg.snapshot(), cfg.seed, _input_hashes(cfg))

    def lines(self, name: str, records: Iterable[Mapping[str, Any]]) -> Path:
        path = self.dir / name
        write_json_lines(path, records)
        self.manifest.outputs[name] = file_sha256(path)
        return path

    def text(self, name: str, text: str) -> Path:
        path = self.dir / name
        write_text(path, text)
        self.manifest.outputs[name] = file_sha256(path)
        return path

    def finish(self, calls: Mapping[str, int] | None = None, bundle: JudgeBundle | None = None,
               unchecked: int = 0) -> Manifest:
        self.manifest.judge_calls = dict(sorted((calls or {}).items()))
        self.manifest.backend_calls = bundle.backend_calls() if bundle else {}
        self.manifest.unchecked = unchecked
        self.manifest.wall_clock_seconds = round(time.perf_counter() - self.started, 4)
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(self.manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return self.manifest


def _qf1(preds: Sequence[StepPrediction], correctness: Mapping[str, bool | None]) -> float | None:
    """Question-level F1, or ``None`` when no question has a known answer outcome."""
    if not any(c is not None for c in correctness.values()):
        return None
    return question_f1(preds, correctness)


def _raise_if_all_unchecked(verdicts: Sequence[Sequence[GapVerdict]]) -> None:
    flat = [v for vs in verdicts for v in vs]
    if flat and all(v.unchecked for v in flat):
        raise JudgeUnavailable("every step is unchecked; the judges never answered")


def _finish_if_all_unchecked(writer: "RunWriter", verdicts: Sequence[Sequence[GapVerdict]], judges: Judges,
                             bundle: JudgeBundle | None) -> None:
    """Close the run with a manifest and raise when no step could be checked."""
    flat = [v for vs in verdicts for v in vs]
    if flat and all(v.unchecked for v in flat):
        writer.finish(judges.calls, bundle, len(flat))
        _raise_if_all_unchecked(verdicts)


# --------------------------------------------------------------------------
# commands


@dataclass
class CheckResult:
    verdicts: list[list[GapVerdict]]
    report: MetricsReport
    manifest: Manifest
    traces: list[ReasoningTrace]


def cmd_check(cfg: RunConfig) -> CheckResult:
    bench = load_benchmark(cfg)
    bundle = build_judges(cfg, [cfg.variant])
    judges = bundle.judges()
    writer = RunWriter(cfg, "check")
    verdicts = run_variant(bench.traces, cfg.variant, judges, cfg.concurrency_limit)
    writer.lines("verdicts.jsonl", verdict_records(bench.traces, verdicts, cfg.variant))
    _finish_if_all_unchecked(writer, verdicts, judges, bundle)
    preds = predictions(bench.traces, verdicts, bench.gold)
    report = build_report(preds, bench.correctness, iters=cfg.bootstrap_iters, seed=cfg.seed)
    writer.lines("metrics.jsonl", [{"variant": cfg.variant.name.value, "seed": cfg.seed, **report.to_record()}])
    writer.text("report.txt", format_report(cfg.variant.name.value, report))
    manifest = writer.finish(judges.calls, bundle, report.unchecked)
    return CheckResult(verdicts, report, manifest, bench.traces)


def _label_of(variant: CheckerVariant, base: CheckerVariant) -> str:
    removed = sorted(variant.stage_ablations - base.stage_ablations)
    return "full" if not removed else "-" + "".join(removed)


@dataclass
class AblationRow:
    config: str
    variant: dict[str, Any]
    sF1: float | None
    qF1: float | None
    balanced_accuracy: float | None
    delta_sF1: float | None
    flipped: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def cmd_ablate(cfg: RunConfig, stages: Iterable[str]) -> list[AblationRow]:
    """Full run plus one run per removed stage (and both together when two are given)."""
    stages = sorted(_stage_set(stages))
    if cfg.variant.name not in (VariantName.STEPGAP, VariantName.LLM_ONLY):
        raise ConfigError("ablation applies to StepGap and LlmOnly only")
    try:
        configs = [cfg.variant] + [cfg.variant.without([s]) for s in stages]
        if len(stages) > 1:
            configs.append(cfg.variant.without(stages))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    bench = load_benchmark(cfg)
    bundle = build_judges(cfg, configs)
    judges = bundle.judges()
    writer = RunWriter(cfg, "ablate")

    rows: list[AblationRow] = []
    full_preds: list[StepPrediction] | None = None
    full_f1 = None
    unchecked = 0
    all_verdicts = []
    for variant in configs:
        name = _label_of(variant, cfg.variant)
        verdicts = run_variant(bench.traces, variant, judges, cfg.concurrency_limit)
        all_verdicts.extend(verdicts)
        _finish_if_all_unchecked(writer, verdicts, judges, bundle)
        preds = predictions(bench.traces, verdicts, bench.gold)
        unchecked += sum(p.unchecked for p in preds)
        sf1 = step_prf(preds)[2] if bench.gold is not None else None
        ba = balanced_accuracy(preds) if bench.gold is not None else None
        qf1 = _qf1(preds, bench.correctness)
        flipped = []
        if full_preds is None:
            full_preds, full_f1 = preds, sf1
        else:
            for before, after in zip(full_preds, preds):
                if before.predicted != after.predicted:
                    flipped.append({"question_id": after.question_id, "step_index": after.step_index,
                                    "from": before.predicted.value, "to": after.predicted.value})
        delta = None if sf1 is None or full_f1 is None or name == "full" else sf1 - full_f1
        rows.append(AblationRow(name, variant.to_dict(), sf1, qf1, ba, delta, flipped))
        suffix = "full" if name == "full" else "minus_" + name[1:]
        writer.lines(f"verdicts_{suffix}.jsonl", verdict_records(bench.traces, verdicts, variant))

    writer.lines("ablation.jsonl", [r.to_dict() for r in rows])
    table = [f"{'Config':<10}{'sF1':>8}{'dsF1':>8}{'Q-F1':>8}{'BA':>8}{'flips':>7}"]
    for r in rows:
        table.append(f"{r.config:<10}{_fmt(r.sF1):>8}{_fmt(r.delta_sF1):>8}{_fmt(r.qF1):>8}"
                     f"{_fmt(r.balanced_accuracy):>8}{len(r.flipped):>7}")
    writer.text("ablation.txt", "\n".join(table) + "\n")
    writer.finish(judges.calls, bundle, unchecked)
    _raise_if_all_unchecked(all_verdicts)
    return rows


@dataclass
class SweepRow:
    threshold: float
    sP: float | None
    sR: float | None
    sF1: float | None
    qF1: float | None
    balanced_accuracy: float | None
    n_gaps: int
    distribution: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def gate_all(verdicts: Sequence[Sequence[GapVerdict]], threshold: float) -> list[list[GapVerdict]]:
    return [[apply_confidence_gate(v, threshold) for v in vs] for vs in verdicts]


def cmd_sweep(cfg: RunConfig, thresholds: Sequence[float]) -> list[SweepRow]:
    """Gate one ungated run at each threshold and recompute the metrics."""
    for t in thresholds:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"sweep threshold out of [0, 1]: {t}")
    ungated = replace(cfg.variant, overall_confidence_threshold=0.0)
    bench = load_benchmark(cfg)
    bundle = build_judges(cfg, [ungated])
    judges = bundle.judges()
    writer = RunWriter(cfg, "sweep")
    raw = run_variant(bench.traces, ungated, judges, cfg.concurrency_limit)
    _finish_if_all_unchecked(writer, raw, judges, bundle)
    rows = []
    for t in thresholds:
        preds = predictions(bench.traces, gate_all(raw, t), bench.gold)
        sp = sr = sf = ba = None
        if bench.gold is not None:
            sp, sr, sf = step_prf(preds)
            ba = balanced_accuracy(preds)
        rows.append(SweepRow(float(t), sp, sr, sf, _qf1(preds, bench.correctness), ba,
                             sum(1 for p in preds if p.predicted.is_gap and not p.unchecked),
                             category_distribution(preds)))
    writer.lines("sweep.jsonl", [r.to_dict() for r in rows])
    header = "threshold\tsP\tsR\tsF1\tqF1\tBA\tn_gaps\tNoGap\tIE\tCC\tMB"
    body = [
        "\t".join([f"{r.threshold:g}", _fmt(r.sP, 3), _fmt(r.sR, 3), _fmt(r.sF1, 3), _fmt(r.qF1, 3),
                   _fmt(r.balanced_accuracy, 3), str(r.n_gaps)]
                  + [f"{r.distribution.get(k, 0.0):.4f}" for k in ("NoGap", "IE", "CC", "MB")])
        for r in rows
    ]
    writer.text("sweep.tsv", "\n".join([header, *body]) + "\n")
    unchecked = sum(v.unchecked for vs in raw for v in vs)
    writer.finish(judges.calls, bundle, unchecked)
    _raise_if_all_unchecked(raw)
    return rows


def _verdicts_for(cfg: RunConfig, traces: Sequence[ReasoningTrace]) -> tuple[list[list[GapVerdict]], Judges | None,
                                                                            JudgeBundle | None]:
    if cfg.verdicts_path:
        stored = read_verdicts(cfg.verdicts_path)
        out = []
        for t in traces:
            vs = stored.get((t.question_id, t.rollout_id)) or stored.get((t.question_id, None))
            if vs is None:
                raise MalformedRecord(f"no stored verdicts for {t.question_id} ({t.rollout_id})")
            out.append(vs)
        return out, None, None
    bundle = build_judges(cfg, [cfg.variant])
    judges = bundle.judges()
    return run_variant(traces, cfg.variant, judges, cfg.concurrency_limit), judges, bundle


def cmd_reward(cfg: RunConfig) -> list[dict[str, Any]]:
    """Reward breakdown and dense token advantages per rollout.

    Rollouts sharing a question id form one standardization group; a
    question with a single rollout gets no advantages (``null``).
    """
    bench = load_benchmark(cfg)
    traces = []
    for t in bench.traces:
        if any(s.token_span is None for s in t.steps):
            if not cfg.assign_token_spans:
                raise MissingTokenSpan(f"{t.question_id}: trace has steps without token spans")
            t = with_token_spans(t)
        traces.append(t)
    writer = RunWriter(cfg, "reward")
    verdicts, judges, bundle = _verdicts_for(cfg, traces)
    breakdowns = [trajectory_return(vs, t, cfg.reward_config) for vs, t in zip(verdicts, traces)]

    groups: dict[str, list[int]] = defaultdict(list)
    for i, t in enumerate(traces):
        groups[t.question_id].append(i)
    advantages: dict[int, list[float] | None] = {}
    for members in groups.values():
        if len(members) < 2:
            advantages[members[0]] = None
            continue
        advs = assign_dense_advantages([breakdowns[i] for i in members], [traces[i] for i in members])
        for i, a in zip(members, advs):
            advantages[i] = list(a.per_token)

    records = []
    for i, (b, t) in enumerate(zip(breakdowns, traces)):
        rec = b.to_record()
        rec["variant"] = cfg.reward_config.variant.value
        rec["token_spans"] = [list(s.token_span) for s in t.steps]
        rec["advantages"] = advantages[i]
        records.append(rec)
    writer.lines("rewards.jsonl", records)
    unchecked = sum(v.unchecked for vs in verdicts for v in vs)
    writer.finish(judges.calls if judges else {}, bundle, unchecked)
    return records


def distill_records(traces: Sequence[ReasoningTrace], verdicts: Sequence[Sequence[GapVerdict]],
                    variant: CheckerVariant) -> list[dict[str, Any]]:
    out = []
    for trace, vs in zip(traces, verdicts):
        for step, v in zip(trace.steps, vs):
            out.append({
                "question_id": trace.question_id,
                "rollout_id": trace.rollout_id,
                "step_index": v.step_index,
                "step_kind": step.step_kind().value,
                "claim": step.claim(),
                "query": step.query,
                "teacher_variant": variant.name.value,
                "llm_response": v.judgments.get("llm"),
                "entity_filter": v.judgments.get("entity_filter"),
                "nli_verdicts": list(v.judgments.get("nli", [])),
                "gap_type": v.gap_type.value,
                "confidence": v.confidence,
                "pipeline_path": v.path_string,
                "unchecked": v.unchecked,
            })
    return out


def read_distill_records(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_distill_export(cfg: RunConfig) -> list[dict[str, Any]]:
    bench = load_benchmark(cfg)
    bundle = build_judges(cfg, [cfg.variant])
    judges = bundle.judges()
    writer = RunWriter(cfg, "distill-export")
    verdicts = run_variant(bench.traces, cfg.variant, judges, cfg.concurrency_limit)
    records = distill_records(bench.traces, verdicts, cfg.variant)
    writer.lines("distill.jsonl", records)
    writer.finish(judges.calls, bundle, sum(r["unchecked"] for r in records))
    _raise_if_all_unchecked(verdicts)
    return records


def cmd_trap(cfg: RunConfig, w_strata: Sequence[float] = DEFAULT_TRAP_STRATA, stratum_size: int = 200,
             tolerance: float = 0.02) -> list[dict[str, Any]]:
    """Flag-everything Q-F1 on strata resampled to each wrong-answer rate."""
    bench = load_benchmark(cfg)
    writer = RunWriter(cfg, "trap")
    flag_all = CheckerVariant(VariantName.FLAG_EVERYTHING)
    judges = Judges()
    verdicts = run_variant(bench.traces, flag_all, judges)
    by_question: dict[str, list[StepPrediction]] = defaultdict(list)
    for p in predictions(bench.traces, verdicts):
        by_question[p.question_id].append(p)
    known = {q: c for q, c in bench.correctness.items() if c is not None}
    rows = [r.to_dict() for r in trap_experiment(by_question, known, w_strata, cfg.seed, stratum_size, tolerance)]
    writer.lines("trap.jsonl", rows)
    header = "target_w\tw\tn_questions\tempirical_qF1\tanalytic_qF1\twithin_tolerance"
    body = [f"{r['target_w']:g}\t{r['w']:.4f}\t{r['n_questions']}\t{r['empirical_qf1']:.4f}\t"
            f"{r['analytic_qf1']:.4f}\t{r['within_tolerance']}" for r in rows]
    writer.text("trap.tsv", "\n".join([header, *body]) + "\n")
    writer.finish(judges.calls)
    return rows
