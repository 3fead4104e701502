"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 judge unavailable,
4 malformed input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from . import bench
from .errors import (
    CalibrationFailed,
    ConfigError,
    JudgeUnavailable,
    MalformedRecord,
    MalformedTrace,
    MissingTokenSpan,
    MissingVerdict,
    ScriptExhausted,
    InsufficientQuestions,
    DomainError,
    EmptyInput,
)
from .reward import RewardConfig, RewardVariant

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_JUDGE = 3
EXIT_INPUT = 4

logger = logging.getLogger("stepgap")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--benchmark", dest="benchmark_path", help="trace file (one JSON record per line)")
    p.add_argument("--gold", dest="gold_labels_path", help="gold step labels (JSON lines)")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--concurrency", dest="concurrency_limit", type=int)
    p.add_argument("--bootstrap-iters", dest="bootstrap_iters", type=int)
    p.add_argument("--variant", choices=[v.value for v in bench.VariantName])
    p.add_argument("--confidence-threshold", dest="confidence_threshold", type=float)
    p.add_argument("--llm-backend", dest="llm_backend", choices=["openai", "scripted"])
    p.add_argument("--llm-script", dest="llm_script")
    p.add_argument("--nli-backend", dest="nli_backend", choices=["http", "scripted"])
    p.add_argument("--nli-script", dest="nli_script")
    p.add_argument("--endpoint", help="chat-completions base URL (overrides env and file)")
    p.add_argument("--model", dest="model_name")
    p.add_argument("--nli-endpoint", dest="nli_endpoint")
    p.add_argument("--cache-dir", dest="cache_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepgap", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="label every step of a benchmark and score against gold labels")
    _common(p)
    p.add_argument("--ablate", help="stages to skip, e.g. A or A,E")

    p = sub.add_parser("ablate", help="compare the full checker against stage removals")
    _common(p)
    p.add_argument("--stages", default="A,E", help="stages to remove one at a time (default A,E)")

    p = sub.add_parser("sweep", help="metrics under overall-confidence gating at several thresholds")
    _common(p)
    p.add_argument("--thresholds", type=_floats, default=[0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])

    p = sub.add_parser("reward", help="export process rewards and dense advantages")
    _common(p)
    p.add_argument("--verdicts", dest="verdicts_path", help="reuse stored verdicts instead of running judges")
    p.add_argument("--reward-config", help="TOML file with reward settings")
    p.add_argument("--reward-variant", choices=[v.value for v in RewardVariant])
    p.add_argument("--lambda", dest="lam", type=float)

    p = sub.add_parser("distill-export", help="export teacher judgments for student training")
    _common(p)

    p = sub.add_parser("trap", help="flag-everything Q-F1 on resampled wrong-answer strata")
    _common(p)
    p.add_argument("--strata", type=_floats, default=list(bench.DEFAULT_TRAP_STRATA))
    p.add_argument("--stratum-size", type=int, default=200)

    p = sub.add_parser("synth", help="write the synthetic benchmark with scripted judges")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


_CONFIG_KEYS = (
    "benchmark_path", "gold_labels_path", "output_dir", "seed", "concurrency_limit", "bootstrap_iters",
    "variant", "confidence_threshold", "llm_backend", "llm_script", "nli_backend", "nli_script",
    "endpoint", "model_name", "nli_endpoint", "cache_dir", "ablate", "verdicts_path",
)


def _reward_override(args: argparse.Namespace, base: RewardConfig | None) -> RewardConfig | None:
    path = getattr(args, "reward_config", None)
    variant = getattr(args, "reward_variant", None)
    lam = getattr(args, "lam", None)
    if path is None and variant is None and lam is None:
        return None
    cfg = RewardConfig.load(path) if path else (base or RewardConfig())
    data = cfg.to_dict()
    if variant is not None:
        data["variant"] = variant
    if lam is not None:
        data["lambda"] = lam
    return RewardConfig.from_dict(data)


def config_from_args(args: argparse.Namespace) -> bench.RunConfig:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    cfg = bench.load_run_config(args.config, overrides)
    reward = _reward_override(args, cfg.reward_config)
    if reward is not None:
        cfg.reward_config = reward
    return cfg


def _run(args: argparse.Namespace) -> int:
    if args.command == "synth":
        from .synthetic import synthetic_benchmark

        paths = synthetic_benchmark(args.seed).write(args.out)
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
        return EXIT_OK
    cfg = config_from_args(args)
    if args.command == "check":
        result = bench.cmd_check(cfg)
        print(bench.format_report(cfg.variant.name.value, result.report), end="")
    elif args.command == "ablate":
        bench.cmd_ablate(cfg, args.stages)
        print((bench.Path(cfg.output_dir) / "ablation.txt").read_text(), end="")
    elif args.command == "sweep":
        bench.cmd_sweep(cfg, args.thresholds)
        print((bench.Path(cfg.output_dir) / "sweep.tsv").read_text(), end="")
    elif args.command == "reward":
        records = bench.cmd_reward(cfg)
        print(f"wrote {len(records)} reward records to {cfg.output_dir}/rewards.jsonl")
    elif args.command == "distill-export":
        records = bench.cmd_distill_export(cfg)
        print(f"wrote {len(records)} labelled steps to {cfg.output_dir}/distill.jsonl")
    elif args.command == "trap":
        bench.cmd_trap(cfg, args.strata, args.stratum_size)
        print((bench.Path(cfg.output_dir) / "trap.tsv").read_text(), end="")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, DomainError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (JudgeUnavailable, CalibrationFailed, ScriptExhausted) as exc:
        logger.error("judge unavailable: %s", exc)
        return EXIT_JUDGE
    except (MalformedRecord, MalformedTrace, MissingTokenSpan, MissingVerdict, InsufficientQuestions,
            EmptyInput) as exc:
        logger.error("malformed input: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
