"""Typed evidence-gap checking for search-augmented reasoning traces.

The package parses agent traces into steps, runs a staged judge pipeline that
labels each step NoGap / CC / IE / MB, turns verdicts into process rewards,
and scores checkers against gold labels.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .checker import CheckerVariant, GapVerdict, Judges, StageDecision, VariantName, check_step, check_trace
from .labels import GapType, RepairAction
from .metrics import MetricsReport, StepPrediction, build_report
from .reward import RewardConfig, RewardVariant, trajectory_return
from .trace import EvidenceSnippet, ReasoningTrace, Step, StepKind, parse_trace

__all__ = [
    "CheckerVariant",
    "EvidenceSnippet",
    "GapType",
    "GapVerdict",
    "Judges",
    "MetricsReport",
    "ReasoningTrace",
    "RepairAction",
    "RewardConfig",
    "RewardVariant",
    "StageDecision",
    "Step",
    "StepKind",
    "StepPrediction",
    "VariantName",
    "__version__",
    "build_report",
    "check_step",
    "check_trace",
    "parse_trace",
    "trajectory_return",
]
