"""Typed process reward: base reward per gap type, repair shaping, trajectory
return and dense, group-standardized token advantages for a GRPO trainer."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .checker import GapVerdict, detect_retraction
from .errors import ConfigError, MissingTokenSpan, MissingVerdict
from .labels import GapType
from .trace import ReasoningTrace, Step, token_f1

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class RewardVariant(str, Enum):
    SEARCH_ONLY = "SearchOnly"
    BINARY_GAP = "BinaryGap"
    TYPED_BASE = "TypedBase"
    TYPED_SHAPE = "TypedShape"
    UNTYPED_DENSE = "UntypedDense"


DEFAULT_BASE = {GapType.NO_GAP: 0.20, GapType.MB: -0.05, GapType.IE: -0.10, GapType.CC: 0.05}
DEFAULT_SHAPE = {
    "new_search_after_gap": 0.10,
    "retract_after_cc": 0.15,
    "answer_through_gap": -0.15,
    "near_duplicate_search": -0.05,
}


@dataclass(frozen=True)
class RewardConfig:
    base: Mapping[GapType, float] = field(default_factory=lambda: dict(DEFAULT_BASE))
    shape: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_SHAPE))
    lam: float = 1.0
    near_duplicate_threshold: float = 0.7
    variant: RewardVariant = RewardVariant.TYPED_SHAPE

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", RewardVariant(self.variant))
        object.__setattr__(self, "base", {GapType.parse(k): float(v) for k, v in self.base.items()})
        missing = set(GapType) - set(self.base)
        if missing:
            raise ConfigError(f"base reward missing rows for {sorted(m.value for m in missing)}")
        unknown = set(self.shape) - set(DEFAULT_SHAPE)
        if unknown:
            raise ConfigError(f"unknown shaping terms {sorted(unknown)}")
        object.__setattr__(self, "shape", {**DEFAULT_SHAPE, **{k: float(v) for k, v in self.shape.items()}})

    def base_table(self) -> dict[GapType, float]:
        """Base reward per type after the variant's collapsing rule."""
        nogap = self.base[GapType.NO_GAP]
        if self.variant is RewardVariant.BINARY_GAP:
            return {t: (nogap if t is GapType.NO_GAP else 0.0) for t in GapType}
        if self.variant is RewardVariant.UNTYPED_DENSE:
            return {t: (nogap if t is GapType.NO_GAP else self.base[GapType.IE]) for t in GapType}
        return dict(self.base)

    @property
    def shaping_enabled(self) -> bool:
        return self.variant is RewardVariant.TYPED_SHAPE

    def to_dict(self) -> dict[str, Any]:
        return {
            "base": {k.value: v for k, v in self.base.items()},
            "shape": dict(self.shape),
            "lambda": self.lam,
            "near_duplicate_threshold": self.near_duplicate_threshold,
            "variant": self.variant.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewardConfig":
        kwargs: dict[str, Any] = {}
        if "base" in data:
            kwargs["base"] = {**{k.value: v for k, v in DEFAULT_BASE.items()}, **data["base"]}
        if "shape" in data:
            kwargs["shape"] = data["shape"]
        if "lambda" in data or "lam" in data:
            kwargs["lam"] = float(data.get("lambda", data.get("lam")))
        if "near_duplicate_threshold" in data:
            kwargs["near_duplicate_threshold"] = float(data["near_duplicate_threshold"])
        if "variant" in data:
            kwargs["variant"] = data["variant"]
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RewardConfig":
        """Read a TOML file; the reward settings may sit at top level or under ``[reward]``."""
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("reward", data))


def base_reward(tau: GapType | str, config: RewardConfig | None = None) -> float:
    config = config or RewardConfig()
    return config.base_table()[GapType.parse(tau)]


def shape_branch(tau_prev: GapType | str, step: Step, prior_queries: Sequence[str],
                 previous_claim: str = "", config: RewardConfig | None = None) -> tuple[str, float]:
    """Which shaping case fires for ``step`` after a ``tau_prev`` verdict, and its value.

    Cases are tried in order: repaired re-search, retraction after CC,
    answering through a gap, near-duplicate re-search, otherwise nothing.
    """
    config = config or RewardConfig()
    tau_prev = GapType.parse(tau_prev)
    w = config.shape
    retrieval_gap = tau_prev in (GapType.IE, GapType.MB)
    if step.is_search and retrieval_gap:
        overlap = max((token_f1(step.query or "", q) for q in prior_queries), default=0.0)
        if overlap <= config.near_duplicate_threshold:
            return "new_search_after_gap", w["new_search_after_gap"]
    if tau_prev is GapType.CC and detect_retraction(step, previous_claim):
        return "retract_after_cc", w["retract_after_cc"]
    if tau_prev.is_gap and step.is_answer:
        return "answer_through_gap", w["answer_through_gap"]
    if step.is_search and retrieval_gap:
        return "near_duplicate_search", w["near_duplicate_search"]
    return "none", 0.0


def shape_reward(tau_prev: GapType | str, step: Step, prior_queries: Sequence[str],
                 previous_claim: str = "", config: RewardConfig | None = None) -> float:
    return shape_branch(tau_prev, step, prior_queries, previous_claim, config)[1]


@dataclass(frozen=True)
class StepReward:
    step_index: int
    tau: GapType
    base: float
    shape: float
    branch: str = "none"

    @property
    def bracket(self) -> float:
        return self.base + self.shape


@dataclass(frozen=True)
class RewardBreakdown:
    per_step: tuple[StepReward, ...]
    em: int
    total_return: float
    lam: float = 1.0
    question_id: str | None = None
    rollout_id: str | None = None

    def to_record(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "rollout_id": self.rollout_id,
            "em": self.em,
            "lambda": self.lam,
            "total_return": self.total_return,
            "per_step": [
                {"step_index": s.step_index, "tau": s.tau.value, "base": s.base, "shape": s.shape, "branch": s.branch}
                for s in self.per_step
            ],
        }


def trajectory_return(verdicts: Sequence[GapVerdict | GapType | str], trace: ReasoningTrace,
                      config: RewardConfig | None = None) -> RewardBreakdown:
    config = config or RewardConfig()
    if len(verdicts) != len(trace.steps):
        raise MissingVerdict(f"{trace.question_id}: {len(verdicts)} verdicts for {len(trace.steps)} steps")
    taus = [v.gap_type if isinstance(v, GapVerdict) else GapType.parse(v) for v in verdicts]
    em = int(bool(trace.em_correct))
    if config.variant is RewardVariant.SEARCH_ONLY:
        return RewardBreakdown((), em, float(em), config.lam, trace.question_id, trace.rollout_id)

    table = config.base_table()
    per_step = []
    tau_prev = GapType.NO_GAP
    prior_queries: list[str] = []
    previous_claim = ""
    for step, tau in zip(trace.steps, taus):
        branch, shape = ("none", 0.0)
        if config.shaping_enabled:
            branch, shape = shape_branch(tau_prev, step, prior_queries, previous_claim, config)
        per_step.append(StepReward(step.index, tau, table[tau], shape, branch))
        tau_prev = tau
        if step.query is not None:
            prior_queries.append(step.query)
        previous_claim = step.claim()
    total = em + config.lam * math.fsum(s.bracket for s in per_step)
    return RewardBreakdown(tuple(per_step), em, total, config.lam, trace.question_id, trace.rollout_id)


def group_standardize(returns: Sequence[float]) -> list[float]:
    """(R - mean) / population std over a group; an all-equal group gives zeros."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("group-relative standardization needs at least two rollouts")
    sigma = r.std()
    if sigma == 0.0:
        return [0.0] * r.size
    return list((r - r.mean()) / sigma)


@dataclass(frozen=True)
class TokenAdvantages:
    per_token: tuple[float, ...]
    question_id: str | None = None
    rollout_id: str | None = None


def dense_token_returns(breakdown: RewardBreakdown, trace: ReasoningTrace, num_tokens: int | None = None) -> np.ndarray:
    """Per-token raw return: EM plus the weighted bracket of the step owning the token.

    Tokens outside every step span carry the EM component only.
    """
    spans = []
    for step in trace.steps:
        if step.token_span is None:
            raise MissingTokenSpan(f"{trace.question_id}: step {step.index} has no token span")
        spans.append(step.token_span)
    length = num_tokens if num_tokens is not None else max(hi for _, hi in spans)
    values = np.full(length, float(breakdown.em))
    owner = np.zeros(length, dtype=bool)
    brackets = {s.step_index: s.bracket for s in breakdown.per_step}
    for step, (lo, hi) in zip(trace.steps, spans):
        if hi > length:
            raise ValueError(f"{trace.question_id}: span {lo, hi} exceeds {length} tokens")
        if owner[lo:hi].any():
            raise ValueError(f"{trace.question_id}: step {step.index} span overlaps an earlier step")
        owner[lo:hi] = True
        values[lo:hi] += breakdown.lam * brackets.get(step.index, 0.0)
    return values


def assign_dense_advantages(group_returns: Sequence[RewardBreakdown], traces: Sequence[ReasoningTrace]
                            ) -> list[TokenAdvantages]:
    """Token-wise (value - mean_R) / std_R with the group's trajectory returns."""
    if len(group_returns) != len(traces):
        raise MissingVerdict("one reward breakdown per trace is required")
    if len(group_returns) < 2:
        raise ValueError("group-relative standardization needs at least two rollouts")
    totals = np.array([b.total_return for b in group_returns])
    mu, sigma = totals.mean(), totals.std()
    out = []
    for breakdown, trace in zip(group_returns, traces):
        values = dense_token_returns(breakdown, trace)
        adv = np.zeros_like(values) if sigma == 0.0 else (values - mu) / sigma
        out.append(TokenAdvantages(tuple(float(a) for a in adv), breakdown.question_id, breakdown.rollout_id))
    return out


def with_lambda(config: RewardConfig, lam: float) -> RewardConfig:
    return replace(config, lam=lam)
