"""Three-class NLI judge with label-order calibration and threshold rule."""

from __future__ import annotations

import math
import threading
import time
from typing import Any, Sequence

import httpx

from ..errors import CalibrationFailed, JudgeUnavailable
from .cache import Backend
from .schema import NliLabel, NliVerdict
from .scripted import CONTRADICTION_PROBE, ENTAILMENT_PROBE

_ORDER = (NliLabel.ENTAILMENT, NliLabel.NEUTRAL, NliLabel.CONTRADICTION)


def softmax(values: Sequence[float]) -> list[float]:
    top = max(values)
    exps = [math.exp(v - top) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def normalize(values: Sequence[float], emits: str) -> list[float]:
    if emits == "logits":
        return softmax(values)
    if any(v < 0 for v in values):
        raise ValueError(f"probability scores must be non-negative: {values}")
    total = sum(values)
    if total <= 0:
        raise ValueError("probability scores sum to zero")
    return [v / total for v in values]


def _argmax_unique(values: Sequence[float], among: Sequence[int]) -> int | None:
    best = max(values[i] for i in among)
    winners = [i for i in among if values[i] == best]
    return winners[0] if len(winners) == 1 else None


def truncate_premise(premise: str, budget: int) -> tuple[str, bool]:
    tokens = premise.split()
    if budget <= 0 or len(tokens) <= budget:
        return premise, False
    return " ".join(tokens[:budget]), True


class NliJudge:
    """Maps a raw three-dimensional NLI backend onto labelled verdicts.

    ``calibrate`` must run before :meth:`judge`; it probes the backend with a
    known entailment pair to find the entailment dimension, and with a known
    contradiction pair to separate contradiction from neutral.
    """

    def __init__(
        self,
        backend: Backend,
        entailment_threshold: float = 0.5,
        contradiction_threshold: float = 0.5,
        premise_token_budget: int = 400,
    ):
        self.backend = backend
        self.entailment_threshold = entailment_threshold
        self.contradiction_threshold = contradiction_threshold
        self.premise_token_budget = premise_token_budget
        self.mapping: tuple[NliLabel, ...] | None = None
        self._lock = threading.Lock()

    def _raw(self, premise: str, hypothesis: str) -> list[float]:
        response = self.backend.call({"premise": premise, "hypothesis": hypothesis})
        scores = response.get("scores")
        if not isinstance(scores, list) or len(scores) != 3:
            raise JudgeUnavailable(f"NLI backend returned malformed scores: {response!r}")
        try:
            return normalize([float(s) for s in scores],
                             response.get("emits", getattr(self.backend, "emits", "logits")))
        except (TypeError, ValueError) as exc:
            raise JudgeUnavailable(f"NLI backend returned unusable scores {scores!r}: {exc}") from None

    def calibrate(self) -> tuple[NliLabel, ...]:
        with self._lock:
            first = self._raw(*ENTAILMENT_PROBE)
            ent = _argmax_unique(first, range(3))
            if ent is None:
                raise CalibrationFailed(f"entailment probe has no unique top dimension: {first}")
            rest = [i for i in range(3) if i != ent]
            second = self._raw(*CONTRADICTION_PROBE)
            con = _argmax_unique(second, rest)
            if con is None:
                raise CalibrationFailed(f"contradiction probe cannot separate the remaining dimensions: {second}")
            mapping = [NliLabel.NEUTRAL] * 3
            mapping[ent] = NliLabel.ENTAILMENT
            mapping[con] = NliLabel.CONTRADICTION
            self.mapping = tuple(mapping)
            return self.mapping

    def label_scores(self, emitted: Sequence[float]) -> tuple[float, float, float]:
        """Reorder normalized backend scores to (entailment, neutral, contradiction)."""
        if self.mapping is None:
            raise CalibrationFailed("NLI judge used before calibration")
        by_label = dict(zip(self.mapping, emitted))
        return (by_label[NliLabel.ENTAILMENT], by_label[NliLabel.NEUTRAL], by_label[NliLabel.CONTRADICTION])

    def decide(self, scores: tuple[float, float, float]) -> NliLabel:
        ent_hit = scores[0] >= self.entailment_threshold
        con_hit = scores[2] >= self.contradiction_threshold
        if ent_hit and not con_hit:
            return NliLabel.ENTAILMENT
        if con_hit and not ent_hit:
            return NliLabel.CONTRADICTION
        return NliLabel.NEUTRAL

    def judge(self, premise: str, hypothesis: str) -> NliVerdict:
        if not premise.strip() or not hypothesis.strip():
            raise ValueError("NLI premise and hypothesis must be non-empty")
        if self.mapping is None:
            raise CalibrationFailed("NLI judge used before calibration")
        premise, truncated = truncate_premise(premise, self.premise_token_budget)
        scores = self.label_scores(self._raw(premise, hypothesis))
        return NliVerdict(self.decide(scores), scores, truncated)


class HttpNliBackend:
    """Client for a local NLI server: POST ``{premise, hypothesis}`` -> ``{"scores": [...]}``.

    The server returns raw logits unless it includes ``"emits": "probs"``.
    """

    backend_id = "http-nli"

    def __init__(self, endpoint: str, model_name: str = "nli", timeout: float = 30.0, max_retries: int = 3,
                 max_concurrency: int = 8, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model_name = model_name
        self.max_retries = max_retries
        self.emits = "logits"
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def call(self, payload: dict[str, Any]) -> dict[str, Any]:
        last: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json={**payload, "model": self.model_name})
                resp.raise_for_status()
                body = resp.json()
                body.setdefault("emits", self.emits)
                return body
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                time.sleep(min(2**attempt * 0.5, 8.0))
        raise JudgeUnavailable(f"NLI endpoint {self.endpoint} failed after {self.max_retries} attempts: {last}")
