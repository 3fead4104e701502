"""Checker evaluation: step- and question-level scores, bootstrap intervals,
agreement, category health, first-gap localization and Q-F1 trap analytics.

Scores are percentages in [0, 100] unless noted; a score whose denominator is
empty is ``None`` rather than 0.
"""

from __future__ import annotations

import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .errors import DomainError, EmptyInput, InsufficientQuestions
from .labels import ALL_LABELS, GAP_TYPES, GapType

T = TypeVar("T")

HEALTHY_IE_BAND = (0.38, 0.41)
DEGENERATE_IE_FLOOR = 0.70
NEVER_FIRES_GAP_RATE = 0.05


@dataclass(frozen=True)
class StepPrediction:
    question_id: str
    step_index: int
    predicted: GapType
    gold: GapType | None = None
    unchecked: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "predicted", GapType.parse(self.predicted))
        if self.gold is not None:
            object.__setattr__(self, "gold", GapType.parse(self.gold))


def checked(preds: Iterable[StepPrediction]) -> list[StepPrediction]:
    return [p for p in preds if not p.unchecked]


def _labelled(preds: Iterable[StepPrediction]) -> list[StepPrediction]:
    out = [p for p in checked(preds) if p.gold is not None]
    if not out:
        raise EmptyInput("no checked, gold-labelled step predictions")
    return out


def _pct(frac: Fraction | None) -> float | None:
    return None if frac is None else float(frac * 100)


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def f1_from_counts(tp: int, fp: int, fn: int) -> Fraction | None:
    den = 2 * tp + fp + fn
    return Fraction(2 * tp, den) if den else None


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def binary_counts(preds: Iterable[StepPrediction]) -> BinaryCounts:
    tp = fp = fn = tn = 0
    for p in _labelled(preds):
        pg, gg = p.predicted.is_gap, p.gold.is_gap  # type: ignore[union-attr]
        if pg and gg:
            tp += 1
        elif pg:
            fp += 1
        elif gg:
            fn += 1
        else:
            tn += 1
    return BinaryCounts(tp, fp, fn, tn)


def step_prf(preds: Iterable[StepPrediction]) -> tuple[float | None, float | None, float | None]:
    """Step-level precision, recall and F1 on has_gap (percentages)."""
    c = binary_counts(preds)
    return (
        _pct(_ratio(c.tp, c.tp + c.fp)),
        _pct(_ratio(c.tp, c.tp + c.fn)),
        _pct(f1_from_counts(c.tp, c.fp, c.fn)),
    )


def balanced_accuracy(preds: Iterable[StepPrediction]) -> float | None:
    """(TPR + TNR) / 2 as a percentage; ``None`` when either gold class is absent."""
    c = binary_counts(preds)
    tpr, tnr = _ratio(c.tp, c.tp + c.fn), _ratio(c.tn, c.tn + c.fp)
    if tpr is None or tnr is None:
        return None
    return _pct((tpr + tnr) / 2)


def typed_f1(preds: Iterable[StepPrediction]) -> dict[str, float | None]:
    """One-vs-rest F1 per gap type plus macro and micro averages (percentages).

    Micro counts a step as a true positive only when both sides flag a gap of
    the same type, so it never exceeds the binary step F1.
    """
    labelled = _labelled(preds)
    out: dict[str, float | None] = {}
    defined = []
    for t in GAP_TYPES:
        tp = sum(1 for p in labelled if p.predicted is t and p.gold is t)
        fp = sum(1 for p in labelled if p.predicted is t and p.gold is not t)
        fn = sum(1 for p in labelled if p.gold is t and p.predicted is not t)
        f = f1_from_counts(tp, fp, fn)
        out[t.value] = _pct(f)
        if f is not None:
            defined.append(f)
    out["macro"] = _pct(sum(defined, Fraction(0)) / len(defined)) if defined else None
    tp = sum(1 for p in labelled if p.predicted.is_gap and p.predicted is p.gold)
    fp = sum(1 for p in labelled if p.predicted.is_gap and p.predicted is not p.gold)
    fn = sum(1 for p in labelled if p.gold.is_gap and p.predicted is not p.gold)  # type: ignore[union-attr]
    out["micro"] = _pct(f1_from_counts(tp, fp, fn))
    return out


# --------------------------------------------------------------------------
# question level


@dataclass(frozen=True)
class Crosstab:
    tp: int  # wrong answer, gap flagged
    fn: int  # wrong answer, nothing flagged
    fp: int  # correct answer, gap flagged
    tn: int  # correct answer, nothing flagged
    unknown: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def to_dict(self) -> dict[str, int]:
        return {"TP": self.tp, "FN": self.fn, "FP": self.fp, "TN": self.tn}


def questions(preds: Iterable[StepPrediction]) -> dict[str, list[StepPrediction]]:
    """Checked predictions grouped by question, each sorted by step index."""
    grouped: dict[str, list[StepPrediction]] = defaultdict(list)
    for p in checked(preds):
        grouped[p.question_id].append(p)
    return {q: sorted(ps, key=lambda p: p.step_index) for q, ps in grouped.items()}


def answer_gap_crosstab(preds: Iterable[StepPrediction], question_correctness: Mapping[str, bool | None]) -> Crosstab:
    tp = fn = fp = tn = 0
    unknown = []
    for qid, steps in sorted(questions(preds).items()):
        correct = question_correctness.get(qid)
        if correct is None:
            unknown.append(qid)
            continue
        flagged = any(p.predicted.is_gap for p in steps)
        if not correct:
            tp, fn = tp + flagged, fn + (not flagged)
        else:
            fp, tn = fp + flagged, tn + (not flagged)
    return Crosstab(tp, fn, fp, tn, tuple(unknown))


def question_f1(preds: Iterable[StepPrediction], question_correctness: Mapping[str, bool | None]) -> float | None:
    """F1 over questions: positive = wrong answer, detected = at least one flagged step."""
    c = answer_gap_crosstab(preds, question_correctness)
    if c.total == 0:
        raise EmptyInput("no questions with known correctness")
    return _pct(f1_from_counts(c.tp, c.fp, c.fn))


def question_f1_fraction(crosstab: Crosstab) -> Fraction | None:
    return f1_from_counts(crosstab.tp, crosstab.fp, crosstab.fn)


def first_gap_distribution(preds: Iterable[StepPrediction], question_correctness: Mapping[str, bool | None]
                           ) -> dict[str, float]:
    """Among wrong-answer questions with a flag, the share whose earliest flagged step has each type."""
    counts: Counter[GapType] = Counter()
    for qid, steps in questions(preds).items():
        if question_correctness.get(qid) is not False:
            continue
        first = next((p for p in steps if p.predicted.is_gap), None)
        if first is not None:
            counts[first.predicted] += 1
    total = sum(counts.values())
    if not total:
        return {t.value: 0.0 for t in GAP_TYPES}
    return {t.value: counts[t] / total for t in GAP_TYPES}


# --------------------------------------------------------------------------
# agreement and health


def cohens_kappa(labels_a: Sequence[Hashable], labels_b: Sequence[Hashable]) -> float | None:
    """Cohen's kappa; ``None`` when chance agreement is 1 but observed agreement is not."""
    if len(labels_a) != len(labels_b):
        raise ValueError("label lists must be aligned")
    n = len(labels_a)
    if n == 0:
        raise EmptyInput("no labels")
    p_o = Fraction(sum(1 for a, b in zip(labels_a, labels_b) if a == b), n)
    ca, cb = Counter(labels_a), Counter(labels_b)
    p_e = sum((Fraction(ca[k], n) * Fraction(cb[k], n) for k in ca), Fraction(0))
    if p_e == 1:
        return 1.0 if p_o == 1 else None
    return float((p_o - p_e) / (1 - p_e))


@dataclass(frozen=True)
class CategoryHealth:
    distribution: dict[str, float]
    health_flag: bool
    in_healthy_band: bool
    warnings: tuple[str, ...] = ()


def category_distribution(preds: Iterable[StepPrediction]) -> dict[str, float]:
    ps = checked(preds)
    if not ps:
        raise EmptyInput("no checked predictions")
    counts = Counter(p.predicted for p in ps)
    return {t.value: counts[t] / len(ps) for t in ALL_LABELS}


def category_health(preds_or_distribution: Iterable[StepPrediction] | Mapping[str, float]) -> CategoryHealth:
    """Healthy unless IE exceeds the 70% degenerate floor; also checks the 38-41% band."""
    if isinstance(preds_or_distribution, Mapping):
        dist = {GapType.parse(k).value: float(v) for k, v in preds_or_distribution.items()}
        dist = {t.value: dist.get(t.value, 0.0) for t in ALL_LABELS}
    else:
        dist = category_distribution(preds_or_distribution)
    ie = dist[GapType.IE.value]
    gap_rate = sum(dist[t.value] for t in GAP_TYPES)
    notes = []
    if gap_rate < NEVER_FIRES_GAP_RATE:
        notes.append(f"never fires: gap rate {gap_rate:.1%} below {NEVER_FIRES_GAP_RATE:.0%}")
    if ie > DEGENERATE_IE_FLOOR:
        notes.append(f"degenerate: IE {ie:.1%} above the {DEGENERATE_IE_FLOOR:.0%} floor")
    collapsed = [t.value for t in (GapType.CC, GapType.MB) if dist[t.value] == 0.0]
    if gap_rate >= NEVER_FIRES_GAP_RATE and collapsed:
        notes.append(f"collapsed types: {', '.join(collapsed)} never emitted")
    lo, hi = HEALTHY_IE_BAND
    return CategoryHealth(dist, ie <= DEGENERATE_IE_FLOOR, lo <= round(ie, 3) <= hi, tuple(notes))


# --------------------------------------------------------------------------
# bootstrap


def percentile_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(np.asarray(values, dtype=float), [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def bootstrap_ci(units: Sequence[T], statistic: Callable[[list[T]], float | None], iters: int = 2000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap over ``units`` resampled with replacement.

    Each iteration draws ``rng.integers(0, n, size=n)`` from
    ``numpy.random.default_rng(seed)``; resamples whose statistic is
    undefined are dropped.
    """
    n = len(units)
    if n == 0:
        raise EmptyInput("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(iters):
        idx = rng.integers(0, n, size=n)
        value = statistic([units[i] for i in idx])
        if value is not None:
            values.append(value)
    if not values:
        raise EmptyInput("statistic undefined on every resample")
    return percentile_interval(values, level)


@dataclass(frozen=True)
class QuestionUnit:
    question_id: str
    correct: bool
    steps: tuple[StepPrediction, ...]


def question_units(preds: Iterable[StepPrediction], question_correctness: Mapping[str, bool | None]
                   ) -> list[QuestionUnit]:
    units = []
    for qid, steps in sorted(questions(preds).items()):
        correct = question_correctness.get(qid)
        if correct is not None:
            units.append(QuestionUnit(qid, bool(correct), tuple(steps)))
    return units


def qf1_of_units(units: Sequence[QuestionUnit]) -> float | None:
    tp = sum(1 for u in units if not u.correct and any(p.predicted.is_gap for p in u.steps))
    fn = sum(1 for u in units if not u.correct and not any(p.predicted.is_gap for p in u.steps))
    fp = sum(1 for u in units if u.correct and any(p.predicted.is_gap for p in u.steps))
    return _pct(f1_from_counts(tp, fp, fn))


def sf1_bootstrap(preds: Sequence[StepPrediction], iters: int = 2000, level: float = 0.95, seed: int = 0
                  ) -> tuple[float, float]:
    units = _labelled(preds)

    def stat(sample: list[StepPrediction]) -> float | None:
        return step_prf(sample)[2]

    return bootstrap_ci(units, stat, iters, level, seed)


def qf1_bootstrap(preds: Sequence[StepPrediction], question_correctness: Mapping[str, bool | None],
                  iters: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    return bootstrap_ci(question_units(preds, question_correctness), qf1_of_units, iters, level, seed)


# --------------------------------------------------------------------------
# Q-F1 trap


def qf1_trap_value(w: float | Fraction) -> float | Fraction:
    """Q-F1 of a checker that flags every step at wrong-answer rate ``w``: 2w/(1+w)."""
    if w <= 0 or w > 1:
        raise DomainError(f"wrong-answer rate must lie in (0, 1], got {w}")
    return 2 * w / (1 + w)


def qf1_trap_curve(w_values: Iterable[float | Fraction]) -> list[float | Fraction]:
    return [qf1_trap_value(w) for w in w_values]


@dataclass(frozen=True)
class TrapRow:
    target_w: float
    w: float
    n_questions: int
    empirical_qf1: float
    analytic_qf1: float
    analytic_at_target: float
    within_tolerance: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_w": self.target_w,
            "w": self.w,
            "n_questions": self.n_questions,
            "empirical_qf1": self.empirical_qf1,
            "analytic_qf1": self.analytic_qf1,
            "analytic_at_target": self.analytic_at_target,
            "within_tolerance": self.within_tolerance,
        }


def stratified_resample(question_correctness: Mapping[str, bool], w: float, size: int, rng: np.random.Generator
                        ) -> list[tuple[str, bool]]:
    """Draw ``size`` questions with replacement so that round(w * size) are wrong."""
    wrong = sorted(q for q, ok in question_correctness.items() if ok is False)
    right = sorted(q for q, ok in question_correctness.items() if ok is True)
    n_wrong = int(round(w * size))
    n_right = size - n_wrong
    if (n_wrong and not wrong) or (n_right and not right):
        raise InsufficientQuestions(
            f"stratum w={w} needs {n_wrong} wrong and {n_right} correct questions; "
            f"benchmark has {len(wrong)} wrong and {len(right)} correct"
        )
    picks = [(wrong[i], False) for i in rng.integers(0, len(wrong), size=n_wrong)] if n_wrong else []
    picks += [(right[i], True) for i in rng.integers(0, len(right), size=n_right)] if n_right else []
    return picks


def trap_experiment(preds_by_question: Mapping[str, Sequence[StepPrediction]],
                    question_correctness: Mapping[str, bool], w_strata: Sequence[float], seed: int = 0,
                    stratum_size: int = 200, tolerance: float = 0.02) -> list[TrapRow]:
    """Empirical vs analytic Q-F1 of flag-everything predictions on resampled strata.

    ``preds_by_question`` holds each question's step predictions from the
    flag-everything checker; every stratum is a stratified resample with
    replacement, and resampled copies of a question count separately.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for target in w_strata:
        if target <= 0 or target > 1:
            raise DomainError(f"wrong-answer rate must lie in (0, 1], got {target}")
        picks = stratified_resample(question_correctness, target, stratum_size, rng)
        units = [QuestionUnit(f"{qid}#{k}", ok, tuple(preds_by_question[qid])) for k, (qid, ok) in enumerate(picks)]
        empirical = qf1_of_units(units)
        n_wrong = sum(1 for _, ok in picks if not ok)
        w = Fraction(n_wrong, len(picks))
        analytic = qf1_trap_value(w) if n_wrong else Fraction(0)
        emp = (empirical or 0.0) / 100
        rows.append(
            TrapRow(
                target_w=float(target),
                w=float(w),
                n_questions=len(picks),
                empirical_qf1=emp,
                analytic_qf1=float(analytic),
                analytic_at_target=float(qf1_trap_value(target)),
                within_tolerance=abs(emp - float(qf1_trap_value(target))) <= tolerance,
            )
        )
    return rows


# --------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    sP: float | None
    sR: float | None
    sF1: float | None
    sF1_ci: tuple[float, float] | None
    qF1: float | None
    qF1_ci: tuple[float, float] | None
    balanced_accuracy: float | None
    typed_f1: dict[str, float | None]
    category_distribution: dict[str, float]
    health_flag: bool
    in_healthy_band: bool
    health_warnings: list[str]
    first_gap_distribution: dict[str, float]
    crosstab: dict[str, int]
    n_steps: int
    n_questions: int
    unchecked: int
    unknown_correctness: list[str] = field(default_factory=list)
    kappa: float | None = None

    def to_record(self) -> dict[str, Any]:
        rec = dict(self.__dict__)
        rec["sF1_ci"] = list(self.sF1_ci) if self.sF1_ci else None
        rec["qF1_ci"] = list(self.qF1_ci) if self.qF1_ci else None
        return rec


def build_report(preds: Sequence[StepPrediction], question_correctness: Mapping[str, bool | None],
                 iters: int = 2000, seed: int = 0, kappa_labels: tuple[Sequence[Any], Sequence[Any]] | None = None
                 ) -> MetricsReport:
    """Every metric at once; step scores need gold labels on the predictions."""
    has_gold = any(p.gold is not None for p in checked(preds))
    sp = sr = sf = ba = None
    sf_ci = None
    typed: dict[str, float | None] = {}
    if has_gold:
        sp, sr, sf = step_prf(preds)
        ba = balanced_accuracy(preds)
        typed = typed_f1(preds)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sf_ci = sf1_bootstrap(preds, iters=iters, seed=seed) if sf is not None else None
    ct = answer_gap_crosstab(preds, question_correctness)
    qf = _pct(question_f1_fraction(ct)) if ct.total else None
    qf_ci = qf1_bootstrap(preds, question_correctness, iters=iters, seed=seed) if qf is not None else None
    health = category_health(preds)
    kappa = cohens_kappa(*kappa_labels) if kappa_labels is not None else None
    return MetricsReport(
        sP=sp,
        sR=sr,
        sF1=sf,
        sF1_ci=sf_ci,
        qF1=qf,
        qF1_ci=qf_ci,
        balanced_accuracy=ba,
        typed_f1=typed,
        category_distribution=health.distribution,
        health_flag=health.health_flag,
        in_healthy_band=health.in_healthy_band,
        health_warnings=list(health.warnings),
        first_gap_distribution=first_gap_distribution(preds, question_correctness),
        crosstab=ct.to_dict(),
        n_steps=len(checked(preds)),
        n_questions=len(questions(preds)),
        unchecked=sum(1 for p in preds if p.unchecked),
        unknown_correctness=list(ct.unknown),
        kappa=kappa,
    )
