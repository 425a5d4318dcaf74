"""Evaluation calculus and reference uncertainty metrics.

Scores one task attempt as: success rate from the two completion booleans,
normalized performance/uncertainty values (loss-style values mapped through
``0.1 / (0.1 + s)``), their equal-weight mean (NPS), and the comprehensive
score ``CS = 0.5*SR + 0.5*NPS``. Also provides ECE, Brier, NLL and interval
coverage deviation for validating generated-model outputs, plus a loader
for the benchmark fixture tables shipped under ``fixtures/benchmark``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import DomainError, EmptyInput, MixedNominal


class MetricKind(str, Enum):
    ACCURACY_LIKE = "accuracy"
    LOSS_LIKE = "loss"


@dataclass(frozen=True)
class TaskOutcome:
    """What one method achieved on one task."""

    model_ok: bool
    uncertainty_ok: bool
    perf_value: Optional[float] = None
    perf_kind: MetricKind = MetricKind.ACCURACY_LIKE
    unc_value: Optional[float] = None
    unc_kind: MetricKind = MetricKind.LOSS_LIKE

    def __post_init__(self) -> None:
        if self.perf_value is not None and not self.model_ok:
            raise ValueError("perf_value present implies model_ok")
        if self.unc_value is not None and not self.uncertainty_ok:
            raise ValueError("unc_value present implies uncertainty_ok")


@dataclass(frozen=True)
class ScoreCard:
    sr: float
    perf_norm: float
    unc_norm: float
    nps: float
    cs: float


def normalize(value: float, kind: MetricKind) -> float:
    """Map a raw metric to [0, 1]; loss-style values via 0.1 / (0.1 + s)."""
    if kind is MetricKind.ACCURACY_LIKE:
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"accuracy-like value outside [0, 1]: {value!r}")
        return value
    if value < 0.0:
        raise DomainError(f"loss-like value must be non-negative: {value!r}")
    return 0.1 / (0.1 + value)


def success_rate(model_ok: bool, uncertainty_ok: bool) -> float:
    """1.0 for both completed, 0.5 for exactly one, 0.0 for neither."""
    return 0.5 * bool(model_ok) + 0.5 * bool(uncertainty_ok)


def score(outcome: TaskOutcome) -> ScoreCard:
    """Full score card for one task; failed components contribute 0."""
    perf_norm = 0.0 if outcome.perf_value is None else normalize(outcome.perf_value, outcome.perf_kind)
    unc_norm = 0.0 if outcome.unc_value is None else normalize(outcome.unc_value, outcome.unc_kind)
    sr = success_rate(outcome.model_ok, outcome.uncertainty_ok)
    nps = 0.5 * perf_norm + 0.5 * unc_norm
    cs = 0.5 * sr + 0.5 * nps
    return ScoreCard(sr=sr, perf_norm=perf_norm, unc_norm=unc_norm, nps=nps, cs=cs)


@dataclass(frozen=True)
class AggregateScores:
    avg_sr: float
    avg_nps: float
    avg_cs: float
    avg_perf: float
    avg_unc: float


def aggregate(cards: Sequence[ScoreCard]) -> AggregateScores:
    """Unweighted arithmetic means over tasks.

    Uses exact summation, so the result is independent of task order.
    """
    if not cards:
        raise EmptyInput("cannot aggregate zero score cards")
    n = len(cards)
    return AggregateScores(
        avg_sr=math.fsum(card.sr for card in cards) / n,
        avg_nps=math.fsum(card.nps for card in cards) / n,
        avg_cs=math.fsum(card.cs for card in cards) / n,
        avg_perf=math.fsum(card.perf_norm for card in cards) / n,
        avg_unc=math.fsum(card.unc_norm for card in cards) / n,
    )


# --- uncertainty metrics --------------------------------------------------------


@dataclass(frozen=True)
class ProbPrediction:
    """One class-probability vector plus the true class index."""

    probs: tuple[float, ...]
    true_class: int

    def __post_init__(self) -> None:
        if not self.probs:
            raise DomainError("probability vector must be non-empty")
        if any(p < 0.0 or p > 1.0 for p in self.probs):
            raise DomainError("probabilities must lie in [0, 1]")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise DomainError(f"probabilities must sum to 1, got {sum(self.probs)!r}")
        if not 0 <= self.true_class < len(self.probs):
            raise DomainError("true_class index out of range")


@dataclass(frozen=True)
class IntervalPrediction:
    """One prediction interval with its target and nominal coverage level."""

    lower: float
    upper: float
    target: float
    nominal_level: float = 0.95

    def __post_init__(self) -> None:
        if self.lower > self.upper:
            raise DomainError("interval lower bound exceeds upper bound")
        if not 0.0 < self.nominal_level < 1.0:
            raise DomainError("nominal_level must lie in (0, 1)")


def ece(preds: Sequence[ProbPrediction], n_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins.

    Confidence is the max probability; bin b covers [b/B, (b+1)/B) with the
    last bin closed at 1. Argmax ties resolve to the lowest class index.
    """
    if not preds:
        raise EmptyInput("ece over empty predictions")
    if n_bins < 1:
        raise DomainError("n_bins must be >= 1")
    bin_correct = [0] * n_bins
    bin_conf = [0.0] * n_bins
    bin_count = [0] * n_bins
    for pred in preds:
        conf = max(pred.probs)
        winner = pred.probs.index(conf)
        index = min(int(conf * n_bins), n_bins - 1)
        bin_count[index] += 1
        bin_conf[index] += conf
        bin_correct[index] += int(winner == pred.true_class)
    total = len(preds)
    value = 0.0
    for b in range(n_bins):
        if bin_count[b] == 0:
            continue
        acc = bin_correct[b] / bin_count[b]
        conf = bin_conf[b] / bin_count[b]
        value += (bin_count[b] / total) * abs(acc - conf)
    return value


def brier(preds: Sequence[ProbPrediction]) -> float:
    """Multiclass Brier score: mean over samples of the full squared
    distance to the one-hot truth (no halving, no class averaging)."""
    if not preds:
        raise EmptyInput("brier over empty predictions")
    total = 0.0
    for pred in preds:
        for k, p in enumerate(pred.probs):
            y = 1.0 if k == pred.true_class else 0.0
            total += (p - y) ** 2
    return total / len(preds)


def nll(preds: Sequence[ProbPrediction], floor: float = 1e-12) -> float:
    """Mean negative log likelihood of the true class, probability floored."""
    if not preds:
        raise EmptyInput("nll over empty predictions")
    if floor <= 0.0:
        raise DomainError("floor must be positive")
    return sum(-math.log(max(p.probs[p.true_class], floor)) for p in preds) / len(preds)


def delta_pcip(preds: Sequence[IntervalPrediction]) -> float:
    """Absolute gap between empirical interval coverage and the nominal level."""
    if not preds:
        raise EmptyInput("delta_pcip over empty predictions")
    nominal = preds[0].nominal_level
    if any(p.nominal_level != nominal for p in preds):
        raise MixedNominal("interval predictions carry mixed nominal levels")
    covered = sum(1 for p in preds if p.lower <= p.target <= p.upper)
    return abs(covered / len(preds) - nominal)


# --- benchmark fixture tables ------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkTable:
    """One raw-value fixture table: method rows x task columns."""

    tasks: tuple[str, ...]
    kinds: Mapping[str, MetricKind]
    values: Mapping[str, Mapping[str, Optional[float]]]

    def methods(self) -> tuple[str, ...]:
        return tuple(self.values)


_MISSING_CELLS = {"FAIL", "N/A", "NA", "-"}


def load_benchmark_table(path: str | Path) -> BenchmarkTable:
    """Parse a tab-separated fixture table.

    Layout: comment lines start with ``#``; a ``task`` header row names the
    columns; an optional ``kind`` row marks each column accuracy/loss
    (defaulting to accuracy); remaining rows are per-method raw values with
    FAIL/N/A for tasks the method never completed.
    """
    tasks: tuple[str, ...] = ()
    kinds: dict[str, MetricKind] = {}
    values: dict[str, dict[str, Optional[float]]] = {}
    for raw_line in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw_line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cells = [cell.strip() for cell in line.split("\t")]
        head, rest = cells[0], cells[1:]
        if head == "task":
            tasks = tuple(rest)
            continue
        if head == "kind":
            kinds = {task: MetricKind(cell) for task, cell in zip(tasks, rest)}
            continue
        if not tasks:
            raise ValueError(f"{path}: data row before the task header")
        row: dict[str, Optional[float]] = {}
        for task, cell in zip(tasks, rest):
            row[task] = None if cell.upper() in _MISSING_CELLS else float(cell)
        values[head] = row
    if not tasks:
        raise ValueError(f"{path}: no task header found")
    if not kinds:
        kinds = {task: MetricKind.ACCURACY_LIKE for task in tasks}
    return BenchmarkTable(tasks=tasks, kinds=kinds, values=values)


@dataclass(frozen=True)
class BenchmarkFixtures:
    performance: BenchmarkTable
    uncertainty: BenchmarkTable
    model_ok: BenchmarkTable
    uncertainty_ok: BenchmarkTable


def load_benchmark_fixtures(directory: str | Path) -> BenchmarkFixtures:
    directory = Path(directory)
    return BenchmarkFixtures(
        performance=load_benchmark_table(directory / "performance_raw.tsv"),
        uncertainty=load_benchmark_table(directory / "uncertainty_raw.tsv"),
        model_ok=load_benchmark_table(directory / "success_model.tsv"),
        uncertainty_ok=load_benchmark_table(directory / "success_uncertainty.tsv"),
    )


def outcomes_from_fixtures(fixtures: BenchmarkFixtures) -> dict[str, dict[str, TaskOutcome]]:
    """Assemble per-method, per-task outcomes from the four fixture tables."""
    result: dict[str, dict[str, TaskOutcome]] = {}
    for method in fixtures.performance.methods():
        row: dict[str, TaskOutcome] = {}
        for task in fixtures.performance.tasks:
            row[task] = TaskOutcome(
                model_ok=bool(fixtures.model_ok.values[method][task]),
                uncertainty_ok=bool(fixtures.uncertainty_ok.values[method][task]),
                perf_value=fixtures.performance.values[method][task],
                perf_kind=fixtures.performance.kinds[task],
                unc_value=fixtures.uncertainty.values[method][task],
                unc_kind=fixtures.uncertainty.kinds[task],
            )
        result[method] = row
    return result


def score_fixtures(fixtures: BenchmarkFixtures) -> dict[str, dict[str, ScoreCard]]:
    return {
        method: {task: score(outcome) for task, outcome in row.items()}
        for method, row in outcomes_from_fixtures(fixtures).items()
    }
