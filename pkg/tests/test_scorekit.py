from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURES, TEST_DATA
from looplab.errors import DomainError, EmptyInput, MixedNominal
from looplab.scorekit import (
    AggregateScores,
    IntervalPrediction,
    MetricKind,
    ProbPrediction,
    TaskOutcome,
    aggregate,
    brier,
    delta_pcip,
    ece,
    load_benchmark_fixtures,
    nll,
    normalize,
    score,
    score_fixtures,
    success_rate,
)

# -- independent naive oracles (deliberately different code paths) ---------------------


def oracle_ece(preds, n_bins=10):
    """Brute force: iterate bins, select members by explicit comparisons."""
    n = len(preds)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = []
        for p in preds:
            conf = max(p.probs)
            inside = (lo <= conf < hi) or (b == n_bins - 1 and conf == 1.0)
            if inside:
                members.append(p)
        if not members:
            continue
        acc = sum(
            1 for p in members if p.probs.index(max(p.probs)) == p.true_class
        ) / len(members)
        conf_mean = sum(max(p.probs) for p in members) / len(members)
        total += len(members) / n * abs(acc - conf_mean)
    return total


def oracle_brier(preds):
    total = 0.0
    for p in preds:
        one_hot = [0.0] * len(p.probs)
        one_hot[p.true_class] = 1.0
        total += sum((a - b) ** 2 for a, b in zip(p.probs, one_hot))
    return total / len(preds)


def oracle_nll(preds, floor=1e-12):
    values = []
    for p in preds:
        prob = p.probs[p.true_class]
        if prob < floor:
            prob = floor
        values.append(-math.log(prob))
    return sum(values) / len(values)


def oracle_delta_pcip(preds):
    hits = 0
    for p in preds:
        if p.lower <= p.target and p.target <= p.upper:
            hits += 1
    return abs(hits / len(preds) - preds[0].nominal_level)


def random_prob_predictions(rng, n, max_classes=6):
    preds = []
    for _ in range(n):
        k = rng.randint(2, max_classes)
        raw = [rng.random() for _ in range(k)]
        total = sum(raw)
        probs = [value / total for value in raw]
        probs[-1] = 1.0 - sum(probs[:-1])
        preds.append(ProbPrediction(tuple(probs), rng.randrange(k)))
    return preds


def random_interval_predictions(rng, n, nominal=0.95):
    preds = []
    for _ in range(n):
        lo = rng.uniform(-5, 5)
        hi = lo + rng.uniform(0, 4)
        preds.append(IntervalPrediction(lo, hi, rng.uniform(-6, 6), nominal))
    return preds


# -- normalization ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "value,expected",
    [(0.168, 0.373), (0.063, 0.613), (0.036, 0.735), (0.003, 0.971)],
)
def test_normalize_loss_anchors(value, expected):
    assert normalize(value, MetricKind.LOSS_LIKE) == pytest.approx(expected, abs=5e-4)


def test_normalize_perfect_loss_and_half_point():
    assert normalize(0.0, MetricKind.LOSS_LIKE) == 1.0
    assert normalize(0.1, MetricKind.LOSS_LIKE) == 0.5


def test_normalize_accuracy_passthrough_and_domain():
    assert normalize(0.793, MetricKind.ACCURACY_LIKE) == 0.793
    with pytest.raises(DomainError):
        normalize(1.2, MetricKind.ACCURACY_LIKE)
    with pytest.raises(DomainError):
        normalize(-0.01, MetricKind.LOSS_LIKE)


@given(st.floats(0, 100, allow_nan=False), st.floats(0.001, 10, allow_nan=False))
def test_normalize_loss_strictly_decreasing_in_range(value, delta):
    a = normalize(value, MetricKind.LOSS_LIKE)
    b = normalize(value + delta, MetricKind.LOSS_LIKE)
    assert 0.0 < b < a <= 1.0


# -- success rate and scoring ------------------------------------------------------------


def test_success_rate_values():
    assert success_rate(True, True) == 1.0
    assert success_rate(True, False) == 0.5
    assert success_rate(False, True) == 0.5
    assert success_rate(False, False) == 0.0


def test_score_reference_row():
    outcome = TaskOutcome(
        model_ok=True,
        uncertainty_ok=True,
        perf_value=0.793,
        perf_kind=MetricKind.ACCURACY_LIKE,
        unc_value=0.036,
        unc_kind=MetricKind.LOSS_LIKE,
    )
    card = score(outcome)
    assert card.perf_norm == pytest.approx(0.793)
    assert card.unc_norm == pytest.approx(0.735, abs=5e-4)
    assert card.nps == pytest.approx(0.764, abs=5e-4)
    assert card.cs == pytest.approx(0.882, abs=5e-4)


def test_score_full_failure_all_zero():
    card = score(TaskOutcome(model_ok=False, uncertainty_ok=False))
    assert (card.sr, card.perf_norm, card.unc_norm, card.nps, card.cs) == (0, 0, 0, 0, 0)


def test_score_half_success():
    outcome = TaskOutcome(
        model_ok=True, uncertainty_ok=False, perf_value=0.9, perf_kind=MetricKind.ACCURACY_LIKE
    )
    card = score(outcome)
    assert card.sr == 0.5
    assert card.nps == pytest.approx(0.45)
    assert card.cs == pytest.approx(0.475)


def test_outcome_invariants():
    with pytest.raises(ValueError):
        TaskOutcome(model_ok=False, uncertainty_ok=False, perf_value=0.5)


def test_aggregate_single_and_empty():
    card = score(TaskOutcome(True, True, 0.5, MetricKind.ACCURACY_LIKE, 0.1))
    agg = aggregate([card])
    assert agg == AggregateScores(card.sr, card.nps, card.cs, card.perf_norm, card.unc_norm)
    with pytest.raises(EmptyInput):
        aggregate([])


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=8))
def test_aggregate_permutation_invariant(values):
    cards = [
        score(TaskOutcome(True, True, v, MetricKind.ACCURACY_LIKE, v, MetricKind.LOSS_LIKE))
        for v in values
    ]
    rng = random.Random(0)
    shuffled = cards[:]
    rng.shuffle(shuffled)
    assert aggregate(cards) == aggregate(shuffled)


# -- uncertainty metrics ----------------------------------------------------------------


def test_ece_trivial_cases():
    perfect = [ProbPrediction((1.0, 0.0), 0)] * 4
    assert ece(perfect) == 0.0
    lone = [ProbPrediction((0.7, 0.3), 1)]
    assert ece(lone) == pytest.approx(0.7)


def test_brier_trivial_cases():
    assert brier([ProbPrediction((0.8, 0.2), 0)]) == pytest.approx(0.08)
    assert brier([ProbPrediction((0.0, 1.0), 1)]) == 0.0


def test_nll_trivial_cases():
    assert nll([ProbPrediction((1.0, 0.0), 0)]) == 0.0
    e_inv = math.exp(-1)
    assert nll([ProbPrediction((e_inv, 1 - e_inv), 0)]) == pytest.approx(1.0)


def test_delta_pcip_cases():
    covered = [IntervalPrediction(0, 1, 0.5, 0.95)] * 10
    assert delta_pcip(covered) == pytest.approx(0.05)
    exact = [IntervalPrediction(0, 1, 0.5, 0.95)] * 19 + [IntervalPrediction(0, 1, 2.0, 0.95)]
    assert delta_pcip(exact) == pytest.approx(0.0)
    with pytest.raises(MixedNominal):
        delta_pcip([IntervalPrediction(0, 1, 0.5, 0.9), IntervalPrediction(0, 1, 0.5, 0.95)])


def test_metric_empty_inputs():
    for fn in (ece, brier, nll, delta_pcip):
        with pytest.raises(EmptyInput):
            fn([])


def test_prob_prediction_validation():
    with pytest.raises(DomainError):
        ProbPrediction((0.5, 0.6), 0)
    with pytest.raises(DomainError):
        ProbPrediction((0.5, 0.5), 2)
    with pytest.raises(DomainError):
        IntervalPrediction(1.0, 0.0, 0.5)


def test_metrics_match_oracles_random_sample():
    rng = random.Random(7)
    for _ in range(50):
        preds = random_prob_predictions(rng, rng.randint(1, 50))
        assert ece(preds) == pytest.approx(oracle_ece(preds), abs=1e-12)
        assert brier(preds) == pytest.approx(oracle_brier(preds), abs=1e-12)
        assert nll(preds) == pytest.approx(oracle_nll(preds), abs=1e-12)
        intervals = random_interval_predictions(rng, rng.randint(1, 50))
        assert delta_pcip(intervals) == pytest.approx(oracle_delta_pcip(intervals), abs=1e-12)


@given(st.integers(0, 10**9), st.integers(1, 50))
@settings(max_examples=60)
def test_metric_ranges(seed, n):
    rng = random.Random(seed)
    preds = random_prob_predictions(rng, n)
    assert 0.0 <= ece(preds) <= 1.0
    assert 0.0 <= brier(preds) <= 2.0
    intervals = random_interval_predictions(rng, n, nominal=0.95)
    assert 0.0 <= delta_pcip(intervals) <= max(0.95, 1 - 0.95)


# -- benchmark fixture reproduction -------------------------------------------------------


def load_expected(name):
    rows: dict[str, dict[str, float]] = {}
    tasks: list[str] = []
    for line in (TEST_DATA / name).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        cells = line.split("\t")
        if cells[0] == "task":
            tasks = cells[1:]
            continue
        rows[cells[0]] = {t: float(c) for t, c in zip(tasks, cells[1:])}
    return rows


_AVG_ATTR = {
    "sr": "avg_sr",
    "perf_norm": "avg_perf",
    "unc_norm": "avg_unc",
    "nps": "avg_nps",
    "cs": "avg_cs",
}


@pytest.fixture(scope="module")
def benchmark_cards():
    fixtures = load_benchmark_fixtures(FIXTURES / "benchmark")
    return score_fixtures(fixtures)


@pytest.mark.parametrize(
    "expected_file,attr",
    [
        ("expected_perf_norm.tsv", "perf_norm"),
        ("expected_unc_norm.tsv", "unc_norm"),
        ("expected_nps.tsv", "nps"),
        ("expected_cs.tsv", "cs"),
    ],
)
def test_benchmark_tables_within_tolerance(benchmark_cards, expected_file, attr):
    expected = load_expected(expected_file)
    for method, row in expected.items():
        agg = aggregate(list(benchmark_cards[method].values()))
        for task, value in row.items():
            got = getattr(agg, _AVG_ATTR[attr]) if task == "AVG" else getattr(
                benchmark_cards[method][task], attr
            )
            assert got == pytest.approx(value, abs=0.005), (method, task)


def test_benchmark_sr_exact(benchmark_cards):
    expected = load_expected("expected_sr.tsv")
    for method, row in expected.items():
        for task, value in row.items():
            if task == "AVG":
                got = aggregate(list(benchmark_cards[method].values())).avg_sr
                assert round(got, 3) == value, method
            else:
                assert benchmark_cards[method][task].sr == value, (method, task)


def test_benchmark_headline_averages(benchmark_cards):
    agg = {m: aggregate(list(row.values())) for m, row in benchmark_cards.items()}
    assert agg["autohealth"].avg_nps == pytest.approx(0.680, abs=0.005)
    assert agg["autohealth"].avg_cs == pytest.approx(0.840, abs=0.005)
    assert agg["claude_code"].avg_nps == pytest.approx(0.493, abs=0.005)
    assert agg["claude_code"].avg_cs == pytest.approx(0.747, abs=0.005)
