import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapprobe.baee import BaeeOutcome
from gapprobe.commitment import PscTrajectory
from gapprobe.core import CheckpointGrid, ContractViolation, DEFAULT_GRID
from gapprobe.fpfilter import (
    EARLY_EXIT,
    FULL_COT_FALLBACK,
    TrajectoryFeatures,
    audit_row,
    extract_features,
    feature_summary,
    filter_early_agreement,
    filter_monotonicity,
    filter_rates,
    filter_variance_nonmonotone,
    fixture_population,
    two_stage_protocol,
)

GRID4 = CheckpointGrid((0.1, 0.2, 0.3, 0.4))


def feats(first=0.5, drops=0, variance=0.0, **kw) -> TrajectoryFeatures:
    base = dict(
        problem_id="p", psc_at_first=first, mean_psc=0.5, max_psc=0.5, spread=0.0,
        num_drops=drops, argmax_fraction=0.1, cot_length=100, late_peak=False, variance=variance,
    )
    base.update(kw)
    return TrajectoryFeatures(**base)


def outcome(triggered: bool) -> BaeeOutcome:
    return BaeeOutcome(
        problem_id="p", strategy="baee", triggered=triggered,
        trigger_fraction=0.3 if triggered else None, answer="1", correct=True,
        api_calls=3, serial_tokens_used=30, serial_tokens_full=100,
    )


def test_extract_worked_example():
    f = extract_features(PscTrajectory("p", GRID4, (0.9, 0.7, 0.8, 0.6)), 500)
    assert f.num_drops == 2
    assert f.spread == pytest.approx(0.3)
    assert f.max_psc == 0.9 and f.argmax_fraction == 0.1
    assert f.psc_at_first == 0.9 and f.cot_length == 500
    assert not f.late_peak
    # population variance oracle
    v = [0.9, 0.7, 0.8, 0.6]
    mu = sum(v) / 4
    assert f.variance == pytest.approx(sum((x - mu) ** 2 for x in v) / 4)


def test_constant_trajectory():
    f = extract_features(PscTrajectory("p", DEFAULT_GRID, (0.5,) * 9), 10)
    assert (f.num_drops, f.spread, f.variance) == (0, 0.0, 0.0)


def test_fp_archetype_late_peak():
    vals = (0.2, 0.5, 0.3, 0.9, 0.4, 0.8, 0.9, 0.3, 0.1)
    f = extract_features(PscTrajectory("p", DEFAULT_GRID, vals), 10)
    assert f.argmax_fraction == 0.4  # earliest of the two 0.9 peaks
    assert not f.late_peak
    vals = (0.2, 0.5, 0.3, 0.4, 0.4, 0.8, 0.9, 0.3, 0.1)
    f = extract_features(PscTrajectory("p", DEFAULT_GRID, vals), 10)
    assert f.argmax_fraction == 0.7 and f.late_peak
    assert f.num_drops == 3


def test_late_peak_boundary_inclusive():
    vals = (0.0,) * 4 + (1.0,) + (0.0,) * 4
    assert extract_features(PscTrajectory("p", DEFAULT_GRID, vals), 1).late_peak


@pytest.mark.parametrize("first,ok", [(0.33, False), (0.85, True), (0.50, True), (0.49, False)])
def test_filter_early_agreement(first, ok):
    assert filter_early_agreement(feats(first=first)) is ok


@pytest.mark.parametrize("drops,ok", [(1, True), (3, False), (2, True)])
def test_filter_monotonicity(drops, ok):
    assert filter_monotonicity(feats(drops=drops)) is ok


@pytest.mark.parametrize(
    "var,drops,flag", [(0.10, 4, True), (0.10, 2, False), (0.05, 5, False), (0.06, 3, False)]
)
def test_filter_variance(var, drops, flag):
    assert filter_variance_nonmonotone(feats(drops=drops, variance=var)) is flag


def test_two_stage_protocol():
    assert two_stage_protocol(outcome(True), feats(drops=4, variance=0.1)) == FULL_COT_FALLBACK
    assert two_stage_protocol(outcome(True), feats()) == EARLY_EXIT
    with pytest.raises(ContractViolation):
        two_stage_protocol(outcome(False), feats(drops=4, variance=0.1))


def test_audit_row_leaves_untriggered_alone():
    row = audit_row(outcome(False), feats(drops=4, variance=0.1))
    assert row[-1] == "not_triggered" and row[3] == "flagged"


def test_empty_trajectory_rejected():
    with pytest.raises(ContractViolation):
        PscTrajectory("p", GRID4, ())


eighths = st.integers(0, 8).map(lambda k: k / 8)


@settings(max_examples=200, deadline=None)
@given(st.lists(eighths, min_size=9, max_size=9))
def test_feature_invariants(vals):
    f = extract_features(PscTrajectory("p", DEFAULT_GRID, tuple(vals)), 7)
    assert 0.0 <= f.spread <= 1.0
    assert 0 <= f.num_drops <= len(vals) - 1
    assert f.variance >= 0.0
    assert f.variance == pytest.approx(float(np.var(vals)), abs=1e-12)
    assert f.max_psc == max(vals)
    assert f.argmax_fraction == DEFAULT_GRID.fractions[vals.index(max(vals))]
    # deterministic
    assert extract_features(PscTrajectory("p", DEFAULT_GRID, tuple(vals)), 7) == f


def test_order_sensitivity():
    a = extract_features(PscTrajectory("p", GRID4, (0.1, 0.2, 0.3, 0.4)), 1)
    b = extract_features(PscTrajectory("p", GRID4, (0.4, 0.3, 0.2, 0.1)), 1)
    assert a.num_drops == 0 and b.num_drops == 3
    assert a.variance == b.variance


@pytest.fixture(scope="module")
def population():
    return fixture_population(1000, 60, 0)


def test_fixture_population_rates(population):
    tp, fp = population
    rates = {r.name: r for r in filter_rates(tp, fp)}
    f1, f3 = rates["early_agreement"], rates["variance_nonmonotone"]
    assert f1.fp_removed > f1.tp_removed
    assert f1.fp_removed >= 0.60 and f1.tp_retained >= 0.85
    assert f3.fp_removed >= 4 * f3.tp_removed
    assert f3.fp_removed >= 5 * f3.tp_removed


def test_fixture_population_profile_means(population):
    tp, fp = population
    rows = {name: (t, f) for name, t, f in feature_summary(tp, fp)}
    # class means point in the documented directions
    assert rows["psc_at_first"][0] > rows["psc_at_first"][1]
    assert rows["num_drops"][0] < rows["num_drops"][1]
    assert rows["spread"][0] < rows["spread"][1]
    assert rows["cot_length"][0] < rows["cot_length"][1]
    assert rows["late_peak"][0] < rows["late_peak"][1]


def test_fixture_population_deterministic():
    assert fixture_population(50, 10, 3) == fixture_population(50, 10, 3)
    assert fixture_population(50, 10, 3) != fixture_population(50, 10, 4)


def test_filter_rates_need_both_classes():
    with pytest.raises(ContractViolation):
        filter_rates([feats()], [])


def test_summary_empty_class_is_none():
    rows = feature_summary([feats()], [])
    assert all(f is None for _, _, f in rows)
    assert not any(isinstance(t, float) and math.isnan(t) for _, t, _ in rows)
