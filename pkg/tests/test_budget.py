import pytest
from hypothesis import given
from hypothesis import strategies as st

from polyem.budget import (
    LABEL_KINDS,
    Allocation,
    AnnotationPolicy,
    PolicyKind,
    cost_table,
    estimate_cost,
    plan,
)
from polyem.weak_labels import AnnotationCost

B = 43_200.0
ROUND = AnnotationCost(polygon=61.0)


def test_strong_policy_with_rounded_polygon_cost():
    assert plan(AnnotationPolicy("strong"), B, ROUND).polygon == 708


def test_strong_policy_with_default_costs():
    assert abs(plan(AnnotationPolicy("strong"), B).polygon - 710) <= 3


def test_equal_time_policy():
    a = plan(AnnotationPolicy("equal_time"), B, strong_base=560)
    assert a.polygon == 560
    for got, want in zip((a.tight, a.loose, a.coarse, a.tag), (58, 81, 152, 1143)):
        assert abs(got - want) <= 3


def test_equal_number_policy():
    a = plan(AnnotationPolicy("EqualNumber"), B, strong_base=560)
    assert a.polygon == 560
    assert a.tight == a.loose == a.coarse == a.tag == 108


def test_mixed_fraction_policy():
    a = plan(AnnotationPolicy("mixed_fraction", 0.8, "coarse"), B, ROUND)
    assert a.polygon == int(0.8 * B // 61)
    assert a.coarse == int(0.2 * B // 15)
    assert a.tight == a.loose == a.tag == 0


def test_cost_examples():
    assert estimate_cost(Allocation()) == 0.0
    assert estimate_cost(Allocation(1, 1, 1, 1, 1), ROUND) == 145.0


def test_tiny_budget_is_flagged():
    a = plan(AnnotationPolicy("strong"), 10.0)
    assert a.polygon == 0 and a.warnings


def test_base_larger_than_budget_buys_no_weak_labels():
    a = plan(AnnotationPolicy("equal_time"), 600.0, ROUND, strong_base=560)
    assert a.polygon == 9 and a.tag == 0 and a.warnings


def test_invalid_inputs():
    with pytest.raises(ValueError):
        plan(AnnotationPolicy("strong"), 0.0)
    with pytest.raises(ValueError):
        AnnotationPolicy("mixed_fraction", 1.0, "tag")
    with pytest.raises(ValueError):
        AnnotationPolicy("cheapest")
    with pytest.raises(ValueError):
        Allocation(polygon=-1)


policies = st.sampled_from(
    [
        AnnotationPolicy(PolicyKind.STRONG),
        AnnotationPolicy(PolicyKind.EQUAL_TIME),
        AnnotationPolicy(PolicyKind.EQUAL_NUMBER),
        AnnotationPolicy(PolicyKind.MIXED_FRACTION, 0.8, "tight"),
        AnnotationPolicy(PolicyKind.MIXED_FRACTION, 0.3, "tag"),
    ]
)
cost_tables = st.builds(
    AnnotationCost,
    polygon=st.floats(20, 120),
    tight=st.floats(5, 60),
    loose=st.floats(5, 60),
    coarse=st.floats(1, 30),
    tag=st.floats(0.5, 5),
)


@given(policies, st.floats(1, 1e6), cost_tables, st.integers(0, 2000))
def test_plan_never_exceeds_budget(policy, budget, costs, base):
    a = plan(policy, budget, costs, base)
    assert estimate_cost(a, costs) <= budget + 1e-6
    assert a.total_cost == estimate_cost(a, costs)
    assert all(v >= 0 for v in a.counts().values())


@given(policies, st.floats(1, 1e5), st.floats(0, 1e5), cost_tables, st.integers(0, 1000))
def test_counts_are_monotone_in_budget(policy, budget, extra, costs, base):
    small = plan(policy, budget, costs, base)
    large = plan(policy, budget + extra, costs, base)
    for k in LABEL_KINDS:
        assert getattr(large, k) >= getattr(small, k)


def test_cost_table_layout():
    rows = [(p, plan(AnnotationPolicy(p), B, strong_base=560)) for p in ("strong", "equal_time")]
    lines = cost_table(rows).splitlines()
    assert lines[0].split(",")[:6] == ["policy", *LABEL_KINDS]
    assert lines[2].endswith("+".join(str(v) for v in rows[1][1].counts().values()))
