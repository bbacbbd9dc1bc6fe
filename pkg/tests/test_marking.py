from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ksafem.errors import InvalidInputError
from ksafem.marking import mark, mark_dorfler, mark_maximum


def brute_force_min_cardinality(eta2, theta):
    # exact rational arithmetic, so subnormal inputs cannot underflow the target
    vals = [Fraction(float(v)) for v in eta2]
    target = Fraction(float(theta)) * sum(vals)
    for k in range(1, len(eta2) + 1):
        for sub in itertools.combinations(range(len(eta2)), k):
            if sum(vals[i] for i in sub) >= target:
                return k
    return len(eta2)


def test_dorfler_example():
    m = mark_dorfler(np.array([4.0, 3.0, 2.0, 1.0]), 0.5)
    assert m.indices.tolist() == [0, 1]
    assert brute_force_min_cardinality([4, 3, 2, 1], 0.5) == 2
    assert m.fraction == pytest.approx(0.7)


def test_dorfler_tie_break_lower_index():
    m = mark_dorfler(np.array([5.0, 5.0]), 0.5)
    assert m.indices.tolist() == [0]
    assert brute_force_min_cardinality([5, 5], 0.5) == 1


def test_dorfler_theta_near_one_marks_all():
    eta2 = np.array([0.3, 1.0, 2.5, 0.01, 0.7])
    assert len(mark_dorfler(eta2, 1 - 1e-12)) == 5


@pytest.mark.parametrize("theta", [0.0, 1.0, -0.1, 1.5])
def test_dorfler_theta_range(theta):
    with pytest.raises(InvalidInputError):
        mark_dorfler(np.ones(3), theta)


def test_zero_indicators_flagged():
    for m in (mark_dorfler(np.zeros(4), 0.5), mark_maximum(np.zeros(4), 0.5)):
        assert len(m) == 0 and m.zero_estimator


def test_invalid_indicator_vectors():
    for bad in (np.array([1.0, -1.0]), np.array([np.nan, 1.0]), np.ones((2, 2))):
        with pytest.raises(InvalidInputError):
            mark_dorfler(bad, 0.5)


def test_maximum_examples():
    eta2 = np.array([4.0, 3.0, 2.0, 1.0])
    # eta = (2, 1.732, 1.414, 1): the threshold 0.8 * 2 = 1.6 admits the second element too
    assert mark_maximum(eta2, 0.8).indices.tolist() == [0, 1]
    assert mark_maximum(eta2, 0.9).indices.tolist() == [0]
    assert mark_maximum(eta2, 1.0).indices.tolist() == [0]
    assert mark_maximum(np.array([2.0, 0.0, 2.0]), 1.0).indices.tolist() == [0, 2]
    assert mark_maximum(np.array([4.0, 0.0, 1e-6, 2.0]), 1e-6).indices.tolist() == [0, 2, 3]
    with pytest.raises(InvalidInputError):
        mark_maximum(eta2, 0.0)


def test_dispatch():
    eta2 = np.array([1.0, 2.0])
    assert mark(eta2, "dorfler", 0.5).strategy == "dorfler"
    assert mark(eta2, "maximum", 0.5).strategy == "maximum"
    with pytest.raises(InvalidInputError):
        mark(eta2, "bulk", 0.5)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=12), st.floats(0.01, 0.99))
def test_dorfler_minimal_against_exhaustive_search(values, theta):
    eta2 = np.array(values)
    m = mark_dorfler(eta2, theta)
    if eta2.sum() == 0:
        assert m.zero_estimator
        return
    assert eta2[m.indices].sum() >= theta * eta2.sum() * (1 - 1e-12)
    assert m.fraction >= theta * (1 - 1e-12)
    assert len(m) == brute_force_min_cardinality(values, theta)
    assert len(np.unique(m.indices)) == len(m)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_maximum_contains_argmax(values, gamma):
    eta2 = np.array(values)
    m = mark_maximum(eta2, gamma)
    if eta2.sum() > 0:
        assert int(np.argmax(eta2)) in m.indices


def test_dorfler_monotone_in_theta():
    rng = np.random.default_rng(0)
    for _ in range(50):
        eta2 = rng.exponential(size=40)
        sizes = [len(mark_dorfler(eta2, t)) for t in np.linspace(0.05, 0.95, 19)]
        assert np.all(np.diff(sizes) >= 0)
