import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segrobust.errors import ConfigError, UndefinedTestError
from segrobust.stats import average_ranks, bonferroni, wilcoxon_signed_rank

from oracles import wilcoxon_enumerate, wilcoxon_normal


def test_five_positive_differences():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert res.statistic == 0.0
    assert res.n_effective == 5
    assert res.p_two_sided == pytest.approx(0.0625, abs=1e-15)
    assert res.method == "exact"


def test_identical_samples_are_undefined():
    with pytest.raises(UndefinedTestError):
        wilcoxon_signed_rank([0.3, 0.4], [0.3, 0.4])


def test_zero_differences_are_dropped():
    res = wilcoxon_signed_rank([1, 2, 3, 7], [1, 0, 0, 0])
    assert res.n_effective == 3


def test_average_ranks_with_ties():
    np.testing.assert_array_equal(average_ranks(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1.0, 3.5, 2.0])


def test_random_n12_against_enumeration():
    r = np.random.default_rng(12)
    x, y = r.normal(size=12), r.normal(size=12)
    w, p = wilcoxon_enumerate(x, y)
    res = wilcoxon_signed_rank(x, y)
    assert res.statistic == w
    assert abs(res.p_two_sided - p) <= 1e-12


def test_exact_and_tied_cases_up_to_twelve():
    r = np.random.default_rng(0)
    for trial in range(60):
        n = int(r.integers(1, 13))
        # rounding makes ties and zero differences common
        x = np.round(r.normal(size=n), 1)
        y = np.round(r.normal(size=n), 1)
        if np.all(x == y):
            continue
        w, p = wilcoxon_enumerate(x, y)
        res = wilcoxon_signed_rank(x, y)
        assert res.statistic == pytest.approx(w, abs=1e-12), trial
        assert abs(res.p_two_sided - p) <= 1e-12, trial


def test_normal_branch_above_crossover():
    r = np.random.default_rng(5)
    x, y = r.normal(size=40), r.normal(size=40) + 0.3
    res = wilcoxon_signed_rank(x, y)
    assert res.method == "normal_approx"
    assert res.p_two_sided == pytest.approx(wilcoxon_normal(x, y), abs=1e-12)


def test_exact_and_normal_agree_at_25():
    r = np.random.default_rng(25)
    for _ in range(20):
        x, y = r.normal(size=25), r.normal(size=25) + r.uniform(0, 0.5)
        exact = wilcoxon_signed_rank(x, y)
        assert exact.method == "exact"
        assert abs(exact.p_two_sided - wilcoxon_normal(x, y)) < 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 14))
def test_invariant_under_pair_permutation(seed, n):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=n), r.normal(size=n)
    perm = r.permutation(n)
    a, b = wilcoxon_signed_rank(x, y), wilcoxon_signed_rank(x[perm], y[perm])
    assert (a.statistic, a.p_two_sided) == (b.statistic, b.p_two_sided)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 30))
def test_p_in_unit_interval_and_swap_symmetric(seed, n):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=n), r.normal(size=n)
    a = wilcoxon_signed_rank(x, y)
    assert 0.0 <= a.p_two_sided <= 1.0
    assert wilcoxon_signed_rank(y, x).p_two_sided == a.p_two_sided


def test_length_mismatch():
    with pytest.raises(ConfigError):
        wilcoxon_signed_rank([1, 2], [1])


def test_bonferroni_arithmetic():
    assert bonferroni([0.01], 3) == [pytest.approx(0.03)]
    assert bonferroni([0.6], 3) == [1.0]
    assert bonferroni([0.01, 0.02]) == [pytest.approx(0.02), pytest.approx(0.04)]
    with pytest.raises(ConfigError):
        bonferroni([0.1, 0.2], 1)
    with pytest.raises(ConfigError):
        bonferroni([], 3)
