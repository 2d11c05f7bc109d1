import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eslm.risk import (
    RiskConfig,
    ScoreKind,
    TokenScores,
    cvar,
    random_mask,
    select,
    select_mask,
    standardize_scores,
    tail_count,
    var_threshold,
)
from oracles import random_scores, tail_mean, var_scan, var_scan_literal

ONE_TO_TEN = np.arange(1.0, 11.0)
ALPHAS = [0.0, 0.1, 0.2, 0.5, 0.9]

scores_strategy = st.lists(
    st.one_of(st.integers(-3, 3).map(float), st.floats(-50, 50, allow_nan=False, width=32)),
    min_size=1, max_size=40,
).map(np.array)


class TestStandardize:
    def test_one_two_three(self):
        out = standardize_scores([1.0, 2.0, 3.0])
        assert out.standardized
        assert out.values.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.values.std() == pytest.approx(1.0, abs=1e-6)

    def test_constant_is_zero(self):
        np.testing.assert_array_equal(standardize_scores(np.full(5, 3.3)).values, 0.0)

    def test_single_score_unchanged(self):
        out = standardize_scores([4.0])
        assert not out.standardized and out.values.tolist() == [4.0]

    def test_mask_matches_raw(self):
        s = np.random.default_rng(0).normal(size=200)
        np.testing.assert_array_equal(select(standardize_scores(s), 0.3).selected, select(s, 0.3).selected)

    def test_per_domain_groups(self):
        s = np.array([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
        out = standardize_scores(s, groups=[0, 0, 0, 1, 1, 1]).values
        np.testing.assert_allclose(out[:3], out[3:], atol=1e-6)
        with pytest.raises(ValueError):
            standardize_scores(s, groups=[0, 1])


class TestVarThreshold:
    def test_alpha_point_one(self):
        assert tail_count(10, 0.1) == 9
        assert var_threshold(ONE_TO_TEN, 0.1) == 2.0

    def test_alpha_half(self):
        assert var_threshold(ONE_TO_TEN, 0.5) == 6.0
        assert select(ONE_TO_TEN, 0.5).selected.nonzero()[0].tolist() == [5, 6, 7, 8, 9]

    def test_alpha_zero_is_min(self):
        s = np.random.default_rng(1).normal(size=17)
        assert var_threshold(s, 0.0) == s.min()
        assert select(s, 0.0).selected.all()

    def test_alpha_bounds(self):
        with pytest.raises(ValueError):
            var_threshold(ONE_TO_TEN, 1.0)
        with pytest.raises(ValueError):
            RiskConfig(alpha=-0.1)

    def test_binary_rounding_of_alpha(self):
        # (1 - 0.9) * 10 is 0.99999... in binary; the tail must still hold one score
        assert tail_count(10, 0.9) == 1
        assert tail_count(10, 0.7) == 3
        assert tail_count(3, 0.5) == 2

    def test_matches_coverage_scan(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            s = random_scores(rng)
            for a in ALPHAS:
                assert var_threshold(s, a) == var_scan(s, a)

    def test_literal_scan_agrees_on_clean_cuts(self):
        # both readings coincide when scores are distinct and the tail size is integral
        rng = np.random.default_rng(3)
        for _ in range(300):
            s = rng.normal(size=10)
            for a in (0.0, 0.1, 0.2, 0.5, 0.9):
                assert var_threshold(s, a) == var_scan_literal(s, a)

    def test_literal_scan_differs_off_grid(self):
        assert var_threshold(ONE_TO_TEN, 0.15) == 2.0
        assert var_scan_literal(ONE_TO_TEN, 0.15) == 3.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            TokenScores([1.0, np.inf])


class TestSelectMask:
    def test_distinct_count(self):
        s = np.random.default_rng(4).permutation(10).astype(float)
        assert select(s, 0.1).selected_count == 9

    def test_all_equal_all_selected(self):
        m = select(np.full(7, 2.0), 0.5)
        assert m.selected_count == 7 and m.fraction == 1.0

    def test_ties_at_threshold_included(self):
        m = select(np.array([1.0, 2.0, 2.0, 3.0]), 0.5)
        assert m.threshold == 2.0 and m.selected_count == 3

    def test_mask_equals_ge_tau(self):
        s = np.random.default_rng(5).normal(size=50)
        m = select_mask(s, 0.2)
        np.testing.assert_array_equal(m.selected, s >= 0.2)

    def test_random_mask_count(self):
        m = random_mask(20, 7, np.random.default_rng(0))
        assert m.selected_count == 7
        with pytest.raises(ValueError):
            random_mask(5, 0, np.random.default_rng(0))


class TestCvar:
    def test_one_to_ten_half(self):
        assert cvar(ONE_TO_TEN, 0.5) == 8.0

    def test_alpha_zero_is_mean(self):
        s = np.random.default_rng(6).normal(size=9)
        assert cvar(s, 0.0) == pytest.approx(s.mean(), rel=1e-12)

    def test_single_score(self):
        for a in ALPHAS:
            assert cvar([3.25], a) == 3.25

    def test_matches_tail_mean(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            s = random_scores(rng)
            for a in ALPHAS:
                assert cvar(s, a) == pytest.approx(tail_mean(s, var_scan(s, a)), rel=1e-12, abs=1e-12)

    def test_keeps_float32(self):
        s = np.random.default_rng(8).random(64).astype(np.float32)
        tau = var_threshold(s, 0.1)
        tail = s[s >= tau].astype(np.float64)
        ref = np.float32(math.fsum(tail.tolist()) / tail.size)
        assert cvar(s, 0.1) == float(ref)


@settings(max_examples=200, deadline=None)
@given(scores_strategy, st.sampled_from(ALPHAS + [0.3, 0.75]), st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance(s, alpha, a, b):
    # grid-valued inputs so a*s+b cannot merge distinct values in floating point
    s = np.round(s * 8) / 8
    np.testing.assert_array_equal(select(a * s + b, alpha).selected, select(s, alpha).selected)


@settings(max_examples=200, deadline=None)
@given(scores_strategy, st.sampled_from(ALPHAS))
def test_fraction_bounds_and_cvar_ge_var(s, alpha):
    m = select(s, alpha)
    assert 1 - alpha - 1e-12 <= m.fraction <= 1.0
    if len(np.unique(s)) == s.size:
        assert m.selected_count == math.ceil(round((1 - alpha) * s.size, 9))
    assert cvar(s, alpha) >= var_threshold(s, alpha) - 1e-9


@settings(max_examples=200, deadline=None)
@given(scores_strategy)
def test_cvar_monotone_in_alpha(s):
    vals = [cvar(s, a) for a in np.linspace(0, 0.95, 20)]
    assert all(x <= y + 1e-9 for x, y in zip(vals, vals[1:]))


def test_score_kind_values():
    assert ScoreKind("entropy") is ScoreKind.ENTROPY and ScoreKind("loss") is ScoreKind.LOSS
