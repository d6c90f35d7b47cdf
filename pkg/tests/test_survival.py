"""Tests for the discrete-time survival math, checked against independent oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptsurv.errors import UndefinedMetricError
from promptsurv.survival import (
    EPS,
    HazardPrediction,
    SurvivalLabel,
    TimeBinning,
    concordance_index,
    discretize_time,
    hazard_to_survival,
    kaplan_meier,
    nll_from_hazards,
    nll_survival_loss,
    stratify_by_median_risk,
)


def brute_force_ci(risks, times, events):
    """Independent O(n^2) pair enumerator used as the concordance oracle."""
    num = 0.0
    pairs = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if times[i] < times[j] and events[i] == 1:
                pairs += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    if pairs == 0:
        raise ZeroDivisionError
    return num / pairs


def labels_from(times, censored):
    return [SurvivalLabel(time=float(t), censored=int(c)) for t, c in zip(times, censored)]


class TestHazardToSurvival:
    def test_zero_hazard_identity(self):
        out = hazard_to_survival([0.0, 0.0, 0.0])
        # EPS leaks in through clamping; identity up to that.
        np.testing.assert_allclose(out, [1.0, 1.0, 1.0], atol=1e-6)

    def test_certain_event_at_first_bin(self):
        out = hazard_to_survival([1.0 - EPS, 0.3, 0.6])
        assert np.all(out < 1e-6)

    def test_hand_computed_product(self):
        out = hazard_to_survival([0.1, 0.2])
        np.testing.assert_allclose(out, [0.9, 0.72], rtol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            hazard_to_survival([])
        with pytest.raises(ValueError):
            hazard_to_survival(torch.zeros(0))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            hazard_to_survival([0.5, 1.2])
        with pytest.raises(ValueError):
            hazard_to_survival(torch.tensor([-0.1, 0.5]))

    def test_torch_path_differentiable(self):
        h = torch.tensor([0.1, 0.2, 0.4], dtype=torch.float64, requires_grad=True)
        s = hazard_to_survival(h)
        s.sum().backward()
        assert h.grad is not None and torch.isfinite(h.grad).all()

    @given(
        st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=1, max_size=40)
    )
    def test_monotone_and_bounded(self, hazards):
        out = hazard_to_survival(hazards)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert np.all(np.diff(out) <= 1e-15)


class TestNllSurvivalLoss:
    def test_event_at_first_bin(self):
        pred = HazardPrediction.from_hazards([0.5, 0.5])
        lab = SurvivalLabel(time=1.0, censored=0, bin=1)
        assert nll_survival_loss(pred, lab) == pytest.approx(-math.log(0.5), abs=1e-6)

    def test_censored_at_first_bin(self):
        pred = HazardPrediction.from_hazards([0.5])
        lab = SurvivalLabel(time=1.0, censored=1, bin=1)
        assert nll_survival_loss(pred, lab) == pytest.approx(-math.log(0.5), abs=1e-6)

    def test_perfect_prediction_limit(self):
        # Event in bin 2 and hazards [~0, ~1]: S(1) ~ 1 and h(2) ~ 1, loss -> 0.
        pred = HazardPrediction.from_hazards([0.0, 1.0])
        lab = SurvivalLabel(time=2.0, censored=0, bin=2)
        assert nll_survival_loss(pred, lab) == pytest.approx(0.0, abs=1e-5)

    def test_bin_out_of_range(self):
        pred = HazardPrediction.from_hazards([0.5, 0.5])
        with pytest.raises(ValueError):
            nll_survival_loss(pred, SurvivalLabel(time=1.0, censored=0, bin=3))
        with pytest.raises(ValueError):
            nll_survival_loss(pred, SurvivalLabel(time=1.0, censored=0, bin=0))

    def test_batch_mean(self):
        h = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
        loss = nll_from_hazards(h, torch.tensor([1, 1]), torch.tensor([0, 1]))
        assert float(loss) == pytest.approx(-math.log(0.5), abs=1e-6)

    @given(
        st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=1, max_size=8),
        st.data(),
    )
    def test_nonnegative(self, hazards, data):
        t = len(hazards)
        b = data.draw(st.integers(min_value=1, max_value=t))
        c = data.draw(st.integers(min_value=0, max_value=1))
        loss = nll_from_hazards(
            torch.tensor(hazards, dtype=torch.float64), torch.tensor([b]), torch.tensor([c])
        )
        assert float(loss) >= -1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        h0 = rng.uniform(0.05, 0.95, size=(6, 4))
        bins = torch.tensor(rng.integers(1, 5, size=6))
        cens = torch.tensor(rng.integers(0, 2, size=6))

        h = torch.tensor(h0, dtype=torch.float64, requires_grad=True)
        loss = nll_from_hazards(h, bins, cens)
        loss.backward()

        step = 1e-5
        for idx in np.ndindex(h0.shape):
            hp, hm = h0.copy(), h0.copy()
            hp[idx] += step
            hm[idx] -= step
            lp = float(nll_from_hazards(torch.tensor(hp, dtype=torch.float64), bins, cens))
            lm = float(nll_from_hazards(torch.tensor(hm, dtype=torch.float64), bins, cens))
            fd = (lp - lm) / (2 * step)
            an = float(h.grad[idx])
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-4


class TestConcordanceIndex:
    def test_perfect_concordance(self):
        labs = labels_from([1, 2, 3, 4], [0, 0, 0, 0])
        assert concordance_index([4.0, 3.0, 2.0, 1.0], labs) == 1.0

    def test_all_ties(self):
        labs = labels_from([1, 2, 3, 4], [0, 0, 0, 0])
        assert concordance_index([1.0, 1.0, 1.0, 1.0], labs) == 0.5

    def test_hand_enumerated_case(self):
        labs = labels_from([1, 2, 3, 4], [0, 0, 1, 0])
        assert concordance_index([0.9, 0.5, 0.7, 0.2], labs) == pytest.approx(0.8)

    def test_no_comparable_pairs(self):
        labs = labels_from([1.0, 1.0], [0, 0])  # equal times are not comparable
        with pytest.raises(UndefinedMetricError):
            concordance_index([0.1, 0.2], labs)
        labs = labels_from([1.0, 2.0], [1, 1])  # all censored
        with pytest.raises(UndefinedMetricError):
            concordance_index([0.1, 0.2], labs)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(1234)
        for _ in range(100):
            n = 50
            times = rng.uniform(0, 100, size=n)
            events = (rng.uniform(size=n) > 0.3).astype(int)
            risks = rng.normal(size=n)
            # Inject some risk ties to exercise the 0.5 branch.
            risks[rng.integers(0, n, size=5)] = risks[rng.integers(0, n, size=5)]
            labs = labels_from(times, 1 - events)
            expected = brute_force_ci(risks, times, events)
            assert concordance_index(risks, labs) == expected

    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0, max_value=100, allow_nan=False),
                st.integers(min_value=0, max_value=1),
                st.floats(min_value=-5, max_value=5, allow_nan=False),
            ),
            min_size=3,
            max_size=25,
        )
    )
    @settings(max_examples=60)
    def test_monotone_transform_invariance(self, rows):
        times = [r[0] for r in rows]
        cens = [r[1] for r in rows]
        risks = np.array([r[2] for r in rows])
        labs = labels_from(times, cens)
        try:
            base = concordance_index(risks, labs)
        except UndefinedMetricError:
            return
        # Strictly increasing maps that are also exactly order- and
        # tie-preserving in float arithmetic.
        scaled = risks * 8.0
        ranks = np.searchsorted(np.unique(risks), risks).astype(float)
        assert concordance_index(scaled, labs) == pytest.approx(base, abs=1e-12)
        assert concordance_index(ranks, labs) == pytest.approx(base, abs=1e-12)

    @given(
        st.lists(st.floats(min_value=0, max_value=100, allow_nan=False), min_size=3, max_size=25),
        st.data(),
    )
    @settings(max_examples=60)
    def test_negation_complement_on_tie_free_inputs(self, times, data):
        n = len(times)
        risks = data.draw(
            st.lists(
                st.floats(min_value=-5, max_value=5, allow_nan=False),
                min_size=n,
                max_size=n,
                unique=True,
            )
        )
        labs = labels_from(times, [0] * n)
        risks = np.asarray(risks)
        try:
            ci = concordance_index(risks, labs)
        except UndefinedMetricError:
            return
        assert ci + concordance_index(-risks, labs) == pytest.approx(1.0, abs=1e-12)


class TestKaplanMeier:
    def test_all_censored(self):
        est = kaplan_meier(labels_from([1, 2, 3], [1, 1, 1]))
        assert len(est.event_times) == 0
        assert est.evaluate(0.0) == 1.0
        assert est.evaluate(100.0) == 1.0

    def test_all_events(self):
        est = kaplan_meier(labels_from([1, 2, 3], [0, 0, 0]))
        np.testing.assert_allclose(est.survival_probs, [2 / 3, 1 / 3, 0.0], atol=1e-12)

    def test_censored_subject_leaves_risk_set(self):
        est = kaplan_meier(labels_from([1, 2, 3], [0, 1, 0]))
        np.testing.assert_allclose(est.event_times, [1.0, 3.0])
        assert est.evaluate(1.0) == pytest.approx(2 / 3, abs=1e-12)
        assert est.evaluate(3.0) == pytest.approx(0.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kaplan_meier([])

    @given(
        st.lists(
            st.floats(min_value=0.1, max_value=50, allow_nan=False), min_size=1, max_size=30
        )
    )
    @settings(max_examples=60)
    def test_no_censoring_matches_empirical_fraction(self, times):
        labs = labels_from(times, [0] * len(times))
        est = kaplan_meier(labs)
        times_arr = np.asarray(times)
        for t in est.event_times:
            empirical = float(np.mean(times_arr > t))
            assert est.evaluate(t) == pytest.approx(empirical, abs=1e-12)


class TestDiscretizeTime:
    def test_nearest_rank_quartiles(self):
        times = [10, 20, 30, 40, 50, 60, 70, 80]
        labs = labels_from(times, [0] * 8)
        binning, bins = discretize_time(labs, 4)
        np.testing.assert_allclose(binning.edges, [20, 40, 60])
        assert binning.bin_of(35.0) == 2
        assert bins == [1, 1, 2, 2, 3, 3, 4, 4]

    def test_single_bin(self):
        labs = labels_from([5, 6, 7], [0, 0, 1])
        binning, bins = discretize_time(labs, 1)
        assert len(binning.edges) == 0
        assert bins == [1, 1, 1]

    def test_degenerate_edges_rejected(self):
        labs = labels_from([5, 5, 5, 5], [0, 0, 0, 0])
        with pytest.raises(ValueError):
            discretize_time(labs, 4)

    def test_too_few_uncensored_rejected(self):
        labs = labels_from([1, 2, 3], [0, 1, 1])
        with pytest.raises(ValueError):
            discretize_time(labs, 2)

    def test_labels_get_bins(self):
        labs = labels_from([10, 20, 30, 40], [0, 0, 0, 0])
        discretize_time(labs, 2)
        assert all(lab.bin is not None for lab in labs)

    @given(
        st.lists(st.floats(min_value=0, max_value=1000, allow_nan=False), min_size=8, max_size=60)
    )
    @settings(max_examples=60)
    def test_bin_monotone_in_time(self, times):
        labs = labels_from(times, [0] * len(times))
        try:
            binning, _ = discretize_time(labs, 4)
        except ValueError:
            return  # degenerate quantile edges
        grid = np.linspace(0, 1000, 101)
        bins = [binning.bin_of(t) for t in grid]
        assert all(b2 >= b1 for b1, b2 in zip(bins, bins[1:]))


class TestStratify:
    def test_symmetric_split(self):
        assert stratify_by_median_risk([1, 2, 3, 4]) == ["low", "low", "high", "high"]

    def test_all_equal(self):
        assert stratify_by_median_risk([2.0, 2.0, 2.0]) == ["low", "low", "low"]

    def test_strict_greater_rule(self):
        assert stratify_by_median_risk([0.2, 0.9, 0.5]) == ["low", "high", "low"]

    def test_too_small(self):
        with pytest.raises(ValueError):
            stratify_by_median_risk([1.0])


def test_timebinning_validates_edges():
    with pytest.raises(ValueError):
        TimeBinning(edges=np.array([3.0, 2.0]), n_bins=3)
    with pytest.raises(ValueError):
        TimeBinning(edges=np.array([1.0]), n_bins=3)
