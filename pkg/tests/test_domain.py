from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from sdme.domain import (
    MISSING,
    BetaPrior,
    ClassificationSet,
    ConfusionCounts,
    DataError,
    all_confusion_counts,
    apparent_proportion,
    apparent_table,
    confusion_counts,
    exclude_low_accuracy,
    moment_match_beta,
    performance_measures,
    subject_priors,
)


def _one_image(z, truth, subject=1, image=7):
    n = len(z)
    return ClassificationSet(
        np.full(n, subject), np.full(n, image), np.arange(1, n + 1), np.asarray(z), np.asarray(truth)
    )


class TestApparentProportion:
    def test_simple_share(self):
        assert apparent_proportion([1, 0, 1, 1], 4) == 0.75

    def test_missing_points_named(self):
        with pytest.raises(DataError, match=r"\[3\]"):
            apparent_proportion([1, 0], 3, point=[1, 2])

    def test_table_counts_positives(self):
        cs = ClassificationSet(
            np.array([1, 1, 1, 2, 2, 2]), np.array([5, 5, 5, 5, 5, 5]), np.array([1, 2, 3, 1, 2, 3]),
            np.array([1, 1, 0, 0, 0, 1]),
        )
        s, i, k, q = apparent_table(cs, 3)
        assert s.tolist() == [1, 2] and i.tolist() == [5, 5]
        assert k.tolist() == [2, 1] and q.tolist() == [3, 3]

    def test_table_rejects_incomplete_pair(self):
        cs = _one_image([1, 0], [1, 0])
        with pytest.raises(DataError, match="missing point ids \\[3\\]"):
            apparent_table(cs, 3)


class TestConfusion:
    def test_counts_and_measures(self):
        cs = _one_image([1, 1, 0, 0, 1, 0], [1, 0, 1, 0, 1, 0])
        c = confusion_counts(cs, 1)
        assert (c.tp, c.tn, c.fp, c.fn) == (2, 2, 1, 1)
        m = performance_measures(c)
        assert m.se == pytest.approx(2 / 3)
        assert m.sp == pytest.approx(2 / 3)
        assert m.acc == pytest.approx(4 / 6)

    def test_no_negative_points_gives_undefined_specificity(self):
        m = performance_measures(ConfusionCounts(tp=5, fn=1))
        assert m.sp is None and m.se == pytest.approx(5 / 6)

    def test_unlabelled_points_ignored(self):
        cs = _one_image([1, 1, 0], [1, MISSING, 0])
        c = confusion_counts(cs, 1)
        assert c.total == 2

    def test_subject_without_training_points(self):
        cs = _one_image([1, 0], [MISSING, MISSING])
        with pytest.raises(DataError):
            confusion_counts(cs, 1)
        assert all_confusion_counts(cs)[1].total == 0

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
    def test_counts_partition_points(self, pairs):
        z, t = map(np.array, zip(*pairs))
        c = confusion_counts(_one_image(z, t), 1)
        assert c.total == len(pairs)
        m = performance_measures(c)
        assert m.acc == pytest.approx(np.mean(z == t))


class TestExclusion:
    def test_threshold(self):
        meas = {
            1: performance_measures(ConfusionCounts(tp=3, tn=1, fp=3, fn=3)),  # acc 0.4
            2: performance_measures(ConfusionCounts(tp=1, tn=2, fp=4, fn=3)),  # acc 0.3
            3: performance_measures(ConfusionCounts()),  # undefined: kept
        }
        assert exclude_low_accuracy(meas, 0.40) == {1, 3}

    def test_everyone_below_warns(self):
        meas = {1: performance_measures(ConfusionCounts(fp=3, fn=3))}
        with pytest.warns(UserWarning):
            assert exclude_low_accuracy(meas) == set()


class TestBetaPriors:
    @given(st.floats(0.05, 0.95), st.floats(0.01, 0.9))
    def test_moment_match_reproduces_moments(self, mean, frac):
        var = frac * mean * (1 - mean)
        p = moment_match_beta(mean, var)
        assert p.source == "moments"
        m, v = stats.beta.stats(p.alpha, p.beta, moments="mv")
        assert m == pytest.approx(mean, rel=1e-10)
        assert v == pytest.approx(var, rel=1e-8)

    def test_infeasible_variance_falls_back(self):
        p = moment_match_beta(0.8, 0.5, fallback_precision=20)
        assert p.source == "fallback_precision"
        assert (p.alpha, p.beta) == pytest.approx((16.0, 4.0))

    def test_perfect_training_record_gives_proper_prior(self):
        pri = subject_priors({1: ConfusionCounts(tp=40)}, "se")
        assert pri[1].alpha > 0 and pri[1].beta > 0
        assert 0.95 < pri[1].mean < 1

    def test_prior_centres_on_training_rate(self):
        pri = subject_priors({1: ConfusionCounts(tp=90, fn=10)}, "se")[1]
        assert pri.mean == pytest.approx(90.5 / 101)

    def test_population_prior_for_unscored_subject(self):
        counts = {1: ConfusionCounts(tp=9, fn=1), 2: ConfusionCounts(tp=7, fn=3), 3: ConfusionCounts()}
        pri = subject_priors(counts, "se")
        assert pri[3].source.startswith("population")
        assert pri[3].mean == pytest.approx(0.8)

    def test_unknown_measure(self):
        with pytest.raises(ValueError):
            subject_priors({1: ConfusionCounts(tp=1)}, "npv")


def test_validation_rejects_bad_labels():
    with pytest.raises(DataError):
        ClassificationSet(np.array([1]), np.array([1]), np.array([1]), np.array([2]))
    assert isinstance(BetaPrior(1.0, 2.0).mean, float)
