import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mahaguard.embio import EmbeddingSet
from mahaguard.errors import (
    ClassOutOfRange,
    DimensionMismatch,
    EmptyBank,
    EmptyScores,
    InvalidParams,
    NonPositiveTemperature,
    UnknownScorer,
)
from mahaguard.scorers import (
    KnnIndex,
    ScoreVector,
    ThresholdRule,
    calibrate_threshold,
    check_scorer_id,
    decide,
    mahalanobis_distance,
    score_energy,
    score_knn,
    score_md,
    score_msp,
    score_rmd,
    write_scores_csv,
)
from mahaguard.stats import GaussianStats


def simple_stats(means, cov, bg_mean=None, bg_cov=None):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    d = means.shape[1]
    return GaussianStats.create(
        means,
        cov,
        np.zeros(d) if bg_mean is None else bg_mean,
        np.eye(d) if bg_cov is None else bg_cov,
    )


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


class TestMahalanobisDistance:
    def test_identity_is_squared_euclidean(self):
        stats = simple_stats([[0.0, 0.0]], np.eye(2))
        assert mahalanobis_distance([3.0, 4.0], stats, 0) == pytest.approx(25.0)

    def test_zero_at_centroid(self):
        stats = simple_stats([[1.5, -2.0]], np.eye(2))
        assert mahalanobis_distance([1.5, -2.0], stats, 0) == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_covariance_hand_value(self):
        stats = simple_stats([[0.0, 0.0]], np.diag([2.0, 1.0]))
        assert mahalanobis_distance([2.0, 1.0], stats, 0) == pytest.approx(3.0)

    def test_class_out_of_range(self):
        stats = simple_stats([[0.0, 0.0]], np.eye(2))
        with pytest.raises(ClassOutOfRange):
            mahalanobis_distance([1.0, 1.0], stats, 1)

    def test_dim_mismatch(self):
        stats = simple_stats([[0.0, 0.0]], np.eye(2))
        with pytest.raises(DimensionMismatch):
            mahalanobis_distance([1.0, 1.0, 1.0], stats, 0)

    def test_nonnegative_and_zero_iff_centroid(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = rng.integers(2, 8)
            stats = simple_stats(rng.standard_normal((1, d)), random_spd(rng, d))
            z = rng.standard_normal(d)
            md = mahalanobis_distance(z, stats, 0)
            assert md >= 0.0
            if np.linalg.norm(z - stats.class_means[0]) > 1e-6:
                assert md > 0.0

    def test_cholesky_solve_matches_dense_inverse(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            d = int(rng.integers(2, 21))
            cov = random_spd(rng, d)
            mu = rng.standard_normal(d)
            stats = simple_stats(mu[None, :], cov)
            z = rng.standard_normal(d)
            md = mahalanobis_distance(z, stats, 0)
            dense = float((z - mu) @ np.linalg.inv(cov) @ (z - mu))
            assert md == pytest.approx(dense, rel=1e-8)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            d = int(rng.integers(2, 7))
            k = int(rng.integers(1, 4))
            means = rng.standard_normal((k, d))
            cov = random_spd(rng, d)
            bg_mean = rng.standard_normal(d)
            bg_cov = random_spd(rng, d)
            stats = GaussianStats.create(means, cov, bg_mean, bg_cov)
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            a = q @ np.diag(rng.uniform(0.5, 2.0, size=d))
            b = rng.standard_normal(d)
            stats_t = GaussianStats.create(
                means @ a.T + b,
                (a @ cov @ a.T + (a @ cov @ a.T).T) / 2,
                a @ bg_mean + b,
                (a @ bg_cov @ a.T + (a @ bg_cov @ a.T).T) / 2,
            )
            z = rng.standard_normal((5, d))
            z_t = z @ a.T + b
            np.testing.assert_allclose(
                score_md(z, stats).scores, score_md(z_t, stats_t).scores, rtol=1e-6
            )
            np.testing.assert_allclose(
                score_rmd(z, stats).scores, score_rmd(z_t, stats_t).scores, rtol=1e-6, atol=1e-6
            )


class TestScoreMd:
    def test_at_class_mean_is_max(self):
        stats = simple_stats([[0.0, 0.0], [10.0, 0.0]], np.eye(2))
        sv = score_md(np.array([[0.0, 0.0]]), stats)
        assert sv.scores[0] == pytest.approx(0.0, abs=1e-12)

    def test_closest_class_wins(self):
        stats = simple_stats([[0.0, 0.0], [10.0, 0.0]], np.eye(2))
        sv = score_md(np.array([[1.0, 0.0]]), stats)
        assert sv.scores[0] == pytest.approx(-1.0)

    def test_equidistant_gives_common_distance(self):
        stats = simple_stats([[-1.0, 0.0], [1.0, 0.0]], np.eye(2))
        sv = score_md(np.array([[0.0, 2.0]]), stats)
        assert sv.scores[0] == pytest.approx(-5.0)


class TestScoreRmd:
    def test_background_equals_class_gives_zero(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        mu = np.array([1.0, -1.0])
        stats = GaussianStats.create(mu[None, :], cov, mu, cov)
        z = np.random.default_rng(3).standard_normal((10, 2))
        np.testing.assert_allclose(score_rmd(z, stats).scores, 0.0, atol=1e-9)

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(4)
        means = np.array([[0.0, 0.0], [3.0, 1.0]])
        cov = random_spd(rng, 2)
        bg_mean = np.array([1.0, 0.5])
        bg_cov = random_spd(rng, 2)
        stats = GaussianStats.create(means, cov, bg_mean, bg_cov)
        z = rng.standard_normal((6, 2))
        inv, bg_inv = np.linalg.inv(stats.tied_covariance), np.linalg.inv(stats.background_covariance)
        expected = []
        for row in z:
            md = [float((row - m) @ inv @ (row - m)) for m in means]
            md0 = float((row - bg_mean) @ bg_inv @ (row - bg_mean))
            expected.append(-min(m - md0 for m in md))
        np.testing.assert_allclose(score_rmd(z, stats).scores, expected, rtol=1e-8)

    def test_positive_score_when_background_farther(self):
        stats = GaussianStats.create(
            np.array([[0.0, 0.0]]), np.eye(2), np.array([5.0, 0.0]), np.eye(2)
        )
        sv = score_rmd(np.array([[0.0, 0.0]]), stats)
        assert sv.scores[0] == pytest.approx(25.0)

    def test_recomposition_identity(self):
        rng = np.random.default_rng(5)
        means = rng.standard_normal((3, 4))
        stats = GaussianStats.create(
            means, random_spd(rng, 4), rng.standard_normal(4), random_spd(rng, 4)
        )
        z = rng.standard_normal((7, 4))
        sv = score_rmd(z, stats)
        from mahaguard.scorers import background_mahalanobis, class_mahalanobis

        md = class_mahalanobis(z, stats)
        md0 = background_mahalanobis(z, stats)
        expected = -(md - md0[:, None]).min(axis=1)
        np.testing.assert_array_equal(sv.scores, expected)


class TestScoreMsp:
    def test_uniform_logits(self):
        sv = score_msp(np.zeros((3, 4)))
        np.testing.assert_allclose(sv.scores, 0.25)

    def test_two_logit_value(self):
        sv = score_msp(np.array([[10.0, 0.0]]))
        assert sv.scores[0] == pytest.approx(1.0 / (1.0 + math.exp(-10.0)), rel=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((5, 3))
        np.testing.assert_allclose(
            score_msp(logits).scores, score_msp(logits + 123.4).scores, atol=1e-12
        )

    def test_range_and_row_normalization(self):
        rng = np.random.default_rng(7)
        logits = 50 * rng.standard_normal((20, 5))
        from mahaguard.scorers import softmax

        probs = softmax(logits)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        sv = score_msp(logits)
        assert np.all(sv.scores > 0.0) and np.all(sv.scores <= 1.0)

    def test_needs_two_classes(self):
        with pytest.raises(DimensionMismatch):
            score_msp(np.ones((3, 1)))


class TestScoreEnergy:
    def test_singleton_logsumexp(self):
        sv = score_energy(np.array([[5.0]]), temperature=1.0)
        assert sv.scores[0] == pytest.approx(5.0)

    def test_two_zeros(self):
        sv = score_energy(np.array([[0.0, 0.0]]), temperature=1.0)
        assert sv.scores[0] == pytest.approx(math.log(2.0), rel=1e-12)

    def test_shift_property(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((4, 6))
        base = score_energy(logits).scores
        shifted = score_energy(logits + 3.25).scores
        np.testing.assert_allclose(shifted, base + 3.25, atol=1e-10)

    def test_temperature_validation(self):
        with pytest.raises(NonPositiveTemperature):
            score_energy(np.ones((2, 2)), temperature=0.0)


class TestScoreKnn:
    def test_query_in_bank_scores_zero(self):
        bank = np.array([[1.0, 0.0], [0.0, 1.0]])
        sv = score_knn(np.array([[1.0, 0.0]]), KnnIndex(bank, k=1))
        assert sv.scores[0] == 0.0

    def test_second_neighbor_hand_value(self):
        bank = np.array([[1.0, 0.0], [0.0, 1.0]])
        sv = score_knn(np.array([[1.0, 0.0]]), KnnIndex(bank, k=2))
        assert sv.scores[0] == pytest.approx(-math.sqrt(2.0), rel=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(9)
        bank = rng.standard_normal((50, 4))
        index = KnnIndex(bank, k=5)
        q = rng.standard_normal((8, 4))
        a = score_knn(q, index).scores
        b = score_knn(17.5 * q, index).scores
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(10)
        bank = rng.standard_normal((30, 3))
        q = rng.standard_normal((5, 3))
        prev = None
        for k in range(1, 31):
            cur = score_knn(q, KnnIndex(bank, k=k)).scores
            if prev is not None:
                assert np.all(cur <= prev + 1e-15)
            prev = cur

    def test_bank_rows_unit_norm(self):
        rng = np.random.default_rng(11)
        index = KnnIndex(rng.standard_normal((20, 6)) * 7.0, k=3)
        np.testing.assert_allclose(np.linalg.norm(index.bank, axis=1), 1.0, atol=1e-9)

    def test_validation(self):
        with pytest.raises(EmptyBank):
            KnnIndex(np.empty((0, 3)).reshape(0, 3), k=1)
        with pytest.raises(InvalidParams):
            KnnIndex(np.ones((4, 2)), k=5)
        with pytest.raises(DimensionMismatch):
            score_knn(np.ones((2, 3)), KnnIndex(np.ones((4, 2)), k=1))


class TestDecide:
    def test_boundary_is_id(self):
        sv = ScoreVector(np.array([1.0, 2.0, 3.0]), "md")
        flags = decide(sv, ThresholdRule(tau=2.0))
        np.testing.assert_array_equal(flags, [False, True, True])

    def test_all_id_below_min(self):
        sv = ScoreVector(np.array([4.0, 5.0]), "md")
        assert decide(sv, ThresholdRule(tau=4.0)).all()

    def test_all_ood_above_max(self):
        sv = ScoreVector(np.array([4.0, 5.0]), "md")
        assert not decide(sv, ThresholdRule(tau=6.0)).any()


class TestCalibrateThreshold:
    def test_hundred_scores(self):
        rule = calibrate_threshold(np.arange(1.0, 101.0), target_tpr=0.95)
        assert rule.tau == 6.0

    def test_target_one_gives_min(self):
        rule = calibrate_threshold(np.array([3.0, 9.0, 1.0]), target_tpr=1.0)
        assert rule.tau == 1.0

    def test_all_equal(self):
        rule = calibrate_threshold(np.full(10, 2.5), target_tpr=0.95)
        assert rule.tau == 2.5

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            n = int(rng.integers(1, 60))
            scores = rng.integers(-5, 6, size=n).astype(float)  # heavy ties
            target = float(rng.uniform(0.05, 1.0))
            rule = calibrate_threshold(scores, target_tpr=target)
            candidates = [t for t in np.unique(scores) if (scores >= t).mean() >= target]
            assert rule.tau == max(candidates)

    @given(
        st.lists(st.integers(min_value=-50, max_value=50), min_size=1, max_size=80),
        st.floats(min_value=0.01, max_value=1.0),
    )
    @settings(max_examples=150, deadline=None)
    def test_tpr_constraint_and_minimality(self, raw, target):
        scores = np.array(raw, dtype=float)
        rule = calibrate_threshold(scores, target_tpr=target)
        assert (scores >= rule.tau).mean() >= target
        larger = scores[scores > rule.tau]
        if larger.size:
            assert (scores >= larger.min()).mean() < target

    def test_empty(self):
        with pytest.raises(EmptyScores):
            calibrate_threshold(np.array([]), target_tpr=0.95)


class TestScoreVectorType:
    def test_rejects_nonfinite(self):
        from mahaguard.errors import NonFiniteScore

        with pytest.raises(NonFiniteScore):
            ScoreVector(np.array([1.0, np.nan]), "md")

    def test_rejects_unknown_id(self):
        with pytest.raises(UnknownScorer):
            ScoreVector(np.array([1.0]), "vim")
        with pytest.raises(UnknownScorer):
            check_scorer_id("bogus")


class TestScoresCsv:
    def test_with_threshold(self, tmp_path):
        sv = ScoreVector(np.array([0.5, -1.5, 2.0]), "md")
        path = tmp_path / "scores.csv"
        write_scores_csv(sv, path, ThresholdRule(tau=0.5))
        lines = path.read_text().splitlines()
        assert lines[0] == "row_index,score,decision"
        assert lines[1] == "0,0.5,ID"
        assert lines[2] == "1,-1.5,OOD"
        assert lines[3] == "2,2.0,ID"

    def test_without_threshold(self, tmp_path):
        sv = ScoreVector(np.array([1.25]), "energy")
        path = tmp_path / "scores.csv"
        write_scores_csv(sv, path)
        assert path.read_text().splitlines() == ["row_index,score", "0,1.25"]
