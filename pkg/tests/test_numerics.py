import numpy as np
import pytest

from ekpc.numerics import (DegenerateVectorError, NonFiniteError, SeededRng,
                           cosine_similarity, finite_diff_gradient,
                           sample_diag_gaussian)


class TestCosineSimilarity:
    def test_identical_vectors(self):
        assert cosine_similarity([1, 0], [1, 0]) == 1.0

    def test_orthogonal_vectors(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_hand_computed(self):
        # (1,2).(2,1) = 4, norms sqrt(5) each -> 4/5
        assert cosine_similarity([1, 2], [2, 1]) == pytest.approx(0.8, abs=1e-12)

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateVectorError):
            cosine_similarity([0, 0], [1, 0])
        with pytest.raises(DegenerateVectorError):
            cosine_similarity([1, 0], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_symmetry_and_scale_invariance(self):
        rng = SeededRng(11)
        for k in range(50):
            r = rng.derive(k)
            a = r.standard_normal(6)
            b = r.standard_normal(6)
            lam = float(np.exp(r.standard_normal(())))
            assert cosine_similarity(a, b) == pytest.approx(
                cosine_similarity(b, a), abs=1e-12)
            assert cosine_similarity(lam * a, b) == pytest.approx(
                cosine_similarity(a, b), abs=1e-12)

    def test_clamped_to_unit_interval(self):
        v = np.full(40, 0.1)
        assert cosine_similarity(v, v) <= 1.0
        assert cosine_similarity(v, -v) >= -1.0


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(123).standard_normal(100)
        b = SeededRng(123).standard_normal(100)
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        a = SeededRng(123).standard_normal(16)
        b = SeededRng(124).standard_normal(16)
        assert not np.array_equal(a, b)

    def test_derive_is_order_independent(self):
        # counter-based substreams: deriving 2 then 1 equals 1 then 2
        root = SeededRng(7)
        first = root.derive(1).standard_normal(8)
        second = root.derive(2).standard_normal(8)
        root2 = SeededRng(7)
        second_again = root2.derive(2).standard_normal(8)
        first_again = root2.derive(1).standard_normal(8)
        assert np.array_equal(first, first_again)
        assert np.array_equal(second, second_again)

    def test_derived_streams_distinct(self):
        root = SeededRng(7)
        assert not np.array_equal(root.derive(1).standard_normal(8),
                                  root.derive(2).standard_normal(8))

    def test_multi_index_derivation(self):
        root = SeededRng(9)
        assert np.array_equal(root.derive(3, 4).standard_normal(4),
                              SeededRng(9).derive(3, 4).standard_normal(4))
        assert not np.array_equal(root.derive(3, 4).standard_normal(4),
                                  root.derive(4, 3).standard_normal(4))


class TestSampleDiagGaussian:
    def test_zero_variance_returns_mean_copies(self):
        out = sample_diag_gaussian([3.0], [0.0], 5, SeededRng(1))
        assert out.shape == (5, 1)
        assert np.array_equal(out, np.full((5, 1), 3.0))

    def test_standard_normal_moments(self):
        out = sample_diag_gaussian([0.0], [1.0], 100_000, SeededRng(2))
        assert abs(out.mean()) <= 0.02
        assert abs(out.var() - 1.0) <= 0.05

    def test_per_channel_std(self):
        out = sample_diag_gaussian([1.0, 2.0], [4.0, 9.0], 100_000, SeededRng(3))
        std = out.std(axis=0)
        assert np.all(np.abs(std - [2.0, 3.0]) <= 0.02 * np.array([2.0, 3.0]))

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            sample_diag_gaussian([0.0], [-1.0], 3, SeededRng(1))

    def test_three_sigma_mean_bound(self):
        # |empirical mean - mean| <= 3 sqrt(var/n) per channel in >= 99% of trials
        n = 10_000
        var = np.array([0.5, 2.0, 7.0])
        mean = np.array([-1.0, 0.0, 3.0])
        bound = 3.0 * np.sqrt(var / n)
        checks = 0
        fails = 0
        for trial in range(200):
            out = sample_diag_gaussian(mean, var, n, SeededRng(50, trial))
            err = np.abs(out.mean(axis=0) - mean)
            fails += int((err > bound).sum())
            checks += 3
        assert fails / checks <= 0.01


class TestFiniteDiffGradient:
    def test_quadratic(self):
        g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        g = finite_diff_gradient(lambda x: 4.2, np.array([1.0, -2.0, 0.5]))
        assert np.array_equal(g, np.zeros(3))

    def test_bilinear(self):
        g = finite_diff_gradient(lambda x: float(x[0] * x[1]), np.array([2.0, 5.0]), 1e-5)
        assert g == pytest.approx([5.0, 2.0], abs=1e-6)

    def test_nonfinite_reports_coordinate(self):
        def f(x):
            with np.errstate(invalid="ignore"):
                return float(np.log(x[1]))
        with pytest.raises(NonFiniteError, match="coordinate 1"):
            finite_diff_gradient(f, np.array([1.0, 1e-9]), 1e-5)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda x: 0.0, np.array([1.0]), 0.0)
