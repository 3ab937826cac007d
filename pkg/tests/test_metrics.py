import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcal.metrics import accuracy, classification_metrics, ece, nll_classification, nll_gaussian, rmse


class TestNll:
    def test_classification_examples(self):
        assert nll_classification(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-15)
        assert nll_classification(np.full((4, 10), 0.1), [0, 3, 5, 9]) == pytest.approx(np.log(10))
        assert nll_classification(np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1]) == pytest.approx(np.log(2))

    def test_zero_probability_is_floored(self):
        assert nll_classification(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-np.log(1e-12))

    def test_gaussian_examples(self):
        assert nll_gaussian([0.0], [1 / (2 * np.pi)], [0.0]) == pytest.approx(0.0, abs=1e-15)
        assert nll_gaussian([2.0], [1.0], [2.0]) == pytest.approx(0.9189385, abs=1e-7)
        assert nll_gaussian([0.0], [1.0], [1.0]) == pytest.approx(1.4189385, abs=1e-7)


class TestEce:
    def test_confident_and_correct(self):
        assert ece(np.eye(4), [0, 1, 2, 3]) == 0.0

    def test_single_bin(self):
        probs = np.tile([0.8, 0.2], (10, 1))
        labels = np.array([0] * 6 + [1] * 4)
        assert ece(probs, labels) == pytest.approx(0.2)

    def test_perfectly_calibrated(self):
        probs = np.tile([0.75, 0.25], (8, 1))
        assert ece(probs, [0, 0, 0, 1, 0, 0, 0, 1]) == pytest.approx(0.0, abs=1e-15)

    def test_right_closed_bins(self):
        # 0.6 is the upper edge of bin (8/15, 9/15]; both points share it
        probs = np.array([[0.6, 0.4], [0.6 - 1e-12, 0.4 + 1e-12]])
        assert ece(probs, [0, 1]) == pytest.approx(abs(0.5 - 0.6), abs=1e-11)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 6))
    @settings(max_examples=40, deadline=None)
    def test_properties(self, seed, k):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(k), 60)
        labels = rng.integers(0, k, 60)
        e = ece(probs, labels)
        assert 0.0 <= e <= 1.0
        perm = rng.permutation(60)
        assert ece(probs[perm], labels[perm]) == pytest.approx(e, abs=1e-12)
        one = ece(probs, labels, n_bins=1)
        assert one == pytest.approx(abs(accuracy(probs, labels) - probs.max(1).mean()), abs=1e-12)
        assert nll_classification(probs, labels) >= 0


class TestAccuracyRmse:
    def test_examples(self):
        assert accuracy(np.eye(3), [0, 1, 2]) == 1.0
        assert accuracy(np.eye(3), [1, 2, 0]) == 0.0
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))

    def test_ties_go_to_lowest_index(self):
        assert accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0

    def test_bundle(self):
        m = classification_metrics(np.eye(2), [0, 1])
        assert set(m) == {"nll", "ece", "accuracy"}

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            nll_classification(np.eye(2), [0, 1, 1])
