"""Metric oracles and task-net contracts (cheap parts; training is exercised
by the acceptance pipeline)."""

import numpy as np
import pytest

from condadapt import tasks
from condadapt.errors import ContractError
from condadapt.rng import Rng


def miou_counting_oracle(pred, gt, num_classes):
    """Exhaustive per-pixel counting, independent of the vectorized path."""
    ious = []
    for c in range(num_classes):
        inter = union = gt_pixels = 0
        for p, g in zip(np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)):
            if g == c:
                gt_pixels += 1
            if p == c and g == c:
                inter += 1
            if p == c or g == c:
                union += 1
        if gt_pixels:
            ious.append(inter / union)
    return sum(ious) / len(ious)


class TestMiou:
    def test_perfect_prediction(self):
        m = Rng(1).integers(16, 5).reshape(4, 4)
        assert tasks.miou(m, m, 5) == 1.0

    def test_disjoint_single_class(self):
        pred = np.zeros((4, 4), dtype=np.int64)
        gt = np.ones((4, 4), dtype=np.int64)
        assert tasks.miou(pred, gt, 2) == 0.0

    def test_handcrafted_two_class_case(self):
        pred = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1]])
        gt = np.array([[0, 0, 1, 1], [0, 1, 1, 1], [0, 0, 1, 0], [1, 1, 0, 0]])
        expected = miou_counting_oracle(pred, gt, 2)
        assert tasks.miou(pred, gt, 2) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_cases_match_counting_oracle(self, seed):
        rng = Rng(50 + seed)
        pred = rng.integers(36, 4).reshape(6, 6)
        gt = rng.integers(36, 4).reshape(6, 6)
        assert tasks.miou(pred, gt, 4) == pytest.approx(miou_counting_oracle(pred, gt, 4), abs=1e-12)

    def test_absent_class_excluded_from_mean(self):
        gt = np.zeros((3, 3), dtype=np.int64)  # only class 0 present
        pred = np.zeros((3, 3), dtype=np.int64)
        pred[0, 0] = 1
        # IOU(class 0) = 8/9; class 1 absent from gt, excluded
        assert tasks.miou(pred, gt, 2) == pytest.approx(8 / 9)

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ContractError):
            tasks.miou(np.array([[5]]), np.array([[0]]), 5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            tasks.miou(np.zeros((2, 2), dtype=int), np.zeros((3, 3), dtype=int), 2)

    def test_bounds(self):
        rng = Rng(9)
        for trial in range(10):
            pred = rng.integers(25, 3).reshape(5, 5)
            gt = rng.integers(25, 3).reshape(5, 5)
            assert 0.0 <= tasks.miou(pred, gt, 3) <= 1.0


class TestPrAuc:
    def test_three_point_hand_integration(self):
        # points sorted by recall: (0.0, 1.0), (0.5, 0.8), (1.0, 0.6)
        recalls = np.array([0.0, 0.5, 1.0])
        precisions = np.array([1.0, 0.8, 0.6])
        # trapezoid: 0.5*(1.0+0.8)/2 + 0.5*(0.8+0.6)/2 = 0.45 + 0.35
        assert tasks.pr_auc(recalls, precisions) == pytest.approx(0.8)

    def test_unsorted_input_is_sorted_by_recall(self):
        assert tasks.pr_auc(np.array([1.0, 0.0]), np.array([0.5, 1.0])) == pytest.approx(0.75)


class TestEvaluateRetrieval:
    def _descs(self, n, d, seed):
        return Rng(seed).normal((n, d))

    def test_self_match_auc_one(self):
        desc = self._descs(20, 8, 3)
        places = np.arange(20) % 5
        result = tasks.evaluate_retrieval(desc, places, desc, places)
        assert result.auc == pytest.approx(1.0)
        assert result.top1 == 1.0
        assert np.allclose(result.distances, 0.0)

    def test_random_descriptors_near_chance(self):
        # Monte-Carlo oracle over 10 seeds: 32 places, random 16-d descriptors
        aucs = []
        for seed in range(10):
            rng = Rng(200 + seed)
            q = rng.normal((64, 16))
            db = rng.normal((64, 16))
            q_places = rng.integers(64, 32)
            db_places = rng.integers(64, 32)
            aucs.append(tasks.evaluate_retrieval(q, q_places, db, db_places).auc)
        assert float(np.mean(aucs)) < 0.2

    def test_identical_image_distance_zero(self):
        d = self._descs(1, 8, 5)
        result = tasks.evaluate_retrieval(d, np.array([3]), d, np.array([3]))
        assert result.distances[0] == 0.0
        assert result.correct[0]

    def test_pr_counts_against_hand_computation(self):
        # 3 queries with nearest distances 1, 2, 3; correctness T, F, T
        q = np.array([[0.0], [10.0], [20.0]])
        db = np.array([[1.0], [8.0], [23.0]])
        q_places = np.array([0, 1, 2])
        db_places = np.array([0, 9, 2])
        result = tasks.evaluate_retrieval(q, q_places, db, db_places)
        # thresholds 1, 2, 3 -> precision 1, 1/2, 2/3; recall 1/3, 1/3, 2/3
        np.testing.assert_allclose(result.precisions, [1.0, 1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(result.recalls, [0.0, 1 / 3, 1 / 3, 2 / 3])
        expected_auc = tasks.pr_auc(result.recalls, result.precisions)
        assert result.auc == pytest.approx(expected_auc)

    def test_auc_monotone_under_better_ranking(self):
        # same correctness flags, but the correct matches move closer
        q_places = np.array([0, 1, 2, 3])
        db_places = np.array([0, 1, 9, 9])
        q_good = np.array([[0.0], [0.1], [5.0], [5.1]])
        db_good = np.array([[0.05], [0.12], [9.0], [9.2]])
        good = tasks.evaluate_retrieval(q_good, q_places, db_good, db_places).auc
        q_bad = np.array([[0.0], [9.0], [5.0], [5.1]])
        db_bad = np.array([[8.0], [9.1], [5.05], [5.12]])
        bad = tasks.evaluate_retrieval(q_bad, q_places, db_bad, db_places).auc
        assert good > bad

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractError):
            tasks.evaluate_retrieval(np.zeros((2, 3)), [0, 1], np.zeros((2, 4)), [0, 1])


class TestDatasetMiou:
    def test_aggregates_counts_not_means(self):
        # image A perfect on class 0; image B half wrong; global pools pixels
        pred = np.stack([np.zeros((2, 2), dtype=int), np.array([[0, 0], [1, 1]])])
        gt = np.stack([np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int)])
        # class 0: inter 6, union 8 -> 0.75; class 1 absent from gt
        assert tasks.dataset_miou(pred, gt, 2) == pytest.approx(0.75)
