import numpy as np
import pytest

from ltreweight.evaluation import confusion, epsilon_summary, per_class_accuracy, top_k_error, true_label_rank


def test_perfect_predictions():
    logits = np.eye(4) * 5
    labels = np.arange(4)
    assert top_k_error(logits, labels, 1) == 0.0
    cm = confusion(logits, labels)
    np.testing.assert_array_equal(cm, np.eye(4, dtype=int))
    np.testing.assert_array_equal(per_class_accuracy(cm), np.ones(4))


def test_top_k_with_k_equal_classes_is_zero():
    logits = np.random.default_rng(0).normal(size=(20, 5))
    assert top_k_error(logits, np.random.default_rng(1).integers(0, 5, 20), 5) == 0.0


def test_ranks_first_second_fourth():
    logits = np.array([
        [9.0, 1.0, 2.0, 3.0],  # label 0 ranked first
        [3.0, 9.0, 1.0, 2.0],  # label 0 ranked second
        [1.0, 4.0, 3.0, 2.0],  # label 0 ranked fourth
    ])
    labels = np.zeros(3, dtype=int)
    np.testing.assert_array_equal(true_label_rank(logits, labels), [0, 1, 3])
    assert top_k_error(logits, labels, 3) == pytest.approx(1 / 3)


def test_ties_go_to_lower_index():
    logits = np.zeros((2, 3))
    assert top_k_error(logits, [0, 2], 1) == 0.5
    np.testing.assert_array_equal(confusion(logits, [0, 2])[:, 0], [1, 0, 1])


def test_constant_predictor_fills_one_column():
    logits = np.tile([0.0, 3.0, 1.0], (6, 1))
    cm = confusion(logits, [0, 1, 2, 0, 1, 2])
    assert np.count_nonzero(cm.sum(axis=0)) == 1 and cm[:, 1].sum() == 6


def test_top1_equals_one_minus_trace_fraction_and_monotone_in_k():
    rng = np.random.default_rng(3)
    logits, labels = rng.normal(size=(200, 6)), rng.integers(0, 6, 200)
    cm = confusion(logits, labels, 6)
    assert top_k_error(logits, labels, 1) == 1 - np.trace(cm) / 200
    errors = [top_k_error(logits, labels, k) for k in range(1, 7)]
    assert all(a >= b for a, b in zip(errors, errors[1:]))


def test_top_k_range_errors():
    with pytest.raises(ValueError, match="k must"):
        top_k_error(np.zeros((2, 3)), [0, 1], 0)
    with pytest.raises(ValueError, match="k must"):
        top_k_error(np.zeros((2, 3)), [0, 1], 4)


def test_per_class_accuracy_absent_class_is_nan():
    cm = np.array([[2, 0], [0, 0]])
    acc = per_class_accuracy(cm)
    assert acc[0] == 1.0 and np.isnan(acc[1])


def test_epsilon_summary_matches_brute_force():
    rng = np.random.default_rng(4)
    log = [(e, rng.integers(0, 3, 8), rng.normal(size=8)) for e in (0, 0, 1, 1, 1)]
    out = epsilon_summary(log, 3)
    for epoch in (0, 1):
        labels = np.concatenate([l for e, l, _ in log if e == epoch])
        eps = np.concatenate([v for e, _, v in log if e == epoch])
        for c in range(3):
            assert out[epoch][c] == pytest.approx(eps[labels == c].mean(), rel=1e-14)


def test_epsilon_summary_trivial_cases():
    zeros = epsilon_summary([(0, [0, 1], [0.0, 0.0])], 2)
    np.testing.assert_array_equal(zeros[0], [0.0, 0.0])
    single = epsilon_summary([(0, [0, 0], [1.0, 3.0]), (1, [0], [5.0])], 1)
    assert list(single) == [0, 1] and single[0].tolist() == [2.0] and single[1].tolist() == [5.0]
    assert np.isnan(epsilon_summary([(0, [0], [1.0])], 2)[0][1])
