import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfseg.metrics import classification_accuracy, confusion_matrix, mean_iou


def iou_oracle(preds, gts, num_labels):
    """Enumerate pixels one by one into a confusion table; no numpy reductions."""
    table = [[0] * num_labels for _ in range(num_labels)]
    for p, g in zip(preds, gts):
        for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
            table[b][a] += 1
    ious = []
    for c in range(num_labels):
        tp = table[c][c]
        fp = sum(table[r][c] for r in range(num_labels)) - tp
        fn = sum(table[c]) - tp
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


def test_hand_case():
    miou, iou = mean_iou(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 1]]), 2)
    assert iou[0] == 0.5 and iou[1] == pytest.approx(2 / 3, abs=1e-15)
    assert miou == pytest.approx(0.5833, abs=1e-4)


def test_identical_maps():
    m = np.random.default_rng(0).integers(0, 4, size=(5, 5))
    assert mean_iou(m, m, 4)[0] == 1.0


def test_disjoint_foregrounds():
    pred = np.ones((2, 2), dtype=int)
    gt = np.full((2, 2), 2)
    miou, iou = mean_iou(pred, gt, 3)
    assert miou == 0.0 and iou[1] == 0 and iou[2] == 0 and np.isnan(iou[0])


def test_extent_mismatch_and_range():
    with pytest.raises(ValueError):
        mean_iou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ValueError):
        mean_iou(np.full((2, 2), 2), np.zeros((2, 2), int), 2)


@pytest.mark.parametrize("seed", range(100))
def test_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(seed)
    nl = int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    pred, gt = rng.integers(0, nl, size=(h, w)), rng.integers(0, nl, size=(h, w))
    assert mean_iou(pred, gt, nl)[0] == iou_oracle([pred], [gt], nl)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_split_accumulation_equals_concatenation(seed, n):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 3, size=(int(rng.integers(1, 6)), 4)) for _ in range(n)]
    gts = [rng.integers(0, 3, size=p.shape) for p in preds]
    split = mean_iou(preds, gts, 3)
    cat = mean_iou(np.concatenate(preds), np.concatenate(gts), 3)
    assert split[0] == cat[0]
    np.testing.assert_array_equal(split[1], cat[1])
    order = rng.permutation(n)
    assert mean_iou([preds[i] for i in order], [gts[i] for i in order], 3)[0] == split[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_class_permutation_symmetry(seed, perm):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 4, size=(6, 6)), rng.integers(0, 4, size=(6, 6))
    lut = np.array(perm)
    assert mean_iou(lut[pred], lut[gt], 4)[0] == pytest.approx(mean_iou(pred, gt, 4)[0], abs=1e-15)


def test_confusion_indexing():
    c = confusion_matrix(np.array([1, 1, 0]), np.array([0, 1, 0]), 2)
    np.testing.assert_array_equal(c, [[1, 1], [0, 1]])


# --- accuracy -----------------------------------------------------------------------


def test_accuracy_examples():
    t = np.array([[1, 0, 1], [0, 0, 1]], dtype=float)
    assert classification_accuracy(np.where(t > 0, 50.0, -50.0), t) == 1.0
    assert classification_accuracy(np.zeros_like(t), t) == pytest.approx((t == 0).mean())


def test_accuracy_random_2x3_enumeration():
    rng = np.random.default_rng(0)
    logits, t = rng.normal(size=(2, 3)), rng.integers(0, 2, size=(2, 3))
    hits = [(1 / (1 + np.exp(-logits[i, j])) > 0.5) == bool(t[i, j]) for i, j in itertools.product(range(2), range(3))]
    assert classification_accuracy(logits, t) == sum(hits) / 6
    rows = [all((1 / (1 + np.exp(-logits[i, j])) > 0.5) == bool(t[i, j]) for j in range(3)) for i in range(2)]
    assert classification_accuracy(logits, t, mode="subset") == sum(rows) / 2


def test_accuracy_rejects_bad_threshold():
    with pytest.raises(ValueError):
        classification_accuracy(np.zeros((1, 1)), np.zeros((1, 1)), threshold=1.0)
