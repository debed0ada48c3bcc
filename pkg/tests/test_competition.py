import numpy as np
import pytest

from spelke.competition import (
    ObjectAnchor,
    compete,
    compute_masks,
    labels_from_masks,
    make_anchor,
    run_competition,
    soft_jaccard,
)


def _block_plateau(labels, q=8):
    """One-hot plateau: every pixel of block k holds basis vector k."""
    return np.eye(q)[labels]


def _anchor(mask):
    mask = np.asarray(mask, dtype=float)
    return ObjectAnchor((0, 0), np.zeros(1), mask, True)


def test_soft_jaccard_closed_form():
    a = np.array([1.0, 0.5, 0.0])
    b = np.array([0.5, 0.5, 1.0])
    assert soft_jaccard(a, b) == pytest.approx((0.5 + 0.5 + 0) / (1 + 0.5 + 1))
    assert soft_jaccard(np.zeros(3), np.zeros(3)) == 0


def test_masks_are_clamped_dot_products():
    h = np.random.default_rng(0).normal(size=(4, 5, 3))
    a = make_anchor(h, (1, 2))
    compute_masks(h, [a])
    expected = np.clip(h @ h[1, 2], 0, 1)
    assert np.allclose(a.mask, expected)


def test_compete_larger_mask_wins():
    big = _anchor([[1, 1, 1, 0]])
    small = _anchor([[1, 1, 0, 0]])
    compete([small, big])
    assert big.active and not small.active
    assert np.all(small.mask == 0)


def test_compete_tie_goes_to_lower_index():
    first = _anchor([[1, 1, 0]])
    second = _anchor([[1, 1, 0]])
    compete([first, second])
    assert first.active and not second.active


def test_compete_respects_theta():
    a = _anchor([[1, 1, 1, 1, 0, 0]])
    b = _anchor([[0, 0, 0, 1, 1, 1]])
    compete([a, b], theta=0.2)
    assert a.active and b.active
    compete([a, b], theta=0.1)
    assert a.active and not b.active


def test_labels_from_masks_threshold_and_panoptic():
    masks = np.array([[[0.9, 0.3, 0.0]], [[0.6, 0.4, 0.7]]])
    labels, kept = labels_from_masks(masks)
    assert labels.tolist() == [[1, 0, 2]]
    assert kept.tolist() == [0, 1]
    labels, kept = labels_from_masks(np.array([[[0.1, 0.2]], [[0.9, 0.8]]]))
    assert labels.tolist() == [[1, 1]]  # compacted
    assert kept.tolist() == [1]


def test_competition_recovers_one_hot_blocks():
    labels = np.zeros((8, 8), dtype=int)
    labels[:, 4:] = 1
    labels[5:, :] = 2
    for seed in range(5):
        pred, masks = run_competition(_block_plateau(labels), k_max=8, rounds=3, seed=seed)
        # same partition, arbitrary label order
        pairs = set(zip(labels.ravel().tolist(), pred.ravel().tolist()))
        assert len(pairs) == 3 and len({p for _, p in pairs}) == 3
        assert masks.shape == (3, 8, 8)


def test_competition_zero_plateau_is_background():
    pred, masks = run_competition(np.zeros((4, 4, 3)), k_max=4, seed=0)
    assert np.all(pred == 0)
    assert masks.shape[0] == 0


def test_competition_validation_and_determinism():
    h = _block_plateau(np.arange(16).reshape(4, 4) % 3)
    a, _ = run_competition(h, k_max=40, seed=3)  # more anchors than pixels
    b, _ = run_competition(h, k_max=40, seed=3)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        run_competition(h, k_max=0)
    with pytest.raises(ValueError):
        run_competition(h, rounds=0)
