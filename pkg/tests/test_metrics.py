import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maxico.data import generate_synthetic, split_semi
from maxico.metrics import (
    dice_score,
    evaluate,
    miou_score,
    per_class_dice,
    per_class_iou,
)
from maxico.model import FusionSegNet


def test_perfect_and_disjoint():
    t = np.zeros((4, 4), int)
    t[:2] = 1
    assert dice_score(t, t) == 1.0 and miou_score(t, t) == 1.0
    assert dice_score(1 - t, t) == 0.0


def test_half_overlap():
    t = np.zeros((4, 4), int)
    t[:, :2] = 1
    p = np.zeros((4, 4), int)
    p[:, 1:3] = 1
    assert dice_score(p, t) == 0.5
    assert abs(miou_score(p, t) - 1 / 3) < 1e-15


def test_empty_empty_scores_one():
    z = np.zeros((3, 3), int)
    assert dice_score(z, z) == 1.0 and miou_score(z, z) == 1.0
    assert per_class_dice(z, z, 3)[2] == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        miou_score(np.zeros((2, 2)), np.zeros((3, 2)))


def test_iou_dice_identity_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.integers(0, 3, (8, 8))
        t = rng.integers(0, 3, (8, 8))
        d, j = per_class_dice(p, t, 3), per_class_iou(p, t, 3)
        assert np.all(np.abs(j - d / (2 - d)) < 1e-10)


@settings(max_examples=100, deadline=None)
@given(p=arrays(np.int64, (5, 5), elements=st.integers(0, 1)),
       t=arrays(np.int64, (5, 5), elements=st.integers(0, 1)),
       seed=st.integers(0, 1000))
def test_metric_invariances(p, t, seed):
    d, j = dice_score(p, t), miou_score(p, t)
    assert 0 <= j <= d <= 1
    perm = np.random.default_rng(seed).permutation(25)
    assert dice_score(p.flat[perm], t.flat[perm]) == d
    assert miou_score(p.flat[perm], t.flat[perm]) == j
    for flip in (np.fliplr, np.flipud, np.rot90):
        assert dice_score(flip(p), flip(t)) == d


def test_published_pair_roughly_consistent():
    # 80.60 Dice vs 67.66 mIoU: the per-class identity only holds approximately
    # once scores are averaged over images
    d = 0.8060
    assert abs(100 * d / (2 - d) - 67.66) < 1.0
    assert abs(100 * d / (2 - d) - 67.66) > 1e-3


def test_untrained_model_near_all_foreground_baseline():
    ds = generate_synthetic(40, seed=0)
    baseline = 100 * np.mean([dice_score(np.ones_like(s.mask), s.mask) for s in ds])
    scores = [evaluate(FusionSegNet(seed=seed), ds).dice_percent for seed in range(5)]
    assert abs(np.median(scores) - baseline) < 5


def test_evaluate_report_and_errors(small_dataset, tmp_path):
    model = FusionSegNet(seed=0)
    a = evaluate(model, small_dataset[:4], fingerprint="abc", seed=2)
    b = evaluate(model, small_dataset[:4], fingerprint="abc", seed=2)
    assert a.as_dict() == b.as_dict()
    assert a.beta == 0.5 and 0 <= a.miou_percent <= a.dice_percent <= 100
    assert len(a.per_sample) == 4
    a.save(tmp_path)
    text = (tmp_path / "eval.txt").read_text()
    assert "fingerprint = abc" in text and "dice_percent" in text
    assert len((tmp_path / "eval_samples.csv").read_text().splitlines()) == 5

    _, unlabeled = split_semi(small_dataset, 0.5, seed=0)
    with pytest.raises(ValueError, match="masks"):
        evaluate(model, unlabeled)
    with pytest.raises(ValueError):
        evaluate(model, [])
