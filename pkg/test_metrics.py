import json

import numpy as np
import pytest

from dglab.datagen import generate_phantom
from dglab.errors import ConfigurationError
from dglab.metrics import (
    ConfusionCounts,
    MetricsReport,
    binarize,
    compute_metrics,
    confusion,
    evaluate_cases,
    vs_sizes,
)


def loop_confusion(pred: np.ndarray, gt: np.ndarray):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_perfect_prediction_counts():
    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt.ravel()[:10] = 1
    assert confusion(gt, gt) == ConfusionCounts(10, 0, 0, 502)
    assert confusion(np.zeros_like(gt), gt) == ConfusionCounts(0, 0, 10, 502)


def test_confusion_matches_voxel_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred = (rng.uniform(size=(8, 8, 8)) < rng.uniform()).astype(np.uint8)
        gt = (rng.uniform(size=(8, 8, 8)) < rng.uniform()).astype(np.uint8)
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == loop_confusion(pred, gt)
        assert c.total == 512


def test_confusion_rejects_bad_masks():
    with pytest.raises(ConfigurationError):
        confusion(np.full((4, 4, 4), 2), np.zeros((4, 4, 4)))
    with pytest.raises(ConfigurationError):
        confusion(np.zeros((4, 4, 4)), np.zeros((4, 4, 2)))


def test_worked_example():
    m = compute_metrics(ConfusionCounts(8, 2, 2, 100))
    assert m.dsc == pytest.approx(0.8)
    assert m.sen == pytest.approx(0.8)
    assert m.jac == pytest.approx(2 / 3)
    assert m.vs == 1.0


def test_perfect_and_empty_cases():
    perfect = compute_metrics(ConfusionCounts(5, 0, 0, 10))
    assert (perfect.dsc, perfect.sen, perfect.jac, perfect.vs) == (1.0, 1.0, 1.0, 1.0)
    both_empty = compute_metrics(ConfusionCounts(0, 0, 0, 64))
    assert (both_empty.dsc, both_empty.sen, both_empty.jac, both_empty.vs) == (1.0, 1.0, 1.0, 1.0)
    missed = compute_metrics(ConfusionCounts(0, 0, 7, 57))
    assert (missed.dsc, missed.sen, missed.jac, missed.vs) == (0.0, 0.0, 0.0, 0.0)


def test_dice_jaccard_identity_and_vs_forms():
    rng = np.random.default_rng(1)
    for _ in range(200):
        tp, fp, fn = (int(v) for v in rng.integers(0, 50, size=3))
        c = ConfusionCounts(tp, fp, fn, 10)
        m = compute_metrics(c)
        assert m.dsc == pytest.approx(2 * m.jac / (1 + m.jac), abs=1e-12)
        assert m.vs == pytest.approx(vs_sizes(tp + fp, tp + fn), abs=1e-12)
        for value in (m.dsc, m.sen, m.jac, m.vs):
            assert 0.0 <= value <= 1.0


def test_binarize_threshold_is_inclusive():
    assert binarize(np.array([0.49, 0.5, 0.9])).tolist() == [0, 1, 1]


def test_evaluate_with_ground_truth_oracle(tmp_path):
    samples = [generate_phantom(seed, (16, 16, 16), (2, 2)) for seed in range(3)]
    lookup = {s.image.data.tobytes(): s.mask.data.astype(np.float32) for s in samples}
    assert len(lookup) == 3

    report = evaluate_cases(lambda batch: lookup[batch[0].tobytes()][np.newaxis], samples, label="oracle")
    mean = report.mean()
    assert mean == {"dsc": 1.0, "sen": 1.0, "jac": 1.0, "vs": 1.0}

    path = report.write_json(str(tmp_path / "metrics.json"))
    with open(path, encoding="utf-8") as f:
        saved = json.load(f)
    assert saved["label"] == "oracle"
    assert len(saved["cases"]) == 3
    assert report.format_table().splitlines()[-1].split() == ["mean", "100.00", "100.00", "100.00", "100.00"]


def test_empty_report_mean_is_nan():
    assert all(np.isnan(v) for v in MetricsReport().mean().values())


def test_swapping_prediction_and_truth():
    rng = np.random.default_rng(4)
    for _ in range(100):
        pred = (rng.uniform(size=(8, 8, 8)) < 0.3).astype(np.uint8)
        gt = (rng.uniform(size=(8, 8, 8)) < 0.2).astype(np.uint8)
        forward, swapped = compute_metrics(confusion(pred, gt)), compute_metrics(confusion(gt, pred))
        assert swapped.dsc == forward.dsc
        assert swapped.jac == forward.jac
        assert swapped.vs == forward.vs

    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt.ravel()[:5] = 1
    pred = np.zeros_like(gt)
    pred.ravel()[:10] = 1
    assert compute_metrics(confusion(pred, gt)).sen == 1.0
    assert compute_metrics(confusion(gt, pred)).sen == 0.5
