import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from py_oce_seg.core import metrics
from py_oce_seg.core.utils.helpers import PreconditionError


@pytest.fixture
def toy_dataset():
    """Three images: one perfect hit, two missed objects, one false detection."""
    hit = np.zeros((6, 6), dtype=np.int32)
    hit[1:4, 1:4] = 1
    missed = np.zeros((6, 6), dtype=np.int32)
    missed[0:2, 0:2] = 1
    missed[4:6, 4:6] = 2
    spurious = np.zeros((6, 6), dtype=np.int32)
    spurious[2:5, 2:5] = 3
    gts = [hit, missed, np.zeros((6, 6), dtype=np.int32)]
    preds = [hit.copy(), np.zeros((6, 6), dtype=np.int32), spurious]
    return gts, preds


def _random_rectangles(rng: np.random.Generator, shape=(12, 12), count=4) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int32)
    for instance in range(1, count + 1):
        top, left = rng.integers(0, shape[0] - 2), rng.integers(0, shape[1] - 2)
        height, width = rng.integers(2, 6, size=2)
        labels[top:top + height, left:left + width] = instance
    return labels


def _optimal_matches(table: metrics.IouTable, threshold: float) -> set[tuple[int, int]]:
    admissible = table.iou >= threshold
    if not admissible.size:
        return set()
    rows, cols = linear_sum_assignment(admissible.astype(np.float64), maximize=True)
    return {(int(table.gt_ids[r]), int(table.pred_ids[c])) for r, c in zip(rows, cols) if admissible[r, c]}


def test_iou_identical_and_disjoint():
    gt = np.array([[0, 1], [1, 0]])
    assert metrics.iou_matrix(gt, gt).iou.tolist() == [[1.0]]
    assert metrics.iou_matrix(gt, np.array([[2, 0], [0, 2]])).iou.tolist() == [[0.0]]


def test_iou_one_third():
    gt = np.array([[1, 1, 0]])
    pred = np.array([[0, 5, 5]])
    table = metrics.iou_matrix(gt, pred)
    assert table.iou[0, 0] == pytest.approx(1 / 3)
    assert table.overlap.tolist() == [[1]]
    assert table.gt_sizes.tolist() == [2]


def test_iou_shape_mismatch():
    with pytest.raises(PreconditionError):
        metrics.iou_matrix(np.zeros((2, 2)), np.zeros((3, 3)))


def test_match_perfect_and_empty(toy_dataset):
    gts, preds = toy_dataset
    perfect = metrics.match_at_threshold(gts[1], gts[1], 0.5)
    assert (perfect.tp, perfect.fp, perfect.fn) == (2, 0, 0)
    empty = metrics.match_at_threshold(gts[1], preds[1], 0.5)
    assert (empty.tp, empty.fp, empty.fn) == (0, 0, 2)


def test_match_one_of_two():
    gt = np.zeros((10, 10), dtype=np.int32)
    gt[0:5, 0:2] = 1
    gt[6:10, 6:10] = 2
    pred = np.zeros_like(gt)
    pred[0:4, 0:2] = 7
    pred[6:7, 0:10] = 8
    match = metrics.match_at_threshold(gt, pred, 0.5)
    assert (match.tp, match.fp, match.fn) == (1, 1, 1)
    assert match.pairs == [(1, 7, pytest.approx(0.8))]


def test_match_rejects_bad_threshold():
    with pytest.raises(PreconditionError):
        metrics.match_at_threshold(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)


def test_detection_scores_formulas():
    scores = metrics.scores_from_counts(1, 1, 1)
    assert scores.f1 == pytest.approx(0.5)
    assert scores.recall == pytest.approx(0.5)
    assert scores.precision == pytest.approx(0.5)
    assert scores.accuracy == pytest.approx(1 / 3)
    assert metrics.scores_from_counts(0, 3, 2).as_dict() == {"f1": 0.0, "recall": 0.0, "precision": 0.0,
                                                             "accuracy": 0.0}
    assert metrics.scores_from_counts(4, 0, 0).as_dict() == {"f1": 1.0, "recall": 1.0, "precision": 1.0,
                                                             "accuracy": 1.0}


def test_seg_perfect():
    gt = np.zeros((5, 5), dtype=np.int32)
    gt[1:3, 1:3] = 1
    gt[3:5, 3:5] = 2
    assert metrics.seg_score(gt, gt) == 1.0


def test_seg_majority_overlap():
    gt = np.array([[1, 1, 1, 1, 0]])
    pred = np.array([[0, 2, 2, 2, 2]])
    assert metrics.seg_score(gt, pred) == pytest.approx(0.6)


def test_seg_exactly_half_is_unmatched():
    gt = np.array([[1, 1, 1, 1]])
    pred = np.array([[3, 3, 0, 0]])
    assert metrics.seg_score(gt, pred) == 0.0


def test_seg_needs_ground_truth():
    with pytest.raises(PreconditionError):
        metrics.seg_score(np.zeros((3, 3), dtype=np.int32), np.ones((3, 3), dtype=np.int32))


@pytest.mark.parametrize("seed", range(30))
def test_greedy_matching_is_optimal_above_half(seed):
    rng = np.random.default_rng(seed)
    gt = _random_rectangles(rng)
    pred = np.roll(gt, rng.integers(-1, 2, size=2), axis=(0, 1))
    pred[_random_rectangles(rng, count=2) > 0] = 9
    table = metrics.iou_matrix(gt, pred)
    for threshold in (0.51, 0.6, 0.75, 0.9):
        match = metrics.match_at_threshold(gt, pred, threshold, table)
        assert {(g, p) for g, p, _ in match.pairs} == _optimal_matches(table, threshold)


@pytest.mark.parametrize("seed", range(10))
def test_scores_ignore_instance_ids(seed):
    rng = np.random.default_rng(seed)
    gt = _random_rectangles(rng)
    pred = np.roll(gt, 1, axis=1)
    permutation = np.concatenate([[0], rng.permutation(np.arange(1, 5)) + 10])
    renamed = permutation[pred]
    for threshold in (0.5, 0.7):
        original = metrics.detection_scores(metrics.match_at_threshold(gt, pred, threshold))
        shuffled = metrics.detection_scores(metrics.match_at_threshold(gt, renamed, threshold))
        assert original == shuffled
    if (gt > 0).any():
        assert metrics.seg_score(gt, pred) == pytest.approx(metrics.seg_score(gt, renamed))
        assert metrics.seg_score(permutation[gt], pred) == pytest.approx(metrics.seg_score(gt, pred))


def test_sweep_single_image_reproduces_detection_scores(toy_dataset):
    gts, preds = toy_dataset
    rows = metrics.threshold_sweep([gts[0]], [preds[0]], [0.5, 0.9])
    for row in rows:
        assert row.scores == metrics.detection_scores(metrics.match_at_threshold(gts[0], preds[0], row.threshold))


def test_sweep_toy_dataset(toy_dataset):
    gts, preds = toy_dataset
    (row,) = metrics.threshold_sweep(gts, preds, [0.5])
    assert (row.tp, row.fp, row.fn) == (1, 1, 2)
    assert row.scores.recall == pytest.approx(1 / 3)
    assert row.scores.precision == pytest.approx(1 / 2)
    assert row.scores.f1 == pytest.approx(0.4)
    assert row.scores.accuracy == pytest.approx(1 / 4)


def test_sweep_per_image_averages(toy_dataset):
    gts, preds = toy_dataset
    (row,) = metrics.threshold_sweep(gts, preds, [0.5], per_image=True)
    assert row.scores.f1 == pytest.approx(1 / 3)
    assert row.scores.recall == pytest.approx(1 / 3)


@pytest.mark.parametrize("seed", range(10))
def test_sweep_is_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    gts = [_random_rectangles(rng) for _ in range(3)]
    preds = [np.roll(g, rng.integers(0, 2), axis=0) for g in gts]
    rows = metrics.threshold_sweep(gts, preds, [0.1, 0.3, 0.5, 0.7, 0.9])
    for name in metrics.DETECTION_METRICS:
        values = [getattr(r.scores, name) for r in rows]
        assert values == sorted(values, reverse=True)
        assert all(0 <= v <= 1 for v in values)


def test_sweep_rejects_bad_input(toy_dataset):
    gts, preds = toy_dataset
    with pytest.raises(PreconditionError):
        metrics.threshold_sweep(gts, preds, [])
    with pytest.raises(PreconditionError):
        metrics.threshold_sweep(gts, preds[:2], [0.5])


def test_dataset_seg_pools_objects(toy_dataset):
    gts, preds = toy_dataset
    # one perfect object, two missed ones
    assert metrics.dataset_seg(gts, preds) == pytest.approx(1 / 3)


def test_percentile_images():
    picks = metrics.percentile_images([0.9, 0.1, 0.5, 0.3])
    assert [(p, i) for p, i, _ in picks] == [(0, 1), (25, 1), (50, 3), (75, 2), (100, 0)]
    assert picks[-1][2] == 0.9
    with pytest.raises(PreconditionError):
        metrics.percentile_images([])


def test_report_format(toy_dataset):
    gts, preds = toy_dataset
    report = metrics.format_report(metrics.report_rows(gts, preds, [0.5]))
    lines = report.splitlines()
    assert lines[0] == metrics.REPORT_HEADER
    assert lines[1] == "f1\t0.5\t0.400000"
    assert lines[-1] == "seg\t-\t0.333333"
    assert len(lines) == 1 + len(metrics.DETECTION_METRICS) + 1
