"""Instance segmentation scores: IoU matching, detection scores and the SEG measure."""
import math
from dataclasses import dataclass, field

import numpy as np

from py_oce_seg.core.utils.helpers import PreconditionError

REPORT_HEADER = "metric\tthreshold\tvalue"
DETECTION_METRICS = ("f1", "recall", "precision", "accuracy")


@dataclass
class IouTable:
    """Overlaps between every ground-truth and predicted instance.

    Attributes:
        gt_ids: Sorted ground-truth ids (background excluded).
        pred_ids: Sorted predicted ids.
        overlap: Pixel intersections, shape (G, P).
        gt_sizes: Pixels per ground-truth instance.
        iou: Intersection over union, shape (G, P).
    """
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    overlap: np.ndarray
    gt_sizes: np.ndarray
    iou: np.ndarray


def iou_matrix(gt: np.ndarray, pred: np.ndarray) -> IouTable:
    if gt.shape != pred.shape:
        raise PreconditionError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    gt_ids = np.unique(gt[gt > 0])
    pred_ids = np.unique(pred[pred > 0])
    gt_index = np.searchsorted(np.concatenate([[0], gt_ids]), gt.ravel())
    pred_index = np.searchsorted(np.concatenate([[0], pred_ids]), pred.ravel())
    width = len(pred_ids) + 1
    joint = np.bincount(gt_index * width + pred_index, minlength=(len(gt_ids) + 1) * width)
    joint = joint.reshape(len(gt_ids) + 1, width)
    gt_sizes = joint.sum(axis=1)[1:]
    pred_sizes = joint.sum(axis=0)[1:]
    overlap = joint[1:, 1:]
    union = gt_sizes[:, None] + pred_sizes[None, :] - overlap
    iou = np.divide(overlap, union, out=np.zeros(overlap.shape), where=union > 0)
    return IouTable(gt_ids, pred_ids, overlap, gt_sizes, iou)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0


def match_at_threshold(
    gt: np.ndarray, pred: np.ndarray, threshold: float, table: IouTable | None = None
) -> MatchResult:
    """One-to-one matching of pairs with IoU >= threshold, greedily by descending IoU.

    Ties are broken by ground-truth id, then predicted id.
    """
    if not 0 < threshold <= 1:
        raise PreconditionError(f"IoU threshold must lie in (0, 1], got {threshold}")
    table = table or iou_matrix(gt, pred)
    gi, pi = np.nonzero(table.iou >= threshold)
    order = np.lexsort((table.pred_ids[pi], table.gt_ids[gi], -table.iou[gi, pi]))
    used_gt, used_pred = set(), set()
    pairs = []
    for k in order:
        g, p = gi[k], pi[k]
        if g in used_gt or p in used_pred:
            continue
        used_gt.add(g)
        used_pred.add(p)
        pairs.append((int(table.gt_ids[g]), int(table.pred_ids[p]), float(table.iou[g, p])))
    return MatchResult(pairs, len(pairs), len(table.pred_ids) - len(pairs), len(table.gt_ids) - len(pairs))


@dataclass(frozen=True)
class DetectionScores:
    f1: float
    recall: float
    precision: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in DETECTION_METRICS}


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def scores_from_counts(tp: int, fp: int, fn: int) -> DetectionScores:
    """Scores from match counts; an empty denominator yields 0."""
    recall = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    return DetectionScores(
        f1=_ratio(2 * precision * recall, precision + recall),
        recall=recall,
        precision=precision,
        accuracy=_ratio(tp, tp + fp + fn),
    )


def detection_scores(match: MatchResult) -> DetectionScores:
    return scores_from_counts(match.tp, match.fp, match.fn)


def seg_values(gt: np.ndarray, pred: np.ndarray, table: IouTable | None = None) -> np.ndarray:
    """Per ground-truth object IoU under the majority-overlap rule (0 when unmatched).

    An object matches the prediction covering strictly more than half of it.
    """
    table = table or iou_matrix(gt, pred)
    values = np.zeros(len(table.gt_ids))
    if table.overlap.size:
        best = table.overlap.argmax(axis=1)
        rows = np.arange(len(table.gt_ids))
        matched = 2 * table.overlap[rows, best] > table.gt_sizes
        values[matched] = table.iou[rows[matched], best[matched]]
    return values


def seg_score(gt: np.ndarray, pred: np.ndarray) -> float:
    """Mean matched IoU over all ground-truth objects.

    Raises:
        PreconditionError: The ground truth holds no object.
    """
    values = seg_values(gt, pred)
    if not len(values):
        raise PreconditionError("SEG is undefined without ground-truth objects")
    return float(values.mean())


def dataset_seg(gts: list[np.ndarray], preds: list[np.ndarray]) -> float:
    """SEG pooled over every ground-truth object of a dataset."""
    values = np.concatenate([seg_values(g, p) for g, p in zip(gts, preds)] or [np.zeros(0)])
    if not len(values):
        raise PreconditionError("SEG is undefined without ground-truth objects")
    return float(values.mean())


@dataclass
class SweepRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    scores: DetectionScores


def threshold_sweep(gts: list[np.ndarray], preds: list[np.ndarray], thresholds: list[float],
                    per_image: bool = False) -> list[SweepRow]:
    """Detection scores per IoU threshold.

    By default TP/FP/FN are summed over the dataset before scoring. With
    `per_image` every image is scored separately and the scores averaged.

    Raises:
        PreconditionError: No thresholds or mismatched set sizes.
    """
    if not thresholds:
        raise PreconditionError("threshold list is empty")
    if len(gts) != len(preds):
        raise PreconditionError(f"{len(gts)} ground-truth masks but {len(preds)} predictions")
    tables = [iou_matrix(g, p) for g, p in zip(gts, preds)]
    rows = []
    for threshold in thresholds:
        matches = [match_at_threshold(g, p, threshold, t) for g, p, t in zip(gts, preds, tables)]
        tp, fp, fn = (sum(getattr(m, name) for m in matches) for name in ("tp", "fp", "fn"))
        if per_image and matches:
            per = [detection_scores(m) for m in matches]
            scores = DetectionScores(*(float(np.mean([getattr(s, n) for s in per])) for n in DETECTION_METRICS))
        else:
            scores = scores_from_counts(tp, fp, fn)
        rows.append(SweepRow(threshold, tp, fp, fn, scores))
    return rows


def percentile_images(
    scores: list[float], percentiles: tuple[float, ...] = (0, 25, 50, 75, 100)
) -> list[tuple[float, int, float]]:
    """Picks the image at each percentile of the per-image scores (nearest rank).

    Returns:
        (percentile, image index, score) triples.
    """
    if not scores:
        raise PreconditionError("no per-image scores")
    order = np.argsort(np.asarray(scores), kind="stable")
    picks = []
    for percentile in percentiles:
        rank = max(int(math.ceil(percentile / 100 * len(order))), 1)
        index = int(order[rank - 1])
        picks.append((percentile, index, float(scores[index])))
    return picks


def report_rows(gts: list[np.ndarray], preds: list[np.ndarray], thresholds: list[float],
                per_image: bool = False) -> list[tuple[str, str, float]]:
    """Rows (metric, threshold, value) for every detection metric and threshold, plus SEG."""
    rows = []
    for row in threshold_sweep(gts, preds, thresholds, per_image):
        rows.extend((name, f"{row.threshold:g}", value) for name, value in row.scores.as_dict().items())
    if per_image:
        seg = [seg_score(g, p) for g, p in zip(gts, preds) if (g > 0).any()]
        if seg:
            rows.append(("seg", "-", float(np.mean(seg))))
    elif any((g > 0).any() for g in gts):
        rows.append(("seg", "-", dataset_seg(gts, preds)))
    return rows


def format_report(rows: list[tuple[str, str, float]]) -> str:
    lines = [REPORT_HEADER] + [f"{metric}\t{threshold}\t{value:.6f}" for metric, threshold, value in rows]
    return "\n".join(lines) + "\n"
