"""From dense embeddings to instance masks.

Each foreground pixel i votes for its object's center i - r_i; mean-shift
groups the votes. Background is found as the pixels whose embedding is
unstable under repeated salt-and-pepper corruption of the input.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.cluster import MeanShift

from py_oce_seg.core import metrics
from py_oce_seg.core.data_io import prepare_image, resize_labels
from py_oce_seg.core.oce_net import CONTEXT, ModelParams, forward
from py_oce_seg.core.utils.config import SegmenterConfig
from py_oce_seg.core.utils.helpers import PreconditionError

logger = logging.getLogger(__name__)


def _tile_starts(length: int, tile: int) -> list[int]:
    if length <= tile:
        return [0]
    stride = tile - CONTEXT
    starts = list(range(0, length - tile, stride))
    starts.append(length - tile)
    return starts


def predict_full(params: ModelParams, image: np.ndarray, tile_size: int = 252) -> np.ndarray:
    """Dense offset field with exactly the input's spatial size.

    The image is reflect-padded by half the context per side (plus one row or
    column for odd sizes) and run through the network in tiles of at most
    `tile_size`, overlapping by the context. Tile origins are even, so every
    tile sees the same pooling grid and the stitched field does not depend on
    the tiling.

    Returns:
        A float32 [2, H, W] field.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    _, height, width = image.shape
    if height < 20 or width < 20:
        raise PreconditionError(f"image {height}x{width} is smaller than 20x20")
    if tile_size % 2 or tile_size < 20:
        raise PreconditionError(f"tile size must be even and at least 20, got {tile_size}")
    half = CONTEXT // 2
    padded = np.pad(image, ((0, 0), (half, half + height % 2), (half, half + width % 2)), mode="reflect")
    out = np.zeros((2,) + tuple(s - CONTEXT for s in padded.shape[1:]), dtype=np.float32)
    for top in _tile_starts(padded.shape[1], tile_size):
        for left in _tile_starts(padded.shape[2], tile_size):
            tile = padded[:, top:top + tile_size, left:left + tile_size]
            prediction = forward(params, tile).data
            out[:, top:top + prediction.shape[1], left:left + prediction.shape[2]] = prediction
    return out[:, :height, :width]


def salt_pepper(image: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Sets floor(p*H*W/2) random pixels to 0 and as many others to 1, across all channels."""
    noisy = np.array(image, dtype=np.float32, copy=True)
    height, width = noisy.shape[-2:]
    count = int(np.floor(p * height * width / 2))
    if count == 0:
        return noisy
    chosen = rng.choice(height * width, size=2 * count, replace=False)
    rows, cols = np.divmod(chosen, width)
    noisy[..., rows[:count], cols[:count]] = 0.0
    noisy[..., rows[count:], cols[count:]] = 1.0
    return noisy


def embedding_variance(params: ModelParams, image: np.ndarray, rounds: int = 5, p: float = 0.01, seed: int | tuple = 0,
                       tile_size: int = 252) -> np.ndarray:
    """Unbiased variance of the embedding over `rounds` noisy predictions, summed over both channels."""
    if rounds < 2:
        raise PreconditionError(f"need at least two noise rounds, got {rounds}")
    rng = np.random.default_rng(seed)
    predictions = np.stack([predict_full(params, salt_pepper(image, p, rng), tile_size) for _ in range(rounds)])
    return predictions.var(axis=0, ddof=1).sum(axis=0)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing the between-class variance.

    Returns the lower edge of the first bin of the upper class; among equal
    maxima the lowest threshold wins.

    Raises:
        PreconditionError: Fewer than two distinct values.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(initial=np.inf), values.max(initial=-np.inf)
    if not hi > lo:
        raise PreconditionError("Otsu threshold needs at least two distinct values")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight_low = np.cumsum(counts)[:-1].astype(np.float64)
    weight_high = counts.sum() - weight_low
    mass_low = np.cumsum(counts * centers)[:-1]
    mass_high = np.sum(counts * centers) - mass_low
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_low = mass_low / weight_low
        mean_high = mass_high / weight_high
        between = weight_low * weight_high * (mean_low - mean_high) ** 2
    between[(weight_low == 0) | (weight_high == 0)] = -np.inf
    return float(edges[int(np.argmax(between)) + 1])


def detect_foreground(variance: np.ndarray, bins: int = 256) -> np.ndarray:
    """Low-variance pixels are foreground: `variance <= otsu_threshold(variance)`."""
    threshold = otsu_threshold(variance, bins)
    mask = variance <= threshold
    logger.info(f"otsu threshold {threshold:.6g}, foreground fraction {mask.mean():.3f}")
    return mask


def mean_shift(points: np.ndarray, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat-kernel mean-shift with bandwidth-sized bin seeding.

    Returns:
        The modes (M, 2) and, per point, the index of its nearest mode.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise PreconditionError("mean-shift needs at least one point")
    if bandwidth <= 0:
        raise PreconditionError(f"bandwidth must be positive, got {bandwidth}")
    model = MeanShift(bandwidth=bandwidth, bin_seeding=True, min_bin_freq=1, cluster_all=True, max_iter=300)
    model.fit(points)
    return model.cluster_centers_, model.labels_


def relabel_consecutive(labels: np.ndarray, min_size: int = 0) -> np.ndarray:
    """Renumbers instances 1..N in ascending id order, dropping those under `min_size` pixels."""
    sizes = np.bincount(labels.ravel())
    keep = np.nonzero(sizes >= max(min_size, 1))[0]
    keep = keep[keep > 0]
    lookup = np.zeros(len(sizes), dtype=np.int32)
    lookup[keep] = np.arange(1, len(keep) + 1, dtype=np.int32)
    return lookup[labels]


def segment(offsets: np.ndarray, foreground: np.ndarray, config: SegmenterConfig) -> np.ndarray:
    """Clusters the center votes i - r_i of the foreground pixels into instances."""
    if offsets.shape[1:] != foreground.shape:
        raise PreconditionError(f"field {offsets.shape[1:]} and mask {foreground.shape} differ in shape")
    labels = np.zeros(foreground.shape, dtype=np.int32)
    rows, cols = np.nonzero(foreground)
    if len(rows) == 0:
        return labels
    votes = np.stack([rows - offsets[0, rows, cols], cols - offsets[1, rows, cols]], axis=1)
    _, assignment = mean_shift(votes, config.bandwidth)
    labels[rows, cols] = assignment + 1
    if config.connectivity_relabel:
        split = np.zeros_like(labels)
        for cluster in np.unique(labels[labels > 0]):
            components, _ = ndimage.label(labels == cluster)
            split[components > 0] = components[components > 0] + split.max()
        labels = split
    return relabel_consecutive(labels, config.min_instance_size)


def shrink_instances(labels: np.ndarray, distance: float) -> np.ndarray:
    """Erodes every instance, keeping pixels farther than `distance` from its complement.

    Border pixels sit at distance 1, so distance 1 peels one ring. Instances
    that vanish are dropped and the rest renumbered.
    """
    if distance < 0:
        raise PreconditionError(f"shrink distance must be non-negative, got {distance}")
    if distance == 0:
        return labels.copy()
    shrunk = np.zeros_like(labels)
    for index, box in enumerate(ndimage.find_objects(labels), start=1):
        if box is None:
            continue
        inside = np.pad(labels[box] == index, 1)
        keep = (ndimage.distance_transform_edt(inside) > distance)[1:-1, 1:-1]
        shrunk[box][keep] = index
    return relabel_consecutive(shrunk)


@dataclass
class SegmentationResult:
    """Field and variance at working scale; foreground and labels on the input grid."""
    field: np.ndarray
    variance: np.ndarray
    foreground: np.ndarray
    labels: np.ndarray


def segment_image(params: ModelParams, image: np.ndarray, config: SegmenterConfig, seed: int | tuple = 0,
                  scale_factor: float = 1.0) -> SegmentationResult:
    """Runs the whole inference chain on one raw [C, H, W] image."""
    image = image[None] if image.ndim == 2 else image
    working = prepare_image(image, scale_factor)
    offsets = predict_full(params, working, config.tile_size)
    variance = embedding_variance(params, working, config.noise_rounds, config.noise_fraction, seed, config.tile_size)
    foreground = detect_foreground(variance, config.otsu_bins)
    labels = shrink_instances(segment(offsets, foreground, config), config.shrink_distance)
    if labels.shape != image.shape[1:]:
        labels = relabel_consecutive(resize_labels(labels, image.shape[1:]))
        foreground = resize_labels(foreground, image.shape[1:])
    logger.info(f"foreground {foreground.mean():.1%}, {labels.max()} instances")
    return SegmentationResult(offsets, variance, foreground, labels)


@dataclass
class SweepResult:
    """Best (bandwidth, shrink) setting and the score of every setting tried."""
    bandwidth: float
    shrink: float
    score: float
    table: list[tuple[float, float, float]] = field(default_factory=list)


def dataset_score(gts: list[np.ndarray], preds: list[np.ndarray], metric: str = "f1", threshold: float = 0.5) -> float:
    """Dataset-level F1 or accuracy at `threshold`, or the pooled SEG score."""
    if metric == "seg":
        return metrics.dataset_seg(gts, preds)
    row = metrics.threshold_sweep(gts, preds, [threshold])[0]
    return getattr(row.scores, "f1" if metric == "f1" else "accuracy")


def bandwidth_search(
    fields: list[np.ndarray],
    foregrounds: list[np.ndarray],
    gts: list[np.ndarray],
    config: SegmenterConfig,
) -> SweepResult:
    """Line search over bandwidth x shrink distance on a validation set.

    Candidates are visited in ascending order and a setting replaces the best
    only if it scores strictly higher, so ties go to the smaller bandwidth and
    then the smaller shrink distance whatever the candidate order.

    Raises:
        PreconditionError: Empty validation set or no candidates.
    """
    if not gts or len(fields) != len(gts) or len(foregrounds) != len(gts):
        raise PreconditionError("bandwidth search needs a non-empty validation set with one field per GT mask")
    bandwidths = sorted(set(config.bandwidth_candidates))
    shrinks = sorted(set(config.shrink_candidates))
    if not bandwidths or not shrinks:
        raise PreconditionError("bandwidth search needs at least one candidate of each kind")
    best: SweepResult | None = None
    table = []
    for bandwidth in bandwidths:
        trial = config.model_copy(update={"bandwidth": bandwidth})
        clustered = [segment(f, fg, trial) for f, fg in zip(fields, foregrounds)]
        for shrink in shrinks:
            preds = []
            for labels, gt in zip(clustered, gts):
                shrunk = shrink_instances(labels, shrink)
                if shrunk.shape != gt.shape:
                    shrunk = relabel_consecutive(resize_labels(shrunk, gt.shape))
                preds.append(shrunk)
            score = dataset_score(gts, preds, config.sweep_metric, config.sweep_threshold)
            table.append((bandwidth, shrink, score))
            if best is None or score > best.score:
                best = SweepResult(bandwidth, shrink, score)
    best.table = table
    logger.info(f"best bandwidth {best.bandwidth:g}, shrink {best.shrink:g}: {config.sweep_metric} {best.score:.4f}")
    return best
