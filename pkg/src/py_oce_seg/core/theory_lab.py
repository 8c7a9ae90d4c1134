"""Monte-Carlo check of the expected-offset argument behind the loss.

Scenes hold copies of one noise-free template at random positions. For two
patch appearances a and b, the offsets between all their occurrences split
into same-object offsets (always the intra-object offset) and cross-object
offsets, which average out to zero when placement is unbiased. The periodic
boundary makes placement translation invariant; the bounded canvas shows the
bias a border introduces.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from scipy import stats

from py_oce_seg.core.utils.config import TheoryConfig
from py_oce_seg.core.utils.helpers import PlacementError, PreconditionError

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10_000
REPORT_HEADER = "patch_a\tpatch_b\tterm\tmean_y\tmean_x\tse_y\tse_x\tcount\tskew_y\tskew_x"


def make_template(diameter: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Disc of the given diameter whose pixels carry distinct positive integers.

    Background pixels are 0. Without `rng` the values follow raster order.
    """
    if diameter < 3:
        raise PreconditionError(f"template diameter must be at least 3, got {diameter}")
    center = (diameter - 1) / 2
    yy, xx = np.mgrid[:diameter, :diameter]
    disc = (yy - center) ** 2 + (xx - center) ** 2 <= (diameter / 2) ** 2
    values = np.arange(1, disc.sum() + 1, dtype=np.int32)
    if rng is not None:
        values = rng.permutation(values)
    template = np.zeros((diameter, diameter), dtype=np.int32)
    template[disc] = values
    return template


def wrap_offsets(offsets: np.ndarray, size: int) -> np.ndarray:
    """Maps offsets on a periodic canvas of side `size` into (-size/2, size/2]."""
    wrapped = np.mod(offsets, size)
    return np.where(wrapped > size / 2, wrapped - size, wrapped)


@dataclass
class Scene:
    """One rendered scene.

    Attributes:
        image: Template values, 0 on background.
        labels: Object index + 1 per pixel.
        centers: Object centers (row, col), canvas coordinates.
        boundary: "periodic" or "bounded".
    """
    image: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    boundary: str

    @property
    def size(self) -> int:
        return self.image.shape[0]


def place_scene(template: np.ndarray, n: int, canvas: int, rng: np.random.Generator,
                boundary: str = "periodic") -> Scene:
    """Places `n` non-overlapping copies of `template` uniformly at random.

    Copies overlap-free means center distances exceed the template diameter
    (measured on the torus in periodic mode, where copies wrap around).

    Raises:
        PlacementError: An object found no free position in time.
    """
    if boundary not in ("periodic", "bounded"):
        raise PreconditionError(f"unknown boundary mode {boundary!r}")
    diameter = template.shape[0]
    if diameter > canvas:
        raise PlacementError(f"template of {diameter} pixels does not fit a {canvas}-pixel canvas")
    high = canvas if boundary == "periodic" else canvas - diameter + 1
    origins = np.zeros((0, 2), dtype=np.int64)
    for index in range(n):
        for _ in range(MAX_ATTEMPTS):
            origin = rng.integers(0, high, size=2)
            delta = origins - origin
            if boundary == "periodic":
                delta = wrap_offsets(delta, canvas)
            if not len(origins) or np.min(np.hypot(delta[:, 0], delta[:, 1])) > diameter:
                break
        else:
            raise PlacementError(f"could not place object {index + 1} of {n} after {MAX_ATTEMPTS} attempts")
        origins = np.vstack([origins, origin])
    image = np.zeros((canvas, canvas), dtype=np.int32)
    labels = np.zeros((canvas, canvas), dtype=np.int32)
    footprint = template > 0
    span = np.arange(diameter)
    for index, (top, left) in enumerate(origins):
        rows = ((top + span) % canvas)[:, None]
        cols = ((left + span) % canvas)[None, :]
        image[rows, cols] = np.where(footprint, template, image[rows, cols])
        labels[rows, cols] = np.where(footprint, index + 1, labels[rows, cols])
    centers = (origins + (diameter - 1) / 2) % canvas if boundary == "periodic" else origins + (diameter - 1) / 2
    return Scene(image, labels, centers.astype(np.float64), boundary)


def template_patch(template: np.ndarray, center: tuple[int, int], patch_size: int) -> np.ndarray:
    """The patch_size x patch_size window of the template around `center`, zero outside."""
    half = patch_size // 2
    padded = np.pad(template, half)
    row, col = center
    return padded[row:row + patch_size, col:col + patch_size]


class OccurrenceIndex:
    """Locations of patch appearances in a scene, keyed by exact content."""

    def __init__(self, scene: Scene, patch_size: int = 3) -> None:
        if patch_size % 2 == 0:
            raise PreconditionError(f"patch size must be odd, got {patch_size}")
        self.scene = scene
        self.patch_size = patch_size
        half = patch_size // 2
        mode = "wrap" if scene.boundary == "periodic" else "constant"
        self._padded = np.pad(scene.image, half, mode=mode)
        self._cache: dict[bytes, np.ndarray] = {}

    def locations(self, patch: np.ndarray) -> np.ndarray:
        """Canvas coordinates (k, 2) of every pixel whose window equals `patch`."""
        patch = np.asarray(patch, dtype=np.int32)
        key = patch.tobytes()
        if key not in self._cache:
            half = self.patch_size // 2
            rows, cols = np.nonzero(self.scene.image == patch[half, half])
            found = [(r, c) for r, c in zip(rows, cols)
                     if np.array_equal(self._padded[r:r + self.patch_size, c:c + self.patch_size], patch)]
            self._cache[key] = np.array(found, dtype=np.int64).reshape(-1, 2)
        return self._cache[key]


@dataclass
class ScenePairs:
    """Offsets j - i for every occurrence i of a and j of b in one scene."""
    offsets: np.ndarray
    same: np.ndarray


def scene_pairs(scene: Scene, patch_a: np.ndarray, patch_b: np.ndarray, patch_size: int = 3) -> ScenePairs:
    """All occurrence pairs of two patches in one scene, flagged by shared object.

    Raises:
        PreconditionError: A patch does not occur in the scene.
    """
    index = OccurrenceIndex(scene, patch_size)
    at_a, at_b = index.locations(patch_a), index.locations(patch_b)
    if not len(at_a) or not len(at_b):
        raise PreconditionError("patch does not occur in the scene")
    offsets = (at_b[None, :, :] - at_a[:, None, :]).reshape(-1, 2).astype(np.float64)
    if scene.boundary == "periodic":
        offsets = wrap_offsets(offsets, scene.size)
    label_a = scene.labels[at_a[:, 0], at_a[:, 1]]
    label_b = scene.labels[at_b[:, 0], at_b[:, 1]]
    same = (label_a[:, None] == label_b[None, :]).ravel()
    return ScenePairs(offsets, same)


def iter_scenes(template: np.ndarray, config: TheoryConfig, seed: int) -> Iterator[Scene]:
    """Independent scenes, scene k seeded with (seed, k)."""
    for k in range(config.scenes):
        yield place_scene(template, config.objects, config.canvas_size, np.random.default_rng([seed, k]),
                          config.boundary)


@dataclass
class OffsetEstimate:
    """Mean offset (row, col), its standard error across scenes and the pair count."""
    mean: np.ndarray
    standard_error: np.ndarray
    count: int


def _estimate(per_scene: list[np.ndarray]) -> OffsetEstimate:
    per_scene = [offsets for offsets in per_scene if len(offsets)]
    if not per_scene:
        return OffsetEstimate(np.full(2, np.nan), np.full(2, np.nan), 0)
    pooled = np.concatenate(per_scene)
    scene_means = np.array([offsets.mean(axis=0) for offsets in per_scene])
    if len(scene_means) > 1:
        se = scene_means.std(axis=0, ddof=1) / np.sqrt(len(scene_means))
    else:
        se = np.full(2, np.nan)
    return OffsetEstimate(pooled.mean(axis=0), se, len(pooled))


def _collect(scenes: Iterable[Scene], patch_a: np.ndarray, patch_b: np.ndarray, patch_size: int) -> list[ScenePairs]:
    return [scene_pairs(scene, patch_a, patch_b, patch_size) for scene in scenes]


def expected_offset_mc(scenes: Iterable[Scene], patch_a: np.ndarray, patch_b: np.ndarray,
                       patch_size: int = 3) -> OffsetEstimate:
    """Average offset between all occurrences of a and b over the scenes."""
    return _estimate([pairs.offsets for pairs in _collect(scenes, patch_a, patch_b, patch_size)])


@dataclass
class Decomposition:
    same: OffsetEstimate
    cross: OffsetEstimate
    cross_skew: np.ndarray

    @property
    def n_same(self) -> int:
        return self.same.count

    @property
    def n_cross(self) -> int:
        return self.cross.count


def _decompose(collected: list[ScenePairs]) -> Decomposition:
    same = _estimate([pairs.offsets[pairs.same] for pairs in collected])
    cross_parts = [pairs.offsets[~pairs.same] for pairs in collected]
    cross = _estimate(cross_parts)
    pooled = np.concatenate(cross_parts) if cross.count else np.zeros((0, 2))
    skew = stats.skew(pooled, axis=0) if len(pooled) > 2 else np.full(2, np.nan)
    return Decomposition(same, cross, np.asarray(skew, dtype=np.float64))


def decompose_offsets(scenes: Iterable[Scene], patch_a: np.ndarray, patch_b: np.ndarray,
                      patch_size: int = 3) -> Decomposition:
    """Splits the occurrence pairs into same-object and cross-object offsets."""
    return _decompose(_collect(scenes, patch_a, patch_b, patch_size))


@dataclass
class TheoryResult:
    patch_a: tuple[int, int]
    patch_b: tuple[int, int]
    intra_offset: np.ndarray
    overall: OffsetEstimate
    decomposition: Decomposition
    scenes: int


def run_theory(config: TheoryConfig, seed: int = 0) -> TheoryResult:
    """Generates the scenes once and reports the overall and decomposed offsets."""
    template = make_template(config.template_diameter)
    patch_a = template_patch(template, config.patch_a, config.patch_size)
    patch_b = template_patch(template, config.patch_b, config.patch_size)
    collected = _collect(iter_scenes(template, config, seed), patch_a, patch_b, config.patch_size)
    overall = _estimate([pairs.offsets for pairs in collected])
    decomposition = _decompose(collected)
    intra = np.subtract(config.patch_b, config.patch_a).astype(np.float64)
    logger.info(f"{config.scenes} {config.boundary} scenes of {config.objects} objects: "
                f"{decomposition.n_same} same-object and {decomposition.n_cross} cross-object pairs")
    return TheoryResult(tuple(config.patch_a), tuple(config.patch_b), intra, overall, decomposition, config.scenes)


def format_theory_report(result: TheoryResult) -> str:
    a = f"{result.patch_a[0]},{result.patch_a[1]}"
    b = f"{result.patch_b[0]},{result.patch_b[1]}"

    def row(term: str, estimate: OffsetEstimate, skew: np.ndarray | None = None) -> str:
        skew_cells = [f"{s:.6f}" for s in skew] if skew is not None else ["-", "-"]
        cells = [a, b, term, *(f"{m:.6f}" for m in estimate.mean), *(f"{s:.6f}" for s in estimate.standard_error),
                 str(estimate.count), *skew_cells]
        return "\t".join(cells)

    intra = OffsetEstimate(result.intra_offset, np.zeros(2), 0)
    lines = [
        REPORT_HEADER,
        row("intra", intra),
        row("overall", result.overall),
        row("same", result.decomposition.same),
        row("cross", result.decomposition.cross, result.decomposition.cross_skew),
    ]
    return "\n".join(lines) + "\n"
