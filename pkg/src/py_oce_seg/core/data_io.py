"""Tensor container files, PGM images, intensity handling and synthetic data.

The tensor container (`.ocet`) layout, all integers little-endian:

    magic "OCET" | version u8 = 1 | dtype u8 | ndim u8 | ndim x u32 dims | payload

dtype codes: 0 float32, 1 int32, 2 uint8. The payload is row-major.
"""
import glob
import io
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from py_oce_seg.core.utils.config import DataConfig
from py_oce_seg.core.utils.helpers import (
    BadMagicError,
    Defaults,
    PgmFormatError,
    PlacementError,
    PreconditionError,
    TensorDtype,
    TrailingDataError,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b"OCET"
VERSION = 1
_HEADER = struct.Struct("<BBB")


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(handle, "wb") as tmp:
            tmp.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def encode_tensor(array: np.ndarray) -> bytes:
    """Serializes an array; floats become float32, uint8 stays uint8, other integers int32."""
    dtypes = TensorDtype()
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code = dtypes.UINT8
    elif np.issubdtype(array.dtype, np.floating):
        code = dtypes.FLOAT32
    elif np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        code = dtypes.INT32
    else:
        raise PreconditionError(f"cannot store dtype {array.dtype} in a tensor file")
    if array.ndim > 255:
        raise PreconditionError("tensor files hold at most 255 dimensions")
    header = MAGIC + _HEADER.pack(VERSION, code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=dtypes.numpy_by_code[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buffer: bytes) -> np.ndarray:
    """Parses a tensor container.

    Raises:
        BadMagicError, UnsupportedVersionError, UnsupportedDtypeError,
        TruncatedFileError, TrailingDataError: One per kind of corruption.
    """
    dtypes = TensorDtype()
    if len(buffer) < len(MAGIC):
        raise TruncatedFileError(f"file holds {len(buffer)} bytes, shorter than the magic")
    if buffer[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buffer[:4])!r}, expected {MAGIC!r}")
    if len(buffer) < 4 + _HEADER.size:
        raise TruncatedFileError("header is truncated")
    version, code, ndim = _HEADER.unpack_from(buffer, 4)
    if version != VERSION:
        raise UnsupportedVersionError(VERSION, version)
    if code not in dtypes.numpy_by_code:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    offset = 4 + _HEADER.size
    if len(buffer) < offset + 4 * ndim:
        raise TruncatedFileError("dimension table is truncated")
    dims = struct.unpack_from(f"<{ndim}I", buffer, offset)
    offset += 4 * ndim
    dtype = np.dtype(dtypes.numpy_by_code[code])
    expected = dtype.itemsize * math.prod(dims)
    available = len(buffer) - offset
    if available < expected:
        raise TruncatedFileError(f"payload holds {available} bytes, dims {dims} need {expected}")
    if available > expected:
        raise TrailingDataError(f"payload holds {available} bytes, dims {dims} need only {expected}")
    array = np.frombuffer(buffer, dtype=dtype, count=math.prod(dims), offset=offset).reshape(dims)
    return array.astype(dtype.newbyteorder("="))


def tensor_write(path: str, array: np.ndarray) -> None:
    """Writes one tensor file atomically; labels are stored as int32."""
    _atomic_write(path, encode_tensor(array))


def tensor_read(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        return decode_tensor(handle.read())


def pgm_read(path: str) -> np.ndarray:
    """Reads a binary P5 graymap and scales it to [0, 1] floats.

    Raises:
        PgmFormatError: P2, P6 or any other format, or a malformed header or
            raster.
    """
    with open(path, "rb") as handle:
        magic = handle.read(2)
        if magic != b"P5":
            raise PgmFormatError(f"unsupported format {magic!r}, only binary P5 graymaps are read")
        handle.seek(0)
        try:
            with Image.open(handle, formats=["PPM"]) as image:
                image.load()
                full_range = 255 if image.mode == "L" else 65535
                values = np.asarray(image)
        except (OSError, ValueError, SyntaxError) as e:
            raise PgmFormatError(f"malformed graymap {path}: {e}") from e
    return (values.astype(np.float64) / full_range).astype(np.float32)


def pgm_write(path: str, image: np.ndarray) -> None:
    """Writes a single-channel P5 graymap.

    uint8 images are written with maxval 255, other integer images with
    maxval 65535; float images are taken as [0, 1] intensities and written
    as 8-bit.
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise PreconditionError(f"PGM holds one channel, got shape {image.shape}")
    if image.dtype == np.uint8:
        values = image
    elif np.issubdtype(image.dtype, np.integer):
        values = np.clip(image, 0, 65535).astype(np.uint16)
    else:
        values = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(values).save(buffer, format="PPM")
    _atomic_write(path, buffer.getvalue())


def labels_to_gray(labels: np.ndarray) -> np.ndarray:
    """Maps instance ids to distinct gray levels, background stays 0."""
    ids = np.unique(labels[labels > 0])
    maxval = 255 if len(ids) <= 255 else 65535
    gray = np.zeros(labels.shape, dtype=np.uint8 if maxval == 255 else np.uint16)
    if len(ids):
        levels = np.rint(np.arange(1, len(ids) + 1) * (maxval / len(ids))).astype(gray.dtype)
        gray[labels > 0] = levels[np.searchsorted(ids, labels[labels > 0])]
    return gray


def normalize_percentile(image: np.ndarray, low: float = 1.0, high: float = 99.8) -> np.ndarray:
    """Maps the `low` percentile of each channel to 0 and `high` to 1, without clipping.

    Percentiles use linear interpolation of the sorted sample.

    Raises:
        PreconditionError: A channel is constant (degenerate percentile range).
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    channels = image[None] if squeeze else image
    out = np.empty_like(channels)
    for index, channel in enumerate(channels):
        lo, hi = np.percentile(channel, [low, high], method="linear")
        if hi <= lo:
            raise PreconditionError(f"channel {index} is constant between the {low} and {high} percentiles")
        out[index] = (channel - lo) / (hi - lo)
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def resize_labels(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of a label map to an explicit shape."""
    height, width = labels.shape[-2:]
    out_h, out_w = shape
    if out_h < 1 or out_w < 1:
        raise PreconditionError(f"output shape {shape} is smaller than one pixel")
    rows = np.minimum(((np.arange(out_h) + 0.5) * height / out_h).astype(np.int64), height - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * width / out_w).astype(np.int64), width - 1)
    return labels[..., rows[:, None], cols[None, :]]


def rescale(array: np.ndarray, factor: float, labels: bool = False) -> np.ndarray:
    """Resamples the two trailing axes by `factor`.

    Images use bilinear interpolation, label maps nearest neighbour.

    Raises:
        PreconditionError: Non-positive factor or an output under one pixel.
    """
    if factor <= 0:
        raise PreconditionError(f"scale factor must be positive, got {factor}")
    array = np.asarray(array)
    height, width = array.shape[-2:]
    out_h, out_w = int(round(height * factor)), int(round(width * factor))
    if out_h < 1 or out_w < 1:
        raise PreconditionError(f"rescaling {height}x{width} by {factor} leaves less than one pixel")
    if labels:
        return resize_labels(array, (out_h, out_w))
    if (out_h, out_w) == (height, width):
        return array.copy()
    zoom = (1.0,) * (array.ndim - 2) + (out_h / height, out_w / width)
    return ndimage.zoom(array, zoom, order=1, mode="nearest", grid_mode=True).astype(array.dtype)


@dataclass
class SceneSpec:
    """Procedural description of one synthetic image.

    Every object is a copy of one textured ellipse template: a radial
    intensity ramp times a linear gradient of fixed orientation, so the
    position of a patch inside an object can be read from its appearance.
    """
    canvas_size: int = 252
    object_count: int = 12
    radius_min: float = 8.0
    radius_max: float = 14.0
    eccentricity_min: float = 0.0
    eccentricity_max: float = 0.6
    background_mean: float = 0.1
    noise_std: float = 0.02
    min_gap: int = 2
    gradient_angle: float = math.pi / 4
    max_attempts: int = 10_000
    seed: int | tuple[int, ...] = 0

    @classmethod
    def from_config(cls, config: DataConfig, seed: int | tuple[int, ...]) -> "SceneSpec":
        return cls(
            canvas_size=config.canvas_size,
            object_count=config.object_count,
            radius_min=config.radius_min,
            radius_max=config.radius_max,
            eccentricity_min=config.eccentricity_min,
            eccentricity_max=config.eccentricity_max,
            background_mean=config.background_mean,
            noise_std=config.noise_std,
            min_gap=config.min_gap,
            seed=seed,
        )


def make_ellipse_template(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draws the scene's object template.

    Returns:
        Texture values and the boolean footprint, both (2h+1, 2h+1).
    """
    radius = rng.uniform(spec.radius_min, spec.radius_max)
    eccentricity = rng.uniform(spec.eccentricity_min, spec.eccentricity_max)
    orientation = rng.uniform(0.0, math.pi)
    minor = radius * math.sqrt(1.0 - eccentricity ** 2)
    half = int(math.ceil(radius))
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    u = xx * math.cos(orientation) + yy * math.sin(orientation)
    v = -xx * math.sin(orientation) + yy * math.cos(orientation)
    rho = np.sqrt((u / radius) ** 2 + (v / minor) ** 2)
    footprint = rho <= 1.0
    ramp = 1.0 - 0.5 * rho
    gradient = 0.8 + 0.2 * (xx * math.cos(spec.gradient_angle) + yy * math.sin(spec.gradient_angle)) / half
    texture = np.where(footprint, 0.9 * ramp * gradient, 0.0)
    return texture.astype(np.float32), footprint


def synth_generate(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Generates one synthetic image and its exact instance labels.

    Returns:
        A [1, H, W] float32 image and an int32 label map.

    Raises:
        PlacementError: An object could not be placed within `max_attempts`.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.canvas_size
    image = (spec.background_mean + spec.noise_std * rng.standard_normal((size, size))).astype(np.float32)
    labels = np.zeros((size, size), dtype=np.int32)
    if spec.object_count == 0:
        return image[None], labels
    texture, footprint = make_ellipse_template(spec, rng)
    half = texture.shape[0] // 2
    if 2 * half + 1 > size:
        raise PlacementError(f"template of size {2 * half + 1} does not fit a {size}x{size} canvas")
    blocked = np.zeros((size, size), dtype=bool)
    reach = ndimage.binary_dilation(np.pad(footprint, spec.min_gap), iterations=spec.min_gap) \
        if spec.min_gap else footprint
    for instance in range(1, spec.object_count + 1):
        for _ in range(spec.max_attempts):
            row, col = rng.integers(half, size - half, size=2)
            window = (slice(row - half, row + half + 1), slice(col - half, col + half + 1))
            if not blocked[window][footprint].any():
                break
        else:
            raise PlacementError(f"could not place object {instance} after {spec.max_attempts} attempts")
        image[window][footprint] = texture[footprint]
        labels[window][footprint] = instance
        top, left = row - half - spec.min_gap, col - half - spec.min_gap
        rows = slice(max(top, 0), min(top + reach.shape[0], size))
        cols = slice(max(left, 0), min(left + reach.shape[1], size))
        blocked[rows, cols] |= reach[rows.start - top:rows.stop - top, cols.start - left:cols.stop - left]
    return image[None], labels


@dataclass
class SparseAnnotations:
    """Annotated instance masks covering a sampled fraction of the cells."""
    masks: list[np.ndarray] = field(default_factory=list)

    def union(self, shape: tuple[int, int]) -> np.ndarray:
        if any(mask.shape != tuple(shape) for mask in self.masks):
            raise PreconditionError(f"annotation masks do not match the {shape[0]}x{shape[1]} label map")
        covered = np.zeros(shape, dtype=np.int32)
        for mask in self.masks:
            covered += mask.astype(np.int32)
        if (covered > 1).any():
            raise PreconditionError("annotations overlap")
        return covered.astype(bool)


def sample_annotations(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> SparseAnnotations:
    """Randomly picks ceil(fraction * N) ground-truth objects as annotations."""
    ids = np.unique(labels[labels > 0])
    count = min(len(ids), int(math.ceil(fraction * len(ids))))
    chosen = np.sort(rng.choice(ids, size=count, replace=False)) if count else ids[:0]
    return SparseAnnotations([labels == i for i in chosen])


def _known_background(annotated: np.ndarray, labeled: np.ndarray, distance: float) -> np.ndarray:
    if not annotated.any():
        return np.zeros_like(annotated)
    near = ndimage.distance_transform_edt(~annotated) < distance
    return near & ~labeled


def build_pseudo_dataset(pred: np.ndarray, annotations: SparseAnnotations,
                         background_distance: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    """Corrects a predicted segmentation with sparse annotations.

    Predicted instances touching an annotation are replaced by the
    annotations; remaining predictions keep their order and are renumbered
    1..m, annotations follow as m+1..m+k.

    Returns:
        The pseudo label map and the known-background mask (pixels closer
        than `background_distance` to an annotation and not labeled).

    Raises:
        PreconditionError: Shapes disagree or annotations overlap.
    """
    annotated = annotations.union(pred.shape)
    replaced = np.unique(pred[annotated & (pred > 0)])
    kept_ids = np.setdiff1d(np.unique(pred[pred > 0]), replaced)
    pseudo = np.zeros(pred.shape, dtype=np.int32)
    for new_id, old_id in enumerate(kept_ids, start=1):
        pseudo[pred == old_id] = new_id
    for new_id, mask in enumerate(annotations.masks, start=len(kept_ids) + 1):
        pseudo[mask] = new_id
    return pseudo, _known_background(annotated, pseudo > 0, background_distance)


def build_sparse_dataset(annotations: SparseAnnotations, shape: tuple[int, int],
                         background_distance: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    """Label map holding only the annotations, plus its known background."""
    annotated = annotations.union(shape)
    sparse = np.zeros(shape, dtype=np.int32)
    for new_id, mask in enumerate(annotations.masks, start=1):
        sparse[mask] = new_id
    return sparse, _known_background(annotated, sparse > 0, background_distance)


@dataclass
class Dataset:
    """Images (and optional labels) of one dataset directory, sorted by stem."""
    stems: list[str]
    images: list[np.ndarray]
    labels: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.stems)


def _tensor_stems(directory: str) -> list[str]:
    suffix = Defaults().TENSOR_SUFFIX
    return sorted(os.path.basename(p)[:-len(suffix)] for p in glob.glob(os.path.join(directory, f"*{suffix}")))


def load_dataset(directory: str) -> Dataset:
    """Loads `images/*.ocet` and, when present, `labels/*.ocet` with matching stems.

    Two-dimensional images are given a leading channel axis.
    """
    defaults = Defaults()
    image_dir = os.path.join(directory, defaults.IMAGES_DIR)
    if not os.path.isdir(image_dir):
        raise FileNotFoundError(f"dataset directory {directory} has no {defaults.IMAGES_DIR}/ folder")
    stems = _tensor_stems(image_dir)
    images = []
    for stem in stems:
        image = tensor_read(os.path.join(image_dir, stem + defaults.TENSOR_SUFFIX)).astype(np.float32)
        images.append(image[None] if image.ndim == 2 else image)
    labels = None
    label_dir = os.path.join(directory, defaults.LABELS_DIR)
    if os.path.isdir(label_dir):
        labels = []
        for stem in stems:
            path = os.path.join(label_dir, stem + defaults.TENSOR_SUFFIX)
            if not os.path.exists(path):
                raise FileNotFoundError(f"label file for image {stem} is missing: {path}")
            labels.append(tensor_read(path).astype(np.int32))
    logger.info(f"loaded {len(stems)} images from {directory}{' with labels' if labels is not None else ''}")
    return Dataset(stems, images, labels)


def save_dataset(directory: str, dataset: Dataset) -> None:
    defaults = Defaults()
    for index, stem in enumerate(dataset.stems):
        tensor_write(os.path.join(directory, defaults.IMAGES_DIR, stem + defaults.TENSOR_SUFFIX),
                     dataset.images[index])
        if dataset.labels is not None:
            tensor_write(os.path.join(directory, defaults.LABELS_DIR, stem + defaults.TENSOR_SUFFIX),
                         dataset.labels[index].astype(np.int32))


def resolve_dataset_dir(path: str, split: str | None = None) -> str:
    """Finds the folder holding `images/`: `path` itself or its `split` subfolder."""
    images_dir = Defaults().IMAGES_DIR
    if os.path.isdir(os.path.join(path, images_dir)):
        return path
    if split and os.path.isdir(os.path.join(path, split, images_dir)):
        return os.path.join(path, split)
    raise FileNotFoundError(f"no {images_dir}/ folder under {path}" + (f" or {path}/{split}" if split else ""))


def load_label_maps(path: str, split: str | None = None) -> dict[str, np.ndarray]:
    """Label maps by stem from `labels/`, `masks/` or the directory itself."""
    defaults = Defaults()
    candidates = [path] if split is None else [os.path.join(path, split), path]
    for base in candidates:
        for sub in (defaults.LABELS_DIR, defaults.MASKS_DIR, ""):
            directory = os.path.join(base, sub)
            stems = _tensor_stems(directory) if os.path.isdir(directory) else []
            if stems:
                return {stem: tensor_read(os.path.join(directory, stem + defaults.TENSOR_SUFFIX)).astype(np.int32)
                        for stem in stems}
    raise FileNotFoundError(f"no label maps found under {path}")


def prepare_image(image: np.ndarray, scale_factor: float = 1.0) -> np.ndarray:
    """Percentile-normalizes and rescales a raw image to the network's working scale."""
    normalized = normalize_percentile(image)
    return normalized if scale_factor == 1.0 else rescale(normalized, scale_factor)
