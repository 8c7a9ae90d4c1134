"""Mini U-Net mapping image patches to object-centric embeddings, its Adam optimizer and checkpoints."""
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from py_oce_seg.core.data_io import decode_tensor, encode_tensor
from py_oce_seg.core.oce_loss import oce_loss, sample_pairs
from py_oce_seg.core.tensor_core import (
    Tape,
    Tensor,
    avgpool2,
    conv2d_valid,
    crop_concat,
    maxpool2,
    relu,
    upsample_nearest2,
)
from py_oce_seg.core.utils.config import LossConfig, ModelConfig, TrainConfig
from py_oce_seg.core.utils.helpers import BadMagicError, PreconditionError, TensorFileError, TruncatedFileError, \
    UnsupportedVersionError

logger = logging.getLogger(__name__)

CONTEXT = 16
CHECKPOINT_FORMAT = 1
_ZIP_MAGIC = b"PK\x03\x04"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def layer_plan(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    """Convolution layers in execution order as (name, in_channels, out_channels, kernel)."""
    base = config.base_fmaps
    wide = base * config.fmap_factor
    plan = []
    for block, cin, cout in (("encoder", config.in_channels, base), ("bottleneck", base, wide),
                             ("decoder", base + wide, base)):
        for index, k in enumerate(config.block_kernels):
            plan.append((f"{block}.conv{index}", cin if index == 0 else cout, cout, k))
    plan.append(("head", base, config.out_channels, 1))
    return plan


def parameter_count(config: ModelConfig) -> int:
    return sum(cout * cin * k * k + cout for _, cin, cout, k in layer_plan(config))


@dataclass
class ModelParams:
    """Named weight and bias tensors in layer order."""
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for tensor in self:
            tensor.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()})


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights with standard deviation sqrt(2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, cin, cout, k in layer_plan(config):
        std = math.sqrt(2.0 / (cin * k * k))
        weight = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        tensors[f"{name}.weight"] = Tensor(weight, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return ModelParams(config, tensors)


def check_input_size(height: int, width: int) -> None:
    """Rejects inputs the valid-convolution chain cannot process.

    Raises:
        PreconditionError: A side below 20 pixels or an odd encoder output.
    """
    for side in (height, width):
        if side < 20:
            raise PreconditionError(f"input {height}x{width} is too small; each side needs at least 20 pixels")
        if (side - 4) % 2:
            raise PreconditionError(f"input {height}x{width} gives an odd encoder output; sides must be even")


def _block(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    for index in range(len(params.config.block_kernels)):
        x = relu(conv2d_valid(x, params[f"{prefix}.conv{index}.weight"], params[f"{prefix}.conv{index}.bias"]))
    return x


def forward(params: ModelParams, image) -> Tensor:
    """Maps a [C, H, W] image to its [2, H - 16, W - 16] offset field."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 3 or x.shape[0] != params.config.in_channels:
        raise PreconditionError(f"expected a [{params.config.in_channels}, H, W] image, got {x.shape}")
    check_input_size(*x.shape[1:])
    pool = maxpool2 if params.config.pooling == "max" else avgpool2
    skip = _block(params, "encoder", x)
    bottom = _block(params, "bottleneck", pool(skip))
    merged = crop_concat(skip, upsample_nearest2(bottom))
    top = _block(params, "decoder", merged)
    return conv2d_valid(top, params["head.weight"], params["head.bias"])


@dataclass
class AdamState:
    """Adam moments per parameter name plus the hyperparameters."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParams, learning_rate: float = 4e-5, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        m = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        return cls(m, v, 0, learning_rate, beta1, beta2, eps)


def adam_step(state: AdamState, params: ModelParams, grads: dict[str, np.ndarray] | None = None) -> None:
    """Applies one bias-corrected Adam update in place.

    Args:
        state: Optimizer state, its step counter is incremented.
        params: Parameters to update.
        grads: Gradients by parameter name; defaults to each tensor's `grad`.

    Raises:
        PreconditionError: Some parameter has no gradient.
    """
    if grads is None:
        grads = {name: t.grad for name, t in params.tensors.items()}
    missing = [name for name in params.names() if grads.get(name) is None]
    if missing:
        raise PreconditionError(f"missing gradient for {', '.join(missing)}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.tensors.items():
        grad = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data -= update.astype(tensor.dtype)


def lr_schedule(epoch: int, base: float = 4e-5, milestones: tuple[int, ...] = (20, 30), factor: float = 0.1) -> float:
    """Step decay: `base` multiplied by `factor` once per milestone reached."""
    if epoch < 0:
        raise PreconditionError(f"epoch must be non-negative, got {epoch}")
    return base * factor ** sum(epoch >= m for m in milestones)


@dataclass
class Checkpoint:
    """Everything needed to resume training: weights, optimizer and progress."""
    params: ModelParams
    adam: AdamState
    epoch: int = 0
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class TrainingResult:
    params: ModelParams
    adam: AdamState
    loss_trace: list[float]


def _random_crop(image: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    _, height, width = image.shape
    top = int(rng.integers(0, height - crop + 1))
    left = int(rng.integers(0, width - crop + 1))
    return image[:, top:top + crop, left:left + crop]


def train(
    images: list[np.ndarray],
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    seed: int,
    resume: Checkpoint | None = None,
    on_epoch_end: Callable[[Checkpoint], None] | None = None,
) -> TrainingResult:
    """Fits the network to unlabeled images with the pair loss.

    Every step draws `batch_size` random crops, samples pairs on each output
    field and averages the per-crop losses. The step loss is the batch mean, not
    the sum, so gradient scale is independent of `batch_size`. Step
    randomness is derived from (seed, epoch, step) so a resumed run repeats
    the uninterrupted one.

    Args:
        images: Normalized [C, H, W] images.
        model_config: Network layout, used when not resuming.
        loss_config: Pair sampling and loss constants.
        train_config: Epochs, batch, crop and optimizer settings.
        seed: Seeds initialization and every step.
        resume: Checkpoint to continue from.
        on_epoch_end: Called with the current checkpoint after each epoch.

    Returns:
        Final parameters, optimizer state and the per-epoch mean loss.

    Raises:
        PreconditionError: Empty dataset, no image as large as the crop or
            a channel mismatch.
    """
    if not images:
        raise PreconditionError("training dataset is empty")
    crop = train_config.crop_size
    check_input_size(crop, crop)
    if resume is not None:
        params, adam = resume.params, resume.adam
        start_epoch, loss_trace = resume.epoch, list(resume.loss_trace)
        model_config = params.config
    else:
        params = init_params(model_config, seed)
        adam = AdamState.create(params, train_config.learning_rate, train_config.beta1, train_config.beta2,
                                train_config.eps)
        start_epoch, loss_trace = 0, []
    if any(image.shape[0] != model_config.in_channels for image in images):
        raise PreconditionError(f"images must have {model_config.in_channels} channels")
    eligible = [image for image in images if min(image.shape[1:]) >= crop]
    if len(eligible) < len(images):
        logger.warning(f"skipping {len(images) - len(eligible)} images smaller than the {crop}x{crop} crop")
    if not eligible:
        raise PreconditionError(f"crop {crop} is larger than every training image")
    steps_per_epoch = math.ceil(len(eligible) / train_config.batch_size)
    scale = np.float32(1.0 / train_config.batch_size)
    for epoch in range(start_epoch, train_config.epochs):
        adam.learning_rate = lr_schedule(epoch, train_config.learning_rate, train_config.lr_milestones,
                                         train_config.lr_factor)
        step_losses = []
        for step in range(steps_per_epoch):
            rng = np.random.default_rng([seed, epoch, step])
            params.zero_grad()
            batch_loss = 0.0
            for _ in range(train_config.batch_size):
                crop_image = _random_crop(eligible[int(rng.integers(len(eligible)))], crop, rng)
                with Tape() as tape:
                    offsets = forward(params, crop_image)
                    pairs = sample_pairs(offsets.shape[1:], loss_config, rng)
                    loss = oce_loss(offsets, pairs, loss_config)
                tape.backward(loss, np.asarray(scale))
                batch_loss += loss.item() * float(scale)
            adam_step(adam, params)
            step_losses.append(batch_loss)
        mean_loss = float(np.float32(np.mean(step_losses)))
        loss_trace.append(mean_loss)
        logger.info(f"epoch {epoch + 1}/{train_config.epochs} lr {adam.learning_rate:.1e} mean loss {mean_loss:.6f}")
        if on_epoch_end is not None:
            on_epoch_end(Checkpoint(params, adam, epoch + 1, loss_trace))
    return TrainingResult(params, adam, loss_trace)


def _write_entry(archive: zipfile.ZipFile, name: str, payload: bytes) -> None:
    archive.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), payload)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    """Writes an uncompressed archive of tensor-container entries.

    Entries: `meta.json`, `params/<name>.ocet`, `adam/m/<name>.ocet`,
    `adam/v/<name>.ocet`, `state.ocet` (int32 [step, epoch]) and
    `loss_trace.ocet`. Identical checkpoints produce identical bytes.
    """
    adam = checkpoint.adam
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": checkpoint.params.config.model_dump(mode="json"),
        "adam": {"learning_rate": adam.learning_rate, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "names": checkpoint.params.names(),
    }
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
        _write_entry(archive, "meta.json", json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name, tensor in checkpoint.params.tensors.items():
            _write_entry(archive, f"params/{name}.ocet", encode_tensor(tensor.data))
            _write_entry(archive, f"adam/m/{name}.ocet", encode_tensor(adam.m[name]))
            _write_entry(archive, f"adam/v/{name}.ocet", encode_tensor(adam.v[name]))
        _write_entry(archive, "state.ocet", encode_tensor(np.array([adam.step, checkpoint.epoch], dtype=np.int32)))
        _write_entry(archive, "loss_trace.ocet", encode_tensor(np.array(checkpoint.loss_trace, dtype=np.float32)))
    with open(path, "wb") as handle:
        handle.write(buffer.getvalue())


def load_checkpoint(path: str) -> Checkpoint:
    """Restores a checkpoint written by :func:`save_checkpoint`.

    Raises:
        BadMagicError: Not a checkpoint archive.
        TruncatedFileError: The archive is cut short or damaged.
        UnsupportedVersionError: Unknown archive or entry format version.
        TensorFileError: Missing entries or shapes that do not fit the model.
    """
    with open(path, "rb") as handle:
        raw = handle.read()
    if raw[:4] != _ZIP_MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint archive")
    try:
        with zipfile.ZipFile(io.BytesIO(raw)) as archive:
            entries = {name: archive.read(name) for name in archive.namelist()}
    except (zipfile.BadZipFile, EOFError) as e:
        raise TruncatedFileError(f"checkpoint {path} is damaged: {e}") from e
    try:
        meta = json.loads(entries["meta.json"])
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise UnsupportedVersionError(CHECKPOINT_FORMAT, meta.get("format"))
        config = ModelConfig.model_validate(meta["model"])
        expected = init_params(config, 0)
        tensors, m, v = {}, {}, {}
        for name in expected.names():
            data = decode_tensor(entries[f"params/{name}.ocet"])
            if data.shape != expected[name].shape:
                raise TensorFileError(f"parameter {name} has shape {data.shape}, expected {expected[name].shape}")
            tensors[name] = Tensor(data, requires_grad=True)
            m[name] = decode_tensor(entries[f"adam/m/{name}.ocet"]).reshape(data.shape)
            v[name] = decode_tensor(entries[f"adam/v/{name}.ocet"]).reshape(data.shape)
        step, epoch = (int(x) for x in decode_tensor(entries["state.ocet"]))
        loss_trace = [float(x) for x in decode_tensor(entries["loss_trace.ocet"])]
    except KeyError as e:
        raise TensorFileError(f"checkpoint {path} lacks entry {e}") from e
    except ValueError as e:
        raise TensorFileError(f"checkpoint {path} is inconsistent: {e}") from e
    hyper = meta["adam"]
    adam = AdamState(m, v, step, hyper["learning_rate"], hyper["beta1"], hyper["beta2"], hyper["eps"])
    return Checkpoint(ModelParams(config, tensors), adam, epoch, loss_trace)
