import json
import os
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from py_oce_seg.core.utils.helpers import ConfigError, Defaults


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    """Mini U-Net layout: one downsampling level, [3, 1, 1, 3] valid convolutions per block."""
    in_channels: Literal[1, 2] = 1
    base_fmaps: int = Field(default=64, gt=0)
    fmap_factor: int = Field(default=3, gt=0)
    depth: Literal[1] = 1
    block_kernels: tuple[int, ...] = (3, 1, 1, 3)
    out_channels: Literal[2] = 2
    pooling: Literal["max", "average"] = "max"

    @field_validator("block_kernels")
    @classmethod
    def _fixed_block(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if tuple(value) != (3, 1, 1, 3):
            raise ValueError("block kernel sequence is fixed to [3, 1, 1, 3]")
        return tuple(value)


class LossConfig(_Section):
    """Pair sampling and loss constants."""
    kappa: float = Field(default=10.0, gt=0)
    tau: float = Field(default=10.0, gt=0)
    reg_lambda: float = Field(default=1e-5, ge=0)
    anchor_density: float = Field(default=0.10, gt=0, le=1)


class TrainConfig(_Section):
    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=8, gt=0)
    crop_size: int = Field(default=252, ge=20)
    learning_rate: float = Field(default=4e-5, gt=0)
    lr_milestones: tuple[int, ...] = (20, 30)
    lr_factor: float = Field(default=0.1, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    checkpoint_every: int = Field(default=1, gt=0)


class SegmenterConfig(_Section):
    """Inference, background detection and clustering parameters."""
    noise_rounds: int = Field(default=5, ge=2)
    noise_fraction: float = Field(default=0.01, gt=0, lt=0.5)
    bandwidth: float = Field(default=8.0, gt=0)
    shrink_distance: float = Field(default=0.0, ge=0, le=6)
    min_instance_size: int = Field(default=10, ge=0)
    connectivity_relabel: bool = False
    otsu_bins: int = Field(default=256, ge=2)
    tile_size: int = Field(default=252, ge=20)
    bandwidth_candidates: tuple[float, ...] = (4.0, 6.0, 8.0, 10.0, 12.0, 16.0)
    shrink_candidates: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    sweep_metric: Literal["f1", "seg", "accuracy"] = "f1"
    sweep_threshold: float = Field(default=0.5, gt=0, le=1)

    @field_validator("tile_size")
    @classmethod
    def _even_tile(cls, value: int) -> int:
        if value % 2:
            raise ValueError("tile_size must be even")
        return value

    @field_validator("shrink_candidates")
    @classmethod
    def _shrink_range(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(s < 0 or s > 6 for s in value):
            raise ValueError("shrink candidates must lie in [0, 6]")
        return tuple(value)


class DataConfig(_Section):
    """Synthetic data, scale handling and pseudo-dataset construction."""
    images: int = Field(default=50, ge=0)
    eval_fraction: float = Field(default=0.2, ge=0, le=1)
    canvas_size: int = Field(default=252, ge=20)
    object_count: int = Field(default=12, ge=0)
    radius_min: float = Field(default=8.0, gt=0)
    radius_max: float = Field(default=14.0, gt=0)
    eccentricity_min: float = Field(default=0.0, ge=0, lt=1)
    eccentricity_max: float = Field(default=0.6, ge=0, lt=1)
    background_mean: float = 0.1
    noise_std: float = Field(default=0.02, ge=0)
    min_gap: int = Field(default=2, ge=0)
    scale_factor: float = Field(default=1.0, gt=0)
    annotation_fraction: float = Field(default=0.1, ge=0, le=1)
    background_distance: float = Field(default=30.0, gt=0)


class TheoryConfig(_Section):
    scenes: int = Field(default=500, gt=0)
    objects: int = Field(default=30, gt=0)
    canvas_size: int = Field(default=511, gt=0)
    template_diameter: int = Field(default=16, gt=2)
    patch_size: int = Field(default=3, gt=0)
    boundary: Literal["periodic", "bounded"] = "periodic"
    patch_a: tuple[int, int] = (8, 2)
    patch_b: tuple[int, int] = (8, 14)


class RunConfig(_Section):
    """Effective configuration of one run; every field has a default."""
    seed: int = 0
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    segment: SegmenterConfig = SegmenterConfig()
    data: DataConfig = DataConfig()
    theory: TheoryConfig = TheoryConfig()


def load_run_config(path: str | None = None, seed: int | None = None, overrides: dict | None = None) -> RunConfig:
    """Reads a JSON run configuration and merges it with the defaults.

    Args:
        path: UTF-8 JSON file holding an object with any subset of the
            sections; None selects all defaults.
        seed: Global seed override from the command line.
        overrides: Per-section values from command-line flags, e.g.
            {"train": {"epochs": 5}}; None values are ignored.

    Returns:
        The validated configuration.

    Raises:
        ConfigError: The file is not a JSON object or contains unknown keys
            or out-of-range values.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                raw = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    if seed is not None:
        raw = {**raw, "seed": seed}
    for section, values in (overrides or {}).items():
        values = {key: value for key, value in values.items() if value is not None}
        if values:
            current = raw.get(section, {})
            if not isinstance(current, dict):
                raise ConfigError(f"config section {section!r} must be a JSON object")
            raw = {**raw, section: {**current, **values}}
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def write_effective_config(out_dir: str, config: RunConfig) -> str:
    """Echoes the effective configuration next to a command's outputs.

    Returns:
        Path of the written `run_config.json`.
    """
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, Defaults().RUN_CONFIG)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config.model_dump(mode="json"), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path
