"""Pair sampling and the unsupervised object-centric embedding loss.

For a pair of output pixels (i, j) the loss compares the spatial offset
d(i, j) = i - j with the embedding offset r_i - r_j through the damped distance
sigma(delta) = 1 / (1 + exp(-||delta||^2 / tau)), and adds an L2 penalty on the
anchor embeddings.
"""
import math
from dataclasses import dataclass

import numpy as np

from py_oce_seg.core.tensor_core import Tape, TapeNode, Tensor, gather_coords, record, register_backward
from py_oce_seg.core.utils.config import LossConfig
from py_oce_seg.core.utils.helpers import PreconditionError


@dataclass(frozen=True)
class PairSet:
    """Anchor/partner coordinates on the output grid, one partner per anchor.

    Attributes:
        anchors: Integer array (N, 2) of (row, col).
        partners: Integer array (N, 2) of (row, col).
    """
    anchors: np.ndarray
    partners: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def offsets(self) -> np.ndarray:
        """Spatial offsets d(i, j) = anchor - partner as floats."""
        return (self.anchors - self.partners).astype(np.float64)


def sample_pairs(field_shape: tuple[int, int], config: LossConfig, rng: np.random.Generator) -> PairSet:
    """Samples anchors uniformly without replacement and one partner each.

    Partners are drawn uniformly from the in-bounds pixels within distance
    kappa of their anchor (anchor excluded) by rejection sampling.

    Raises:
        PreconditionError: The field is not larger than 2 * kappa per side.
    """
    height, width = field_shape
    kappa = config.kappa
    if height <= 2 * kappa or width <= 2 * kappa:
        raise PreconditionError(f"field {height}x{width} must exceed 2*kappa={2 * kappa:g} per side")
    count = int(math.floor(config.anchor_density * height * width))
    flat = rng.choice(height * width, size=count, replace=False)
    anchors = np.stack(np.divmod(flat, width), axis=1).astype(np.int64)
    partners = np.empty_like(anchors)
    reach = int(math.floor(kappa))
    pending = np.arange(count)
    while pending.size:
        steps = rng.integers(-reach, reach + 1, size=(pending.size, 2))
        candidates = anchors[pending] + steps
        dist2 = (steps ** 2).sum(axis=1)
        accepted = (
            (dist2 > 0)
            & (dist2 <= kappa ** 2)
            & (candidates[:, 0] >= 0)
            & (candidates[:, 0] < height)
            & (candidates[:, 1] >= 0)
            & (candidates[:, 1] < width)
        )
        partners[pending[accepted]] = candidates[accepted]
        pending = pending[~accepted]
    return PairSet(anchors, partners)


def sigma(delta: np.ndarray, tau: float) -> np.ndarray:
    """Sigmoid distance (1 + exp(-||delta||^2 / tau))^-1 over the last axis.

    Lies in [0.5, 1); equals 0.5 exactly at delta = 0.
    """
    delta = np.asarray(delta)
    return 1.0 / (1.0 + np.exp(-np.sum(delta * delta, axis=-1) / tau))


def sigma_grad(delta: np.ndarray, tau: float) -> np.ndarray:
    """Gradient of sigma with respect to delta, same shape as delta."""
    delta = np.asarray(delta)
    value = sigma(delta, tau)
    return (value * (1.0 - value) * 2.0 / tau)[..., None] * delta


def pair_loss(anchor_vectors: Tensor, partner_vectors: Tensor, offsets: np.ndarray, tau: float,
              reg_lambda: float) -> Tensor:
    """Scalar loss sum sigma(d - (r_a - r_p)) + reg_lambda * sum ||r_a||_2."""
    dtype = anchor_vectors.dtype
    residual = offsets.astype(dtype) - (anchor_vectors.data - partner_vectors.data)
    anchor_norm = np.sqrt(np.sum(anchor_vectors.data * anchor_vectors.data, axis=1))
    total = np.sum(sigma(residual, tau)) + reg_lambda * np.sum(anchor_norm)
    return record(
        "oce_pair_loss",
        (anchor_vectors, partner_vectors),
        Tensor(np.asarray(total, dtype=dtype)),
        residual=residual,
        anchor_norm=anchor_norm,
        tau=tau,
        reg_lambda=reg_lambda,
    )


@register_backward("oce_pair_loss")
def _pair_loss_backward(node: TapeNode, grad: np.ndarray):
    anchor_vectors, _ = node.inputs
    upstream = grad.item()
    d_residual = sigma_grad(node.saved["residual"], node.saved["tau"]) * upstream
    norm = node.saved["anchor_norm"]
    safe = np.where(norm > 0, norm, 1.0)
    # subgradient 0 where the anchor embedding vanishes
    d_reg = np.where((norm > 0)[:, None], anchor_vectors.data / safe[:, None], 0.0)
    grad_anchor = -d_residual + node.saved["reg_lambda"] * upstream * d_reg
    dtype = anchor_vectors.dtype
    return grad_anchor.astype(dtype), d_residual.astype(dtype)


def oce_loss(field_tensor: Tensor, pairs: PairSet, config: LossConfig) -> Tensor:
    """Loss of a dense [2, H, W] offset field on a pair set.

    Gradients flow back to the field through `gather_coords`.
    """
    anchor_vectors = gather_coords(field_tensor, pairs.anchors)
    partner_vectors = gather_coords(field_tensor, pairs.partners)
    return pair_loss(anchor_vectors, partner_vectors, pairs.offsets, config.tau, config.reg_lambda)


def oce_loss_and_grad(field: np.ndarray, pairs: PairSet, config: LossConfig) -> tuple[float, np.ndarray]:
    """Evaluates the loss and its gradient with respect to the field.

    Returns:
        The scalar loss and an array shaped like `field`.
    """
    field_tensor = Tensor(field, requires_grad=True)
    with Tape() as tape:
        loss = oce_loss(field_tensor, pairs, config)
    tape.backward(loss)
    return loss.item(), field_tensor.grad
