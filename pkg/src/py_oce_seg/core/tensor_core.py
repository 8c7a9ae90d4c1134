"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the mini U-Net and the pair loss need are provided. Every
operation is a pure function of its inputs; when a :class:`Tape` is active the
operation records a :class:`TapeNode` so that :meth:`Tape.backward` can replay
the chain in exact reverse creation order.
"""
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from py_oce_seg.core.utils.helpers import PreconditionError


class Tensor:
    """An n-dimensional float array with an optional gradient buffer.

    Data is stored row-major as float32 unless float64 input is given, which
    the gradient-check harness uses to re-execute operations at 64-bit.

    Attributes:
        data (np.ndarray): The values.
        grad (np.ndarray | None): Accumulated gradient, same shape as data.
        requires_grad (bool): Marks trainable leaves.
    """
    def __init__(self, data, requires_grad: bool = False) -> None:
        array = np.asarray(data)
        if array.dtype != np.float64:
            array = array.astype(np.float32)
        self.data: np.ndarray = np.require(array, requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise PreconditionError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={'yes' if self.grad is not None else 'no'})"


@dataclass
class TapeNode:
    """One recorded operation: its id, inputs, output and saved values."""
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


BackwardFn = Callable[[TapeNode, np.ndarray], Sequence[np.ndarray | None]]
_BACKWARD: dict[str, BackwardFn] = {}
_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


def register_backward(op: str) -> Callable[[BackwardFn], BackwardFn]:
    """Registers the backward rule of an operation id."""
    def decorator(fn: BackwardFn) -> BackwardFn:
        _BACKWARD[op] = fn
        return fn
    return decorator


class Tape:
    """Records operations while active and runs them backwards.

    A tape belongs to one training step and one thread; use it as a context
    manager around the forward pass::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """
    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, **saved) -> None:
        if op not in _BACKWARD:
            raise KeyError(f"no backward rule registered for {op!r}")
        self.nodes.append(TapeNode(op, tuple(inputs), output, saved))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagates gradients from `output` to every recorded input.

        Args:
            output: The tensor to differentiate, usually a scalar loss.
            grad: Upstream gradient; defaults to ones (d output / d output).
        """
        seed = np.ones_like(output.data) if grad is None else np.asarray(grad, dtype=output.dtype)
        output.accumulate_grad(seed)
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            grads = _BACKWARD[node.op](node, upstream)
            for tensor, input_grad in zip(node.inputs, grads):
                if input_grad is not None:
                    tensor.accumulate_grad(input_grad)


def record(op: str, inputs: Sequence[Tensor], output: Tensor, **saved) -> Tensor:
    """Records an operation on the active tape, if any, and returns its output."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(op, inputs, output, **saved)
    return output


def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation of a [C, H, W] input with [F, C, k, k] filters.

    Raises:
        PreconditionError: Channel mismatch, kernel size other than 1 or 3,
            or an input smaller than the kernel.
    """
    channels, height, width = x.shape
    filters, weight_channels, k, k2 = weight.shape
    if weight_channels != channels:
        raise PreconditionError(f"input has {channels} channels but weights expect {weight_channels}")
    if k != k2 or k not in (1, 3):
        raise PreconditionError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
    if bias.shape != (filters,):
        raise PreconditionError(f"bias shape {bias.shape} does not match {filters} filters")
    if height < k or width < k:
        raise PreconditionError(f"input {height}x{width} is smaller than the {k}x{k} kernel")
    out_h, out_w = height - k + 1, width - k + 1
    out = np.empty((filters, out_h, out_w), dtype=x.dtype)
    out[...] = bias.data[:, None, None]
    for u in range(k):
        for v in range(k):
            out += np.tensordot(weight.data[:, :, u, v], x.data[:, u:u + out_h, v:v + out_w], axes=(1, 0))
    return record("conv2d_valid", (x, weight, bias), Tensor(out))


@register_backward("conv2d_valid")
def _conv2d_valid_backward(node: TapeNode, grad: np.ndarray):
    x, weight, _ = node.inputs
    k = weight.shape[2]
    out_h, out_w = grad.shape[1:]
    grad_x = np.zeros_like(x.data)
    grad_w = np.empty_like(weight.data)
    for u in range(k):
        for v in range(k):
            window = x.data[:, u:u + out_h, v:v + out_w]
            grad_w[:, :, u, v] = np.tensordot(grad, window, axes=([1, 2], [1, 2]))
            grad_x[:, u:u + out_h, v:v + out_w] += np.tensordot(weight.data[:, :, u, v], grad, axes=(0, 0))
    return grad_x, grad_w, grad.sum(axis=(1, 2))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), Tensor(np.where(mask, x.data, 0).astype(x.dtype)), mask=mask)


@register_backward("relu")
def _relu_backward(node: TapeNode, grad: np.ndarray):
    # subgradient 0 at exactly 0
    return (np.where(node.saved["mask"], grad, 0).astype(grad.dtype),)


def _pool_blocks(x: Tensor) -> np.ndarray:
    channels, height, width = x.shape
    if height % 2 or width % 2:
        raise PreconditionError(f"2x2 pooling needs even height and width, got {height}x{width}")
    blocks = x.data.reshape(channels, height // 2, 2, width // 2, 2).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(channels, height // 2, width // 2, 4)


def _unpool_blocks(blocks: np.ndarray) -> np.ndarray:
    channels, half_h, half_w, _ = blocks.shape
    return blocks.reshape(channels, half_h, half_w, 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        channels, 2 * half_h, 2 * half_w
    )


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first row-major maximum."""
    blocks = _pool_blocks(x)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return record("maxpool2", (x,), Tensor(out), argmax=argmax)


@register_backward("maxpool2")
def _maxpool2_backward(node: TapeNode, grad: np.ndarray):
    argmax = node.saved["argmax"]
    routed = np.zeros(argmax.shape + (4,), dtype=grad.dtype)
    np.put_along_axis(routed, argmax[..., None], grad[..., None], axis=-1)
    return (_unpool_blocks(routed),)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping average pooling."""
    out = _pool_blocks(x).mean(axis=-1, dtype=x.dtype)
    return record("avgpool2", (x,), Tensor(out))


@register_backward("avgpool2")
def _avgpool2_backward(node: TapeNode, grad: np.ndarray):
    spread = np.repeat((grad / 4)[..., None], 4, axis=-1)
    return (_unpool_blocks(spread).astype(grad.dtype),)


def upsample_nearest2(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return record("upsample_nearest2", (x,), Tensor(out))


@register_backward("upsample_nearest2")
def _upsample_nearest2_backward(node: TapeNode, grad: np.ndarray):
    channels, height, width = grad.shape
    return (grad.reshape(channels, height // 2, 2, width // 2, 2).sum(axis=(2, 4)),)


def crop_concat(skip: Tensor, up: Tensor) -> Tensor:
    """Center-crops `skip` to the spatial size of `up` and stacks the channels.

    The crop starts at floor((H1 - H2) / 2) and floor((W1 - W2) / 2).
    """
    skip_c, skip_h, skip_w = skip.shape
    _, up_h, up_w = up.shape
    if skip_h < up_h or skip_w < up_w:
        raise PreconditionError(f"skip {skip_h}x{skip_w} is smaller than upsampled {up_h}x{up_w}")
    top, left = (skip_h - up_h) // 2, (skip_w - up_w) // 2
    cropped = skip.data[:, top:top + up_h, left:left + up_w]
    out = np.concatenate([cropped, up.data.astype(skip.dtype)], axis=0)
    return record("crop_concat", (skip, up), Tensor(out), top=top, left=left, skip_channels=skip_c)


@register_backward("crop_concat")
def _crop_concat_backward(node: TapeNode, grad: np.ndarray):
    skip, _ = node.inputs
    top, left, skip_c = node.saved["top"], node.saved["left"], node.saved["skip_channels"]
    _, up_h, up_w = grad.shape
    grad_skip = np.zeros_like(skip.data)
    grad_skip[:, top:top + up_h, left:left + up_w] = grad[:skip_c]
    return grad_skip, grad[skip_c:]


def gather_coords(field_tensor: Tensor, coords: np.ndarray) -> Tensor:
    """Extracts the channel vector at each (row, col) coordinate.

    Args:
        field_tensor: A [C, H, W] field.
        coords: Integer array of shape (N, 2).

    Returns:
        A [N, C] tensor.

    Raises:
        PreconditionError: A coordinate lies outside the field.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    _, height, width = field_tensor.shape
    rows, cols = coords[:, 0], coords[:, 1]
    if coords.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= height or cols.max() >= width):
        raise PreconditionError(f"coordinates out of bounds for a {height}x{width} field")
    out = field_tensor.data[:, rows, cols].T
    return record("gather_coords", (field_tensor,), Tensor(out), rows=rows, cols=cols)


@register_backward("gather_coords")
def _gather_coords_backward(node: TapeNode, grad: np.ndarray):
    (field_tensor,) = node.inputs
    grad_field = np.zeros_like(field_tensor.data)
    # duplicates accumulate
    np.add.at(grad_field, (slice(None), node.saved["rows"], node.saved["cols"]), grad.T)
    return (grad_field,)


def gradcheck(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Compares analytic and central-difference gradients at 64-bit.

    The scalar checked is a random projection of `fn`'s output.

    Args:
        fn: Callable mapping tensors to one output tensor.
        arrays: Inputs; every input is checked.
        eps: Finite-difference step.
        seed: Seed of the random projection.

    Returns:
        The largest relative error over all inputs, measured as
        ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    with Tape() as tape:
        out = fn(*tensors)
    projection = rng.standard_normal(out.shape)
    tape.backward(out, projection)

    def projected(values: list[np.ndarray]) -> float:
        return float(np.sum(fn(*[Tensor(v) for v in values]).data * projection))

    worst = 0.0
    for index, array in enumerate(inputs):
        analytic = tensors[index].grad if tensors[index].grad is not None else np.zeros_like(array)
        numeric = np.zeros_like(array)
        for position in np.ndindex(array.shape):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[index][position] += eps
            minus[index][position] -= eps
            numeric[position] = (projected(plus) - projected(minus)) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
