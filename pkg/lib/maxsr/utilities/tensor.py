"""
A small dense tensor engine with reverse-mode differentiation.

Tensors hold numpy arrays in (batch, channel, height, width) layout and are
treated as immutable once created, apart from their gradient accumulator.
Every differentiable operation is a `Function` subclass; applying one records
the producing node on its output so `backward` can walk the graph in reverse
topological order.
"""

import contextlib
import logging
import threading
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from maxsr.errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]
Grads = Tuple[Optional[np.ndarray], ...]

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward operations without recording a graph."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Create new tensors with `dtype` (float32 or float64) inside the block."""
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor dtype {resolved}")
    previous = get_default_dtype()
    _local.dtype = resolved
    try:
        yield
    finally:
        _local.dtype = previous


def _check_finite(array: np.ndarray, origin: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{origin} produced non-finite values")


class Function:
    """Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor") -> None:
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Grads:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(tensor.data for tensor in tensors), **kwargs)
        _check_finite(out, cls.__name__)
        record = is_grad_enabled() and any(t.requires_grad for t in tensors)

        return Tensor._from_op(out, func if record else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum a broadcast gradient back down to `shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)

        return grad


class Tensor:
    """A dense array of rank at most 4 with optional gradient state.

    Attributes:
        data: np.ndarray
            The values, float32 by default or float64 in gradient-check mode.
        grad: np.ndarray or None
            Accumulated gradient of the last backward passes, same shape as data.
        creator: Function or None
            The operation that produced this tensor; None for leaves.
        requires_grad: bool
            Whether backward should deliver a gradient to this tensor.
    """

    MAX_RANK = 4

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[Any] = None,
    ) -> None:
        array = np.array(data, dtype=dtype or get_default_dtype())
        if array.ndim > self.MAX_RANK:
            raise ShapeError(f"Tensors have rank <= 4, got shape {array.shape}")
        _check_finite(array, "Tensor construction")

        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.requires_grad = requires_grad

    @classmethod
    def _from_op(cls, array: np.ndarray, creator: Optional[Function]) -> "Tensor":
        if array.ndim > cls.MAX_RANK:
            raise ShapeError(f"Tensors have rank <= 4, got shape {array.shape}")
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.grad = None
        tensor.creator = creator
        tensor.requires_grad = creator is not None

        return tensor

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"Gradient shape {grad.shape} != tensor {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype)
        else:
            self.grad = self.grad + grad

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        if not isinstance(other, Tensor):
            return scale(self, 1.0, shift=float(other))
        return add(self, other)

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        if not isinstance(other, Tensor):
            return scale(self, 1.0, shift=-float(other))
        return add(self, scale(other, -1.0))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if not isinstance(other, Tensor):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return batched_matmul(self, other)

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mean.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes)


class GradTape:
    """Operations that produced a tensor, in topological order.

    Every node appears after all producers of its inputs, so walking the tape
    backwards visits each node exactly once with its full gradient.
    """

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every leaf that `loss` depends on.

    Gradients accumulate across calls until the leaves are zeroed.

    Raises:
        GraphError: if the loss is not a scalar or is detached from any leaf.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("Loss is detached: no recorded operation leads to a leaf")

    tape = GradTape.record(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.accumulate(grad)
            continue
        input_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.tensors, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


# Elementwise and reduction operations


class Add(Function):
    def forward(  # type: ignore[override]
        self, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as err:
            raise ShapeError(f"Cannot add shapes {a.shape} and {b.shape}") from err
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Grads:
        return (
            self.unbroadcast(grad, self.shapes[0]),
            self.unbroadcast(grad, self.shapes[1]),
        )


class Mul(Function):
    def forward(  # type: ignore[override]
        self, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as err:
            raise ShapeError(f"Cannot multiply shapes {a.shape} and {b.shape}") from err
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Grads:
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Scale(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, factor: float = 1.0, shift: float = 0.0
    ) -> np.ndarray:
        self.factor = factor
        return x * x.dtype.type(factor) + x.dtype.type(shift)

    def backward(self, grad: np.ndarray) -> Grads:
        return (grad * grad.dtype.type(self.factor),)


class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        return (np.full(self.shape, grad.reshape(-1)[0], dtype=grad.dtype),)


class Mean(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        count = int(np.prod(self.shape))
        return (np.full(self.shape, grad.reshape(-1)[0] / count, dtype=grad.dtype),)


class Abs(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad: np.ndarray) -> Grads:
        return (grad * self.sign,)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad: np.ndarray) -> Grads:
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = special.expit(x)
        return self.out

    def backward(self, grad: np.ndarray) -> Grads:
        return (grad * self.out * (1 - self.out),)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.x = x
        self.cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        return (x * self.cdf).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        pdf = np.exp(-0.5 * self.x**2) / np.sqrt(2.0 * np.pi)
        return ((grad * (self.cdf + self.x * pdf)).astype(grad.dtype),)


# Shape operations


class Reshape(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, shape: Tuple[int, ...] = ()
    ) -> np.ndarray:
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as err:
            raise ShapeError(f"Cannot reshape {x.shape} to {shape}") from err

    def backward(self, grad: np.ndarray) -> Grads:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, axes: Tuple[int, ...] = ()
    ) -> np.ndarray:
        self.axes = axes
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad: np.ndarray) -> Grads:
        return (np.ascontiguousarray(grad.transpose(np.argsort(self.axes))),)


class SliceLast(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, start: int = 0, stop: int = 0
    ) -> np.ndarray:
        self.shape, self.start, self.stop = x.shape, start, stop
        return np.ascontiguousarray(x[..., start:stop])

    def backward(self, grad: np.ndarray) -> Grads:
        full = np.zeros(self.shape, dtype=grad.dtype)
        full[..., self.start : self.stop] = grad
        return (full,)


class Concat(Function):
    def forward(  # type: ignore[override]
        self, *arrays: np.ndarray, axis: int = 1
    ) -> np.ndarray:
        reference = arrays[0].shape
        for array in arrays[1:]:
            other = array.shape
            if len(other) != len(reference) or any(
                a != b for i, (a, b) in enumerate(zip(reference, other)) if i != axis
            ):
                raise ShapeError(f"Cannot concatenate {reference} with {other}")
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Grads:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Pad2d(Function):
    """Zero padding at the bottom and right of the two trailing axes."""

    def forward(  # type: ignore[override]
        self, x: np.ndarray, height: int = 0, width: int = 0
    ) -> np.ndarray:
        h, w = x.shape[-2:]
        if height < h or width < w:
            raise ShapeError(f"Cannot pad {h}x{w} down to {height}x{width}")
        self.h, self.w = h, w
        widths = [(0, 0)] * (x.ndim - 2) + [(0, height - h), (0, width - w)]
        return np.pad(x, widths)

    def backward(self, grad: np.ndarray) -> Grads:
        return (np.ascontiguousarray(grad[..., : self.h, : self.w]),)


class Crop2d(Function):
    """Top-left crop of the two trailing axes."""

    def forward(  # type: ignore[override]
        self, x: np.ndarray, height: int = 0, width: int = 0
    ) -> np.ndarray:
        h, w = x.shape[-2:]
        if height > h or width > w:
            raise ShapeError(f"Cannot crop {h}x{w} to {height}x{width}")
        self.h, self.w = h, w
        return np.ascontiguousarray(x[..., :height, :width])

    def backward(self, grad: np.ndarray) -> Grads:
        height, width = grad.shape[-2:]
        widths = [(0, 0)] * (grad.ndim - 2)
        widths += [(0, self.h - height), (0, self.w - width)]
        return (np.pad(grad, widths),)


class Take(Function):
    """Gather columns of a [heads, K] table with an integer index array."""

    def forward(  # type: ignore[override]
        self, table: np.ndarray, index: Optional[np.ndarray] = None
    ) -> np.ndarray:
        assert index is not None
        if index.min() < 0 or index.max() >= table.shape[1]:
            raise ShapeError(f"Index out of range for table {table.shape}")
        self.index, self.width = index, table.shape[1]
        return table[:, index]

    def backward(self, grad: np.ndarray) -> Grads:
        flat = self.index.reshape(-1)
        rows = [
            np.bincount(flat, weights=g.reshape(-1), minlength=self.width)
            for g in grad
        ]
        return (np.stack(rows).astype(grad.dtype),)


class PixelShuffle(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, r: int = 1
    ) -> np.ndarray:
        n, channels, h, w = x.shape
        if r < 1 or channels % (r * r):
            raise ShapeError(f"{channels} channels are not divisible by r^2={r * r}")
        c = channels // (r * r)
        self.r, self.shape = r, x.shape
        out = x.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(out.reshape(n, c, h * r, w * r))

    def backward(self, grad: np.ndarray) -> Grads:
        n, channels, h, w = self.shape
        r = self.r
        g = grad.reshape(n, channels // (r * r), h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(g.reshape(self.shape)),)


class PixelUnshuffle(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, r: int = 1
    ) -> np.ndarray:
        n, c, hr, wr = x.shape
        if r < 1 or hr % r or wr % r:
            raise ShapeError(f"Extents {hr}x{wr} are not divisible by r={r}")
        self.r, self.shape = r, x.shape
        out = x.reshape(n, c, hr // r, r, wr // r, r).transpose(0, 1, 3, 5, 2, 4)
        return np.ascontiguousarray(out.reshape(n, c * r * r, hr // r, wr // r))

    def backward(self, grad: np.ndarray) -> Grads:
        n, c, hr, wr = self.shape
        r = self.r
        g = grad.reshape(n, c, r, r, hr // r, wr // r).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(g.reshape(self.shape)),)


class GlobalAvgPool(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad: np.ndarray) -> Grads:
        count = self.shape[2] * self.shape[3]
        return (np.broadcast_to(grad / count, self.shape).copy(),)


# Linear algebra


class BatchedMatmul(Function):
    def forward(  # type: ignore[override]
        self, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        if (
            a.ndim < 2
            or a.ndim != b.ndim
            or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]
        ):
            raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Grads:
        return (
            np.matmul(grad, np.swapaxes(self.b, -1, -2)),
            np.matmul(np.swapaxes(self.a, -1, -2), grad),
        )


class Linear(Function):
    """x[..., C] @ weight[C, D] + bias[D]."""

    def forward(  # type: ignore[override]
        self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray
    ) -> np.ndarray:
        if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"Linear of {x.shape} with weight {weight.shape}, bias {bias.shape}"
            )
        self.x, self.weight = x, weight
        return np.matmul(x, weight) + bias

    def backward(self, grad: np.ndarray) -> Grads:
        d_in, d_out = self.weight.shape
        flat_x = self.x.reshape(-1, d_in)
        flat_g = grad.reshape(-1, d_out)
        return (
            np.matmul(grad, self.weight.T),
            np.matmul(flat_x.T, flat_g),
            flat_g.sum(axis=0),
        )


class Softmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Grads:
        inner = (grad * self.out).sum(axis=-1, keepdims=True)
        return (self.out * (grad - inner),)


class Conv2d(Function):
    """Grouped 2-D cross-correlation computed over strided window views."""

    def forward(  # type: ignore[override]
        self,
        x: np.ndarray,
        weight: np.ndarray,
        bias: np.ndarray,
        stride: int = 1,
        pad: int = 0,
        groups: int = 1,
    ) -> np.ndarray:
        if x.ndim != 4 or weight.ndim != 4:
            raise ShapeError(f"conv2d needs rank-4 input and weight, got {x.shape}")
        n, c_in, h, w = x.shape
        c_out, c_group, kh, kw = weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"Kernel extents must be odd, got {kh}x{kw}")
        if c_in != c_group * groups or c_out % groups or bias.shape != (c_out,):
            raise ShapeError(
                f"conv2d input {x.shape} does not match weight {weight.shape} "
                f"with groups={groups}"
            )
        if pad < 0 or stride < 1:
            raise ShapeError(f"Invalid stride {stride} / pad {pad}")
        span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
        if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
            raise ShapeError(
                f"Output extent of {h}x{w} with kernel {kh}x{kw}, pad {pad}, "
                f"stride {stride} is not integral"
            )
        h_out, w_out = span_h // stride + 1, span_w // stride + 1

        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = sliding_window_view(padded, (kh, kw), axis=(2, 3))
        cols = cols[:, :, ::stride, ::stride].reshape(
            n, groups, c_group, h_out, w_out, kh, kw
        )
        kernels = weight.reshape(groups, c_out // groups, c_group, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", cols, kernels, optimize=True)

        self.cols, self.kernels = cols, kernels
        self.geometry = (x.shape, weight.shape, stride, pad, groups, padded.shape)
        return out.reshape(n, c_out, h_out, w_out) + bias[None, :, None, None]

    def backward(self, grad: np.ndarray) -> Grads:
        x_shape, w_shape, stride, pad, groups, padded_shape = self.geometry
        n, c_in, h, w = x_shape
        c_out, _, kh, kw = w_shape
        h_out, w_out = grad.shape[2:]

        grouped = grad.reshape(n, groups, c_out // groups, h_out, w_out)
        d_weight = np.einsum(
            "ngchwij,ngohw->gocij", self.cols, grouped, optimize=True
        ).reshape(w_shape)
        d_bias = grad.sum(axis=(0, 2, 3))
        d_cols = np.einsum(
            "gocij,ngohw->ngchwij", self.kernels, grouped, optimize=True
        ).reshape(n, c_in, h_out, w_out, kh, kw)

        d_padded = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * h_out, stride)
                cols = slice(j, j + stride * w_out, stride)
                d_padded[:, :, rows, cols] += d_cols[..., i, j]

        return d_padded[:, :, pad : pad + h, pad : pad + w], d_weight, d_bias


# Normalization


class LayerNorm(Function):
    """Normalize over one axis (channels) at every other position."""

    def forward(  # type: ignore[override]
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        eps: float = 1e-5,
        axis: int = 1,
    ) -> np.ndarray:
        axis = axis % x.ndim
        if gamma.shape != (x.shape[axis],) or beta.shape != gamma.shape:
            raise ShapeError(f"Norm parameters {gamma.shape} do not match {x.shape}")
        view = [1] * x.ndim
        view[axis] = x.shape[axis]
        mean = x.mean(axis=axis, keepdims=True)
        var = x.var(axis=axis, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        self.gamma = gamma.reshape(view)
        self.axis = axis
        return self.x_hat * self.gamma + beta.reshape(view)

    def backward(self, grad: np.ndarray) -> Grads:
        others = tuple(i for i in range(grad.ndim) if i != self.axis)
        d_hat = grad * self.gamma
        d_x = self.inv_std * (
            d_hat
            - d_hat.mean(axis=self.axis, keepdims=True)
            - self.x_hat * (d_hat * self.x_hat).mean(axis=self.axis, keepdims=True)
        )
        return d_x, (grad * self.x_hat).sum(axis=others), grad.sum(axis=others)


class BatchNorm(Function):
    """Batch normalization over (N, H, W) per channel.

    In training mode the batch statistics are used and the running statistics
    arrays are updated in place; otherwise the running statistics are used.
    """

    def forward(  # type: ignore[override]
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        training: bool = False,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ) -> np.ndarray:
        assert running_mean is not None and running_var is not None
        if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
            raise ShapeError(f"Norm parameters {gamma.shape} do not match {x.shape}")
        view = (1, x.shape[1], 1, 1)
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        else:
            mean, var = running_mean, running_var
        self.training = training
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(view)
        self.x_hat = (x - mean.astype(x.dtype).reshape(view)) * self.inv_std
        self.gamma = gamma.reshape(view)
        return self.x_hat * self.gamma + beta.reshape(view)

    def backward(self, grad: np.ndarray) -> Grads:
        axes = (0, 2, 3)
        d_hat = grad * self.gamma
        if self.training:
            d_x = self.inv_std * (
                d_hat
                - d_hat.mean(axis=axes, keepdims=True)
                - self.x_hat * (d_hat * self.x_hat).mean(axis=axes, keepdims=True)
            )
        else:
            d_x = d_hat * self.inv_std
        return d_x, (grad * self.x_hat).sum(axis=axes), grad.sum(axis=axes)


# Functional API


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float, shift: float = 0.0) -> Tensor:
    return Scale.apply(x, factor=factor, shift=shift)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors, axis=1)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceLast.apply(x, start=start, stop=stop)


def pad2d(x: Tensor, height: int, width: int) -> Tensor:
    return Pad2d.apply(x, height=height, width=width)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    return Crop2d.apply(x, height=height, width=width)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    return Take.apply(table, index=index)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    return PixelShuffle.apply(x, r=r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    return PixelUnshuffle.apply(x, r=r)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    return BatchedMatmul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def softmax_lastdim(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, pad=pad, groups=groups)


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = 1
) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps, axis=axis)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )
