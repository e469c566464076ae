"""Dense tensors and tape-based reverse-mode differentiation.

Every differentiable operation in this module is a plain function that computes its result
with numpy and, when a :class:`Tape` is active on the calling thread and any operand requires
gradients, records a node holding the operands, the result and a closure computing the
operand gradients. :func:`backward` replays the tape in reverse recording order, which is a
reverse topological order because an operation can only consume tensors that already exist.

Layout is row-major and channels-last; spatial operations take ``T x F x C`` or
``B x T x F x C`` arrays.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import MtfattError

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DimensionError(MtfattError):
    """Exception raised when operand shapes or axes are incompatible."""

    error_type = "dimension_error"


class GradientError(MtfattError):
    """Exception raised when backward cannot run (non-scalar loss, detached graph, replayed tape)."""

    error_type = "gradient_error"


class Tensor:
    """A dense real array, optionally tracked for gradients.

    The data array is treated as immutable once the tensor has been handed to an operation;
    optimizers replace ``data`` rather than writing into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[Union[str, type]] = None, name: Optional[str] = None):
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm: int) -> "Tensor":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)


@dataclass
class Node:
    """One recorded operation: operands, result and the operand-gradient closure."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: "Tape"


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    """The innermost tape active on this thread, if any."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    A tape is owned by one thread and is entered as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        backward(loss)
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GradientError("Cannot record onto a tape that has already been replayed; call reset() first")
        self.nodes.append(node)

    def reset(self) -> None:
        """Drop all recorded nodes so the tape can be reused for another step."""
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every gradient-tracking leaf reachable from ``loss``."""
        if loss.size != 1 or loss.ndim > 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise GradientError("Loss was not produced under this tape (detached graph)")
        if self.consumed:
            raise GradientError("Tape already replayed; call reset() before another backward pass")
        self.consumed = True

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = 0
        for node in reversed(self.nodes):
            out_grad = pending.pop(id(node.output), None)
            if out_grad is None:
                continue
            visited += 1
            input_grads = node.backward(out_grad)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=tensor.dtype)
                if tensor._node is None:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + grad if key in pending else grad
        logger.debug(f"Backward visited {visited} of {len(self.nodes)} recorded nodes")


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Run operations unrecorded, even when a tape is active on this thread."""
    if not hasattr(_local, "stack"):
        _local.stack = []
    _local.stack.append(None)
    try:
        yield
    finally:
        _local.stack.pop()


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss on the tape that produced it."""
    if loss._node is None:
        raise GradientError("Loss is not attached to a tape (detached graph)")
    loss._node.tape.backward(loss)


def _record(op: str, inputs: Sequence[Tensor], data: np.ndarray, grad_fn: BackwardFn) -> Tensor:
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, dtype=data.dtype)
    if tracked:
        node = Node(op=op, inputs=tuple(inputs), output=out, backward=grad_fn, tape=tape)
        tape.record(node)
        out._node = node
    return out


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-tracking tensors in the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"Axis {axis} out of range for a tensor of rank {ndim}")
    return axis % ndim


def _binary_operands(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"Shapes {a.shape} and {b.shape} do not broadcast")
    return a, b


# Elementwise arithmetic


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record("mul", (a, b), a.data * b.data, lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def tabs(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at zero is zero."""
    return _record("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    negative = alpha * np.expm1(np.minimum(x.data, 0.0))
    y = np.where(x.data >= 0, x.data, negative).astype(x.dtype)
    return _record("elu", (x,), y, lambda g: (g * np.where(x.data >= 0, 1.0, negative + alpha),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data).astype(x.dtype)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


# Reductions


def tsum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(_normalize_axis(a, x.ndim) for a in axes))
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", (x,), y, grad_fn)


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("Mean of an empty tensor")
    count = x.size
    y = np.asarray(x.data.sum() / count, dtype=x.dtype)
    return _record("mean", (x,), y, lambda g: (np.broadcast_to(g / count, x.shape),))


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    y = np.matmul(a.data, b.data)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), y, grad_fn)


def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``a / scale``, stabilized by row-max subtraction."""
    if not scale > 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    z = a.data / scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(a.dtype)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner) / scale,)

    return _record("softmax", (a,), y, grad_fn)


# Structural operations


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"Cannot reshape {x.shape} into {shape}")
    return _record("reshape", (x,), y, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(_normalize_axis(p, x.ndim) for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"Invalid permutation {perm} for a tensor of rank {x.ndim}")
    inverse = tuple(np.argsort(perm))
    return _record("transpose", (x,), np.transpose(x.data, perm), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _normalize_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise DimensionError(f"concat shape mismatch along axis {axis}: {tensors[0].shape} vs {t.shape}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tuple(tensors), y, lambda g: tuple(np.split(g, bounds, axis=axis)))


def tslice(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    if start < 0 or length <= 0 or start + length > x.shape[axis]:
        raise DimensionError(f"Slice [{start}:{start + length}] out of range for axis {axis} of size {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("slice", (x,), x.data[index], grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along a new axis (reshape to a unit axis, then concatenate)."""
    if not tensors:
        raise DimensionError("stack needs at least one tensor")
    ndim = tensors[0].ndim + 1
    axis = _normalize_axis(axis, ndim)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# Convolution


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """Output size ceil(size/stride) and the (before, after) zeros; the extra zero goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _as_batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"Expected a T x F x C or B x T x F x C tensor, got shape {x.shape}")


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: Tuple[int, int]) -> np.ndarray:
    kh, kw, _, cout = w.shape
    st, sf = stride
    batch, frames, bins, _ = x.shape
    out_t, pt0, pt1 = same_padding(frames, kh, st)
    out_f, pf0, pf1 = same_padding(bins, kw, sf)
    padded = np.pad(x, ((0, 0), (pt0, pt1), (pf0, pf1), (0, 0)))
    y = np.zeros((batch, out_t, out_f, cout), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, i : i + st * (out_t - 1) + 1 : st, j : j + sf * (out_f - 1) + 1 : sf, :]
            y += patch @ w[i, j]
    return y


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: Tuple[int, int], in_shape: Tuple[int, ...]) -> np.ndarray:
    kh, kw, _, _ = w.shape
    st, sf = stride
    batch, frames, bins, cin = in_shape
    out_t, pt0, pt1 = same_padding(frames, kh, st)
    out_f, pf0, pf1 = same_padding(bins, kw, sf)
    padded = np.zeros((batch, frames + pt0 + pt1, bins + pf0 + pf1, cin), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            padded[:, i : i + st * (out_t - 1) + 1 : st, j : j + sf * (out_f - 1) + 1 : sf, :] += g @ w[i, j].T
    return padded[:, pt0 : pt0 + frames, pf0 : pf0 + bins, :]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, w_shape: Tuple[int, ...], stride: Tuple[int, int]) -> np.ndarray:
    kh, kw, cin, cout = w_shape
    st, sf = stride
    _, frames, bins, _ = x.shape
    out_t, pt0, pt1 = same_padding(frames, kh, st)
    out_f, pf0, pf1 = same_padding(bins, kw, sf)
    padded = np.pad(x, ((0, 0), (pt0, pt1), (pf0, pf1), (0, 0)))
    flat_g = g.reshape(-1, cout)
    dw = np.zeros(w_shape, dtype=np.result_type(x, g))
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, i : i + st * (out_t - 1) + 1 : st, j : j + sf * (out_f - 1) + 1 : sf, :]
            dw[i, j] = patch.reshape(-1, cin).T @ flat_g
    return dw


def _check_kernel(w: Tensor, channels: int, channel_axis: int, op: str) -> None:
    if w.ndim != 4:
        raise DimensionError(f"{op} kernel must be kh x kw x Cin x Cout, got shape {w.shape}")
    kh, kw = w.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"{op} kernel dimensions must be odd, got {(kh, kw)}")
    if w.shape[channel_axis] != channels:
        raise DimensionError(f"{op} channel mismatch: input has {channels} channels, kernel shape {w.shape}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: Tuple[int, int] = (1, 1)) -> Tensor:
    """Cross-correlation with "same" zero padding: output spatial size is ceil(in/stride)."""
    x4, squeeze = _as_batched(x.data)
    _check_kernel(w, x4.shape[-1], 2, "conv2d")
    if b is not None and b.shape != (w.shape[3],):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match {w.shape[3]} output channels")
    stride = (int(stride[0]), int(stride[1]))
    y = _conv_forward(x4, w.data, stride)
    if b is not None:
        y = y + b.data
    y = y.astype(x.dtype)

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g4 = g[None] if squeeze else g
        dx = _conv_input_grad(g4, w.data, stride, x4.shape)
        dw = _conv_weight_grad(x4, g4, w.shape, stride)
        grads: List[Optional[np.ndarray]] = [dx[0] if squeeze else dx, dw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 1, 2)))
        return tuple(grads)

    operands = (x, w) if b is None else (x, w, b)
    return _record("conv2d", operands, y[0] if squeeze else y, grad_fn)


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: Tuple[int, int] = (1, 1), target: Tuple[int, int] = None) -> Tensor:
    """Upsampling convolution, the exact adjoint of :func:`conv2d` with the same kernel.

    ``w`` has shape ``kh x kw x Cout x Cin``: it is the kernel of the forward convolution that
    maps a ``target``-sized ``Cout``-channel map onto ``x``. The result is ``Tout x Fout x Cout``.
    """
    x4, squeeze = _as_batched(x.data)
    _check_kernel(w, x4.shape[-1], 3, "conv2d_transpose")
    stride = (int(stride[0]), int(stride[1]))
    if target is None:
        target = (x4.shape[1] * stride[0], x4.shape[2] * stride[1])
    out_t, out_f = int(target[0]), int(target[1])
    for size, out, s, axis in ((x4.shape[1], out_t, stride[0], "time"), (x4.shape[2], out_f, stride[1], "frequency")):
        if not size * s - s + 1 <= out <= size * s:
            raise DimensionError(f"conv2d_transpose target {out} along {axis} unreachable from {size} with stride {s}")
    cout = w.shape[2]
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d_transpose bias shape {b.shape} does not match {cout} output channels")
    out_shape = (x4.shape[0], out_t, out_f, cout)
    y = _conv_input_grad(x4, w.data, stride, out_shape)
    if b is not None:
        y = y + b.data
    y = y.astype(x.dtype)

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g4 = g[None] if squeeze else g
        dx = _conv_forward(g4, w.data, stride)
        dw = _conv_weight_grad(g4, x4, w.shape, stride)
        grads: List[Optional[np.ndarray]] = [dx[0] if squeeze else dx, dw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 1, 2)))
        return tuple(grads)

    operands = (x, w) if b is None else (x, w, b)
    return _record("conv2d_transpose", operands, y[0] if squeeze else y, grad_fn)


# Normalization


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.99, eps: float = 1e-5, dtype: type = np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize over every axis but the last (channel) axis.

    Train mode uses batch statistics and folds them into the running statistics with
    ``running = momentum * running + (1 - momentum) * batch``; infer mode uses the running ones.
    """
    channels = x.shape[-1] if x.ndim else 0
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batchnorm parameters must have shape ({channels},), got {gamma.shape} and {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    count = x.size // max(channels, 1)
    if count == 0:
        raise DimensionError(f"batchnorm on an empty batch of shape {x.shape}")

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.mean = (m * state.mean + (1.0 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1.0 - m) * var).astype(state.var.dtype)
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mu) * inv_std
    y = (gamma.data * x_hat + beta.data).astype(x.dtype)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dgamma = (g * x_hat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dx = (gamma.data * inv_std / count) * (count * g - dbeta - x_hat * dgamma)
        else:
            dx = g * gamma.data * inv_std
        return dx, dgamma, dbeta

    return _record("batchnorm", (x, gamma, beta), y, grad_fn)


# Spectral primitives


def irfft_planes(real: Tensor, imag: Tensor, n_fft: int) -> Tensor:
    """Real inverse DFT of ``n_fft // 2`` retained bins given as separate real/imag planes.

    The Nyquist bin is taken as zero and the imaginary part of the DC bin is ignored, as a
    real inverse transform does. The backward pass is the exact adjoint of this linear map.
    """
    bins = n_fft // 2
    if real.shape != imag.shape or real.shape[-1] != bins:
        raise DimensionError(f"irfft_planes expects matching (..., {bins}) planes, got {real.shape} and {imag.shape}")
    spectrum = np.zeros(real.shape[:-1] + (bins + 1,), dtype=np.complex128)
    spectrum[..., :bins] = real.data + 1j * imag.data
    y = np.fft.irfft(spectrum, n=n_fft, axis=-1).astype(real.dtype)
    weights = np.full(bins, 2.0 / n_fft)
    weights[0] = 1.0 / n_fft

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        spec = np.fft.rfft(g, axis=-1)[..., :bins]
        return spec.real * weights, spec.imag * weights

    return _record("irfft", (real, imag), y, grad_fn)


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Sum frames ``(..., T, n)`` placed ``hop`` samples apart into ``(..., (T-1)*hop + n)``."""
    if frames.ndim < 2:
        raise DimensionError(f"overlap_add expects (..., T, n) frames, got shape {frames.shape}")
    count, width = frames.shape[-2:]
    length = (count - 1) * hop + width
    y = np.zeros(frames.shape[:-2] + (length,), dtype=frames.dtype)
    for t in range(count):
        y[..., t * hop : t * hop + width] += frames.data[..., t, :]

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        windows = np.lib.stride_tricks.sliding_window_view(g, width, axis=-1)[..., ::hop, :]
        return (np.ascontiguousarray(windows[..., :count, :]),)

    return _record("overlap_add", (frames,), y, grad_fn)


# Finite-difference checking


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, index: Tuple[int, ...], step: float = 1e-4) -> float:
    """Central difference of the scalar ``fn()`` with respect to one element of ``tensor``."""
    original = tensor.data
    bumped = original.copy()
    bumped[index] = original[index] + step
    tensor.data = bumped
    upper = float(fn().data)
    bumped = original.copy()
    bumped[index] = original[index] - step
    tensor.data = bumped
    lower = float(fn().data)
    tensor.data = original
    return (upper - lower) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def gradient_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    samples: Optional[int] = None,
    step: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must build a scalar from ``tensors`` and is re-evaluated per probed element, so it
    should be cheap. When ``samples`` is given, that many (tensor, element) pairs are drawn
    at random instead of probing every element. Pairs whose gradients are both below
    ``floor`` in magnitude count as agreeing.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    tape.reset()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    probes: List[Tuple[int, Tuple[int, ...]]] = []
    if samples is None:
        for k, t in enumerate(tensors):
            probes.extend((k, idx) for idx in np.ndindex(t.shape))
    else:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([t.size for t in tensors], dtype=float)
        for _ in range(samples):
            k = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
            probes.append((k, tuple(int(i) for i in np.unravel_index(rng.integers(tensors[k].size), tensors[k].shape))))

    worst = 0.0
    for k, idx in probes:
        numeric = numerical_gradient(fn, tensors[k], idx, step)
        worst = max(worst, relative_error(float(analytic[k][idx]), numeric, floor))
    logger.debug(f"Gradient check over {len(probes)} elements: worst relative error {worst:.3g}")
    return worst
