"""
Dense N-dimensional tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a `Function` subclass. Applying a function to
tensors that require gradients appends a `Node` to the active `Tape`; calling
`backward(loss)` replays the tape in reverse and returns the gradient of the
loss with respect to every leaf tensor that requires gradients. Outside a
`with Tape()` block nothing is recorded.

Layout convention: images and fields are channel-first without a batch axis,
i.e. `(C, *spatial)`. Convolution kernels are `(C_out, C_in, *kernel)`.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Node:
    """One recorded operation: the function instance, its inputs and its output."""

    __slots__ = ('function', 'inputs', 'output')

    def __init__(self, function: 'Function', inputs: Tuple['Tensor', ...], output: 'Tensor'):
        self.function = function
        self.inputs = inputs
        self.output = output


class Tape:
    """
    Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs were produced
    before it (or are leaves). A tape is used by one thread at a time; independent
    tapes may run concurrently in different threads.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def backward(self, loss: 'Tensor', retain: bool = False) -> dict:
        """
        Propagate gradients from a scalar loss back to the leaves of this tape.

        Args:
            loss (Tensor): A single-element tensor.
            retain (bool): Keep the recorded nodes for another backward pass.

        Returns:
            dict: Maps each leaf tensor that requires gradients to its gradient array.

        Raises:
            ShapeError: If the loss has more than one element.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}.")

        gradients = {}
        if not loss.requires_grad:
            logger.debug("backward() on a loss that does not depend on any parameter.")
            if not retain:
                self.clear()
            return gradients

        pending = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            input_grads = node.function.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + input_grad
                else:
                    pending[key] = input_grad
                leaves[key] = tensor

        if id(loss) in pending and not leaves:
            leaves[id(loss)] = loss

        for key, grad in pending.items():
            tensor = leaves.get(key)
            if tensor is None:
                continue
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
            gradients[tensor] = grad

        if not retain:
            self.clear()
        return gradients


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    """Return the innermost active tape of the calling thread, or None outside any `with Tape()`."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate without recording, even for tensors that require gradients."""
    previous = getattr(_local, 'disabled', False)
    _local.disabled = True
    try:
        yield
    finally:
        _local.disabled = previous


def _recording() -> bool:
    return bool(_tape_stack()) and not getattr(_local, 'disabled', False)


class Tensor:
    """
    A dense array together with its differentiation bookkeeping.

    Attributes:
        data (np.ndarray): The values, contiguous, float32 or float64.
        requires_grad (bool): Whether gradients are tracked for this tensor.
        grad (np.ndarray | None): Accumulated gradient after `backward`.
        name (str | None): Optional label, used for parameters.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            array = np.asarray(data)
            dtype = array.dtype if array.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain: bool = False) -> dict:
        return backward(self, retain=retain)

    def _coerce(self, other) -> 'Tensor':
        return as_tensor(other, dtype=self.dtype)

    def __add__(self, other):
        return Add.apply(self, self._coerce(other))

    def __radd__(self, other):
        return Add.apply(self._coerce(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._coerce(other))

    def __rsub__(self, other):
        return Sub.apply(self._coerce(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._coerce(other))

    def __rmul__(self, other):
        return Mul.apply(self._coerce(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._coerce(other))

    def __rtruediv__(self, other):
        return Div.apply(self._coerce(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.size // max(total.size, 1) if axis is not None else self.size
        return total * (1.0 / count)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def backward(loss: Tensor, tape: Optional[Tape] = None, retain: bool = False) -> dict:
    """
    Reverse-mode gradient of a scalar loss over the active (or given) tape.

    Returns:
        dict: Leaf tensor -> gradient array, for every leaf that requires gradients.

    Raises:
        RuntimeError: If no tape is given and none is active.
    """
    tape = tape or current_tape()
    if tape is None:
        raise RuntimeError("backward() needs a tape; record the loss inside `with Tape()`.")
    return tape.backward(loss, retain=retain)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which receives
    the gradient with respect to the output and returns one gradient (or None)
    per input tensor.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(value) for value in inputs)
        function = cls(*tensors)
        out_data = function.forward(*(tensor.data for tensor in tensors), **kwargs)
        requires_grad = _recording() and any(tensor.requires_grad for tensor in tensors)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            current_tape().record(Node(function, tensors, out))
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so `grad` matches `to_shape`."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return self.unbroadcast(grad_a, self.a.shape), self.unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class GetItem(Function):
    """Basic (slice/integer) indexing."""

    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.ascontiguousarray(a[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        full[self.index] += grad
        return (full,)


class LeakyReLU(Function):
    def forward(self, x, slope):
        self.positive = x >= 0
        self.slope = slope
        return np.where(self.positive, x, slope * x)

    def backward(self, grad):
        return (np.where(self.positive, grad, self.slope * grad),)


class ClampMin(Function):
    """Elementwise max(x, floor) for a constant floor; no gradient where the floor is taken."""

    def forward(self, x, floor):
        self.above = x >= floor
        return np.where(self.above, x, floor).astype(x.dtype)

    def backward(self, grad):
        return (np.where(self.above, grad, 0.0),)


def _same_padding(extent: int, kernel: int, stride: int) -> Tuple[int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


class Conv(Function):
    """
    N-dimensional cross-correlation of a `(C_in, *S)` input with a
    `(C_out, C_in, *K)` kernel, implemented with one strided slice per kernel offset.
    """

    def forward(self, x, kernel, bias, stride=1, padding='same'):
        spatial = x.ndim - 1
        if kernel.ndim != spatial + 2:
            raise ShapeError(
                f"Kernel of shape {kernel.shape} does not fit a {spatial}-D input of shape {x.shape}."
            )
        if kernel.shape[1] != x.shape[0]:
            raise ShapeError(
                f"Input has {x.shape[0]} channels but the kernel expects {kernel.shape[1]}."
            )
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"Bias of shape {bias.shape} does not match {kernel.shape[0]} output channels.")
        if min(x.shape) == 0:
            raise ShapeError(f"Cannot convolve a zero-extent input of shape {x.shape}.")

        ksize = kernel.shape[2:]
        if padding == 'same':
            pads = [_same_padding(n, k, stride) for n, k in zip(x.shape[1:], ksize)]
        elif padding == 'valid':
            pads = [(0, 0)] * spatial
            if any(n < k for n, k in zip(x.shape[1:], ksize)):
                raise ShapeError(f"Input {x.shape} is smaller than the kernel {ksize} with valid padding.")
        else:
            raise ValueError(f"Unknown padding mode {padding!r}; use 'same' or 'valid'.")

        padded = np.pad(x, [(0, 0)] + pads)
        out_shape = tuple((p - k) // stride + 1 for p, k in zip(padded.shape[1:], ksize))
        offsets = list(np.ndindex(*ksize))
        cols = np.empty((x.shape[0], len(offsets)) + out_shape, dtype=np.result_type(x, kernel))
        slices = []
        for position, offset in enumerate(offsets):
            window = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_shape))
            slices.append(window)
            cols[:, position] = padded[(slice(None),) + window]

        self.cols = cols.reshape(x.shape[0] * len(offsets), -1)
        self.kernel = kernel
        self.slices = slices
        self.padded_shape = padded.shape
        self.crop = (slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[1:]))
        self.out_shape = out_shape

        out = kernel.reshape(kernel.shape[0], -1) @ self.cols
        out = out.reshape((kernel.shape[0],) + out_shape)
        return out + bias.reshape((-1,) + (1,) * spatial)

    def backward(self, grad):
        c_out = self.kernel.shape[0]
        flat = grad.reshape(c_out, -1)
        grad_kernel = (flat @ self.cols.T).reshape(self.kernel.shape)
        grad_bias = flat.sum(axis=1)

        grad_cols = self.kernel.reshape(c_out, -1).T @ flat
        grad_cols = grad_cols.reshape((self.kernel.shape[1], len(self.slices)) + self.out_shape)
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for position, window in enumerate(self.slices):
            grad_padded[(slice(None),) + window] += grad_cols[:, position]
        return grad_padded[self.crop], grad_kernel, grad_bias


class UpsampleNearest(Function):
    def forward(self, x, factor):
        self.factor = factor
        self.shape = x.shape
        out = x
        for axis in range(1, x.ndim):
            out = np.repeat(out, factor, axis=axis)
        return out

    def backward(self, grad):
        if self.factor == 1:
            return (grad,)
        blocked = [self.shape[0]]
        for extent in self.shape[1:]:
            blocked.extend([extent, self.factor])
        summed = grad.reshape(blocked).sum(axis=tuple(range(2, 2 * len(self.shape), 2)))
        return (summed,)


class ConcatChannels(Function):
    def forward(self, a, b):
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"Cannot concatenate channels of grids {a.shape[1:]} and {b.shape[1:]}.")
        self.split = a.shape[0]
        return np.concatenate([a, b], axis=0)

    def backward(self, grad):
        return grad[:self.split], grad[self.split:]


class BoxSum(Function):
    """Sum over a centred odd window along every axis, zero outside the array."""

    def forward(self, x, window):
        self.window = window
        return _box_sum(x, window)

    def backward(self, grad):
        return (_box_sum(grad, self.window),)


def _box_sum(array: np.ndarray, window: Tuple[int, ...]) -> np.ndarray:
    total = ndimage.uniform_filter(array, size=window, mode='constant', cval=0.0)
    return total * float(np.prod(window))


def conv(x, kernel, bias=None, stride: int = 1, padding: str = 'same') -> Tensor:
    """
    Convolve a channel-first input with a kernel and add a per-channel bias.

    Args:
        x (Tensor): Input of shape `(C_in, *S)`.
        kernel (Tensor): Weights of shape `(C_out, C_in, *K)`.
        bias (Tensor | None): Bias of shape `(C_out,)`; zeros when omitted.
        stride (int): Positive stride applied along every spatial axis.
        padding (str): 'same' (output extent ceil(n / stride)) or 'valid'.

    Returns:
        Tensor: Output of shape `(C_out, *S_out)`.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}.")
    kernel = as_tensor(kernel)
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[0], dtype=kernel.dtype))
    return Conv.apply(x, kernel, bias, stride=int(stride), padding=padding)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"Leaky ReLU slope must lie in (0, 1), got {slope}.")
    return LeakyReLU.apply(x, slope=slope)


def clamp_min(x, floor: float) -> Tensor:
    return ClampMin.apply(x, floor=float(floor))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    if factor < 1:
        raise ValueError(f"Upsampling factor must be at least 1, got {factor}.")
    return UpsampleNearest.apply(x, factor=int(factor))


def concat_channels(a, b) -> Tensor:
    return ConcatChannels.apply(a, b)


def box_sum(x, window: Iterable[int]) -> Tensor:
    """
    Windowed sum with zero padding. `window` gives one odd extent per axis of `x`.
    """
    window = tuple(int(w) for w in window)
    x = as_tensor(x)
    if len(window) != x.ndim:
        raise ShapeError(f"Window {window} does not match a {x.ndim}-D array.")
    return BoxSum.apply(x, window=window)
