"""Define-by-run tensors with reverse-mode automatic differentiation.

Every operation in this module returns a new :class:`Tensor` that remembers
its inputs and a closure computing the input gradients. Calling
:meth:`Tensor.backward` on a scalar walks that record in reverse
topological order.

Arrays default to float32. Passing ``dtype=np.float64`` at construction
propagates through every op, which is how the finite-difference checks run.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def record_branches():
    """Collect the branch masks taken by relu, abs and clamp_min on this thread.

    Yields a list that fills with one boolean array per piecewise op, in call
    order. Finite-difference checks compare these patterns to detect a step
    that straddles a kink.
    """
    prev = getattr(_state, "branches", None)
    log: list[np.ndarray] = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def _note_branch(mask: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(mask.copy())


class Tensor:
    """An n-dimensional array with an optional gradient.

    Args:
        data: array-like contents.
        requires_grad: whether gradients should be accumulated into ``grad``.
        dtype: storage dtype; float32 unless given.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or np.float32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_param = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._retain = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.is_param = False
        out._retain = False
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(data, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    t = Tensor(data, requires_grad=True, dtype=dtype)
    t.is_param = True
    return t


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# compute graph and backward
# ---------------------------------------------------------------------------


@dataclass
class GraphNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    tensor: Tensor = field(repr=False)


@dataclass
class ComputeGraph:
    """Operation records reachable from one output, in topological order."""

    nodes: list[GraphNode]

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        nodes = [GraphNode(t._op, tuple(id(p) for p in t._parents), id(t), t) for t in order]
        return cls(nodes)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires grad.

    Raises:
        ContractError: if ``loss`` is not a single-element tensor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or ComputeGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None or t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(a.data / b.data, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def absolute(a: Tensor) -> Tensor:
    _note_branch(a.data >= 0)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; gradient flows only where ``a > floor``."""
    mask = a.data > floor
    _note_branch(mask)
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return Tensor._result(out, (a,), lambda g: (g * mask,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_branch(mask)
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply ``"relu"``, ``"sigmoid"`` or ``"none"`` elementwise."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("none", None):
        return x
    raise ConfigurationError(f"unknown activation {kind!r}; expected 'relu', 'sigmoid' or 'none'")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Raises:
        NumericError: if any logit is infinite or NaN.
    """
    x = logits.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (logits,), bw, "softmax")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._result(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.asarray(out), (a,), bw, "getitem")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules for leading dimensions.

    Raises:
        DimensionError: if the inner dimensions differ.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), bw, "matmul")


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    k_eff = k + (k - 1) * (dilation - 1)
    if k_eff > size + 2 * padding:
        raise DimensionError(
            f"effective kernel extent {k_eff} (k={k}, dilation={dilation}) exceeds padded input {size + 2 * padding}"
        )
    return (size + 2 * padding - k_eff) // stride + 1


def _check_conv_args(k: int, stride: int, dilation: int) -> None:
    if k < 1 or stride < 1 or dilation < 1:
        raise ConfigurationError(f"need k, stride, dilation >= 1; got {k}, {stride}, {dilation}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``C×H×W`` or ``B×C×H×W``; ``weight`` is ``C_out×C_in×k×k``.
    The kernel is not flipped.
    """
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects (B,)C,H,W input and 4-D kernel; got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != C or k != k2:
        raise DimensionError(f"conv2d kernel {weight.shape} incompatible with input {x.shape}")
    _check_conv_args(k, stride, dilation)
    Ho = conv_output_size(H, k, stride, dilation, padding)
    Wo = conv_output_size(W, k, stride, dilation, padding)

    cols = kernels.im2col(x.data, k, stride, dilation, padding, Ho, Wo).reshape(B, C * k * k, Ho * Wo)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols)
    parents = [x, weight]
    if bias is not None:
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(B, c_out, Ho, Wo)

    def bw(g):
        g2 = g.reshape(B, c_out, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(B, C, k, k, Ho, Wo)
            gx = kernels.col2im(gcols, H, W, stride, dilation, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    out = Tensor._result(out, parents, bw, "conv2d")
    return reshape(out, out.shape[1:]) if single else out


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` is ``C×1×k×k``."""
    B, C, H, W = x.shape
    if weight.shape[0] != C or weight.shape[1] != 1:
        raise DimensionError(f"depthwise kernel {weight.shape} incompatible with input {x.shape}")
    k = weight.shape[2]
    _check_conv_args(k, stride, dilation)
    Ho = conv_output_size(H, k, stride, dilation, padding)
    Wo = conv_output_size(W, k, stride, dilation, padding)
    cols = kernels.im2col(x.data, k, stride, dilation, padding, Ho, Wo).reshape(B, C, k * k, Ho * Wo)
    w2 = weight.data.reshape(C, k * k, 1)
    out = np.matmul(w2.transpose(0, 2, 1), cols).reshape(B, C, Ho, Wo)

    def bw(g):
        g2 = g.reshape(B, C, 1, Ho * Wo)
        gw = (cols * g2).sum(axis=(0, 3)).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2 * g2).reshape(B, C, k, k, Ho, Wo)
            gx = kernels.col2im(gcols, H, W, stride, dilation, padding)
        return gx, gw

    return Tensor._result(out, (x, weight), bw, "depthwise_conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2×2 average pooling with stride 2 on ``B×C×H×W`` (even H, W)."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {H}×{W}")
    return mean(reshape(x, (B, C, H // 2, 2, W // 2, 2)), axis=(3, 5))


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Append zero channels to a ``B×C×H×W`` tensor up to ``channels``."""
    extra = channels - x.shape[1]
    if extra < 0:
        raise DimensionError(f"cannot pad {x.shape[1]} channels down to {channels}")
    if extra == 0:
        return x
    zeros = Tensor(np.zeros((x.shape[0], extra) + x.shape[2:], dtype=x.dtype), dtype=x.dtype)
    return concat([x, zeros], axis=1)


def stack_arrays(arrays: Iterable[np.ndarray], dtype=np.float32) -> Tensor:
    return Tensor(np.stack(list(arrays)), dtype=dtype)
