"""Dense tensors with reverse-mode autodiff, backed by numpy.

Every op returns a new Tensor that remembers its parents and a closure
mapping the output gradient to one gradient per parent. Graphs are only
recorded when some input requires a gradient and grad mode is on for the
calling thread.
"""

import logging
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ansguard.errors import (
    ConfigError,
    NonFiniteError,
    ShapeError,
    TapeError,
    TargetError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_state = threading.local()

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
    ) -> None:
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def flatten(self) -> "Tensor":
        return flatten(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and shape ops


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), fn)


def square(a: Tensor) -> Tensor:
    def fn(g):
        return (2.0 * a.data * g,)

    return _result(a.data * a.data, (a,), fn)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def fn(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,), fn)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def fn(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), fn)


# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input {x.shape} does not match weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} for weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def fn(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn)


def conv_output_extent(size: int, k: int, stride: int, padding: int, floor: bool = False) -> int:
    """Spatial extent of a conv/pool output; non-integer extents are rejected
    unless ``floor`` asks for framework-style truncation."""
    span = size + 2 * padding - k
    if span < 0:
        raise ConfigError(f"window {k} larger than padded input {size + 2 * padding}")
    if span % stride and not floor:
        raise ConfigError(
            f"output extent ({size}+2*{padding}-{k})/{stride}+1 is not an integer"
        )
    return span // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    floor: bool = False,
) -> Tensor:
    """Cross-correlation over NCHW input via an explicit patch matrix."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {w_in}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {c_out} output channels")
    k = kh
    h_out = conv_output_extent(h, k, stride, padding, floor)
    w_out = conv_output_extent(w, k, stride, padding, floor)

    windows = _windows(x.data, k, stride, padding)[:, :, :h_out, :w_out]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * k * k)
    kernel = weight.data.reshape(c_out, -1)
    out = (cols @ kernel.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        g_weight = (g2.T @ cols).reshape(weight.shape)
        g_cols = (g2 @ kernel).reshape(n, h_out, w_out, c_in, k, k)
        padded = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                padded[
                    :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
                ] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_x = padded[:, :, padding : padding + h, padding : padding + w]
        grads = (g_x, g_weight)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn)


def maxpool2d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    stride = stride or size
    if size < 1 or x.ndim != 4 or size > min(x.shape[2:]):
        raise ConfigError(f"maxpool2d: empty window {size} on input {x.shape}")
    n, c, h, w = x.shape
    h_out = conv_output_extent(h, size, stride, 0, floor=True)
    w_out = conv_output_extent(w, size, stride, 0, floor=True)
    flat = _windows(x.data, size, stride, 0)[:, :, :h_out, :w_out].reshape(
        n, c, h_out, w_out, size * size
    )
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        g_x = np.zeros_like(x.data)
        for q in range(size * size):
            i, j = divmod(q, size)
            g_x[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += g * (
                arg == q
            )
        return (g_x,)

    return _result(np.ascontiguousarray(out), (x,), fn)


def avgpool2d(x: Tensor, size: int) -> Tensor:
    if size < 1 or x.ndim != 4 or size > min(x.shape[2:]):
        raise ConfigError(f"avgpool2d: empty window {size} on input {x.shape}")
    h_out = conv_output_extent(x.shape[2], size, size, 0, floor=True)
    w_out = conv_output_extent(x.shape[3], size, size, 0, floor=True)
    windows = _windows(x.data, size, size, 0)[:, :, :h_out, :w_out]
    out = windows.mean(axis=(-2, -1)).astype(x.dtype)

    def fn(g):
        g_x = np.zeros_like(x.data)
        share = g / (size * size)
        for i in range(size):
            for j in range(size):
                g_x[:, :, i : i + size * h_out : size, j : j + size * w_out : size] += share
        return (g_x,)

    return _result(out, (x,), fn)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = False,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the stored statistics are applied.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape}, gamma {gamma.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def fn(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_hat = g * gamma.data.reshape(shape)
        if training:
            m = x.data.size // x.shape[1]
            g_x = (inv.reshape(shape) / m) * (
                m * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            g_x = g_hat * inv.reshape(shape)
        return g_x, g_gamma, g_beta

    return _result(out.astype(x.dtype), (x, gamma, beta), fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer class targets."""
    if logits.ndim != 2:
        raise ShapeError(f"cross-entropy expects (N, classes) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, classes = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= classes):
        raise TargetError(f"targets must lie in [0, {classes})")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    log_probs = log_softmax(logits.data)
    rows = np.arange(n)
    losses = -log_probs[rows, targets]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = np.asarray(losses.sum() * scale, dtype=logits.dtype)

    def fn(g):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1
        return (probs * (g * scale),)

    return _result(value, (logits,), fn)


# tape


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _propagate(loss: Tensor, capture: Callable[[Tensor, np.ndarray], None]) -> None:
    if not loss.requires_grad:
        raise TapeError("loss is not on an active tape (nothing requires grad)")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        capture(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss._spent:
        raise TapeError("backward called twice on the same graph; run forward again")

    def accumulate(node: Tensor, g: np.ndarray) -> None:
        if node._parents:
            return
        g = g.astype(node.dtype, copy=False)
        node.grad = g.copy() if node.grad is None else node.grad + g

    _propagate(loss, accumulate)
    loss._spent = True


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``.grad``."""
    wanted = {id(t): i for i, t in enumerate(inputs)}
    found: list[np.ndarray | None] = [None] * len(inputs)

    def collect(node: Tensor, g: np.ndarray) -> None:
        index = wanted.get(id(node))
        if index is not None:
            found[index] = g.astype(node.dtype, copy=False)

    _propagate(loss, collect)
    return [
        np.zeros_like(t.data) if g is None else g for t, g in zip(inputs, found)
    ]


# optimization


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: list[np.ndarray] | None = None,
) -> None:
    """In-place SGD update with classical momentum: v = mu*v + g; p -= lr*v."""
    if lr < 0 or momentum < 0 or weight_decay < 0:
        raise ConfigError(f"sgd: lr={lr}, momentum={momentum}, weight_decay={weight_decay}")
    if momentum and velocity is None:
        raise ConfigError("momentum needs a velocity buffer per parameter")
    for index, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(
                f"parameter {index} {params[index].shape}: {bad} non-finite gradient entries"
            )
    for index, (p, g) in enumerate(zip(params, grads)):
        step = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
        if weight_decay:
            step = step + weight_decay * p.data
        if momentum:
            v = velocity[index]
            v *= momentum
            v += step
            step = v
        p.data -= lr * step


class SGD:
    """Holds momentum buffers for a fixed parameter list."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ) -> None:
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        sgd_step(
            self.params,
            [p.grad for p in self.params],
            self.lr,
            self.momentum,
            self.weight_decay,
            self.velocity,
        )
