"""Minimal tensor library with reverse-mode differentiation.

Every trainable module (CAE, temporal transformer) is built from the
primitives registered here. Each primitive is a ``Function`` subclass with a
``forward`` on raw NumPy arrays and a ``backward`` that maps the output
gradient to one gradient per input. Training runs in float32; gradient
checking runs in float64.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional array node in a differentiable computation graph.

    Attributes:
        data: Row-major NumPy array holding the values (float32 by default)
        requires_grad: Whether gradients flow back into this tensor
        grad: Accumulated gradient for leaf tensors after ``backward``
    """

    # ndarray <op> Tensor dispatches to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose(*reversed(range(self.ndim)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from this scalar tensor into every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operations
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return PowScalar.apply(self, exponent=0.5)

    def tanh(self):
        return Tanh.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return Relu.apply(self)

    def gelu(self):
        return Gelu.apply(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; recursion would overflow on deep ResNet graphs.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(*arrays, **kwargs)`` and
    ``backward(grad) -> tuple`` with one entry per positional input.
    """

    def __init__(self):
        self.parents: tuple[Tensor, ...] = ()

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        ctx = cls()
        like = next((a for a in args if isinstance(a, Tensor)), None)
        dtype = like.dtype if like is not None else DEFAULT_DTYPE
        parents = tuple(a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=dtype))
                        for a in args)
        out = np.asarray(ctx.forward(*[p.data for p in parents], **kwargs))
        if any(p.requires_grad for p in parents):
            ctx.parents = parents
            return Tensor(out, requires_grad=True, _ctx=ctx)
        return Tensor(out)

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --- Elementwise ---

class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (_unbroadcast(grad * self.y, self.x.shape),
                _unbroadcast(grad * self.x, self.y.shape))


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return (_unbroadcast(grad / self.y, self.x.shape),
                _unbroadcast(-grad * self.x / (self.y * self.y), self.y.shape))


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class PowScalar(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Tanh(Function):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1 - self.y * self.y),)


class Sigmoid(Function):
    def forward(self, x):
        # tanh form avoids overflow in exp for large |x|
        self.y = 0.5 * (1 + np.tanh(0.5 * x))
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1 - self.y),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """GELU, tanh approximation."""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1 + t) + 0.5 * x * dt),)


class Clip(Function):
    def forward(self, x, lo: float, hi: float):
        self.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.mask,)


# --- Reductions and shape ---

class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axis = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return x.sum(axis=self.axis, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axis = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axis]))
        return x.mean(axis=self.axis, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    """Basic and fancy indexing; repeated indices accumulate in backward."""

    def forward(self, x, idx):
        self.shape, self.idx = x.shape, idx
        return x[idx]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.idx, grad)
        return (full,)


class Concat(Function):
    def forward(self, *xs, axis: int = 0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Softmax(Function):
    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


# --- Spatial (NCHW) ---

def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """2-D cross-correlation over NCHW input with OIHW weights."""

    def forward(self, x, w, stride: int = 1, padding: int = 0):
        n, c, h, wd = x.shape
        o, c_w, kh, kw = w.shape
        if c != c_w:
            raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {c_w}")
        self.stride, self.padding, self.x_shape = stride, padding, x.shape
        self.w = w
        self.xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(self.xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.ho, self.wo = windows.shape[2], windows.shape[3]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, o)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        s, p = self.stride, self.padding
        o, c, kh, kw = self.w.shape
        windows = sliding_window_view(self.xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        gw = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))  # (o, c, kh, kw)
        gxp = np.zeros_like(self.xp)
        h_span, w_span = s * (self.ho - 1) + 1, s * (self.wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.w[:, :, i, j], axes=([1], [0]))  # (n, ho, wo, c)
                gxp[:, :, i:i + h_span:s, j:j + w_span:s] += contrib.transpose(0, 3, 1, 2)
        h, wd = self.x_shape[2], self.x_shape[3]
        return gxp[:, :, p:p + h, p:p + wd], gw.astype(self.w.dtype, copy=False)


class MaxPool2d(Function):
    def forward(self, x, kernel: int = 3, stride: int = 2, padding: int = 1):
        self.kernel, self.stride, self.padding, self.x_shape = kernel, stride, padding, x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
        self.xp_shape = xp.shape
        windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = windows.reshape(windows.shape[:4] + (kernel * kernel,))
        self.argmax = flat.argmax(axis=-1)
        self.ho, self.wo = flat.shape[2], flat.shape[3]
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s, p = self.kernel, self.stride, self.padding
        gxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        h_span, w_span = s * (self.ho - 1) + 1, s * (self.wo - 1) + 1
        for pos in range(k * k):
            i, j = divmod(pos, k)
            gxp[:, :, i:i + h_span:s, j:j + w_span:s] += grad * (self.argmax == pos)
        h, wd = self.x_shape[2], self.x_shape[3]
        return (gxp[:, :, p:p + h, p:p + wd],)


class UpsampleNearest2d(Function):
    def forward(self, x, scale: int = 2):
        self.scale = scale
        return x.repeat(scale, axis=2).repeat(scale, axis=3)

    def backward(self, grad):
        n, c, h, w = grad.shape
        s = self.scale
        return (grad.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5)),)


# --- Functional API ---

def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def softmax(x, axis: int = -1) -> Tensor:
    """Exponential normalization along ``axis`` with max-subtraction for stability."""
    return Softmax.apply(as_tensor(x), axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    return MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)


def upsample_nearest2d(x: Tensor, scale: int = 2) -> Tensor:
    return UpsampleNearest2d.apply(x, scale=scale)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = x @ w
    return out + b if b is not None else out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


@dataclass
class BatchNormStats:
    """Running statistics of one batch-normalization layer (frozen at inference)."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               train: bool, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N, H, W) for NCHW input.

    In training mode batch statistics are used and the running statistics are
    updated in place; in inference mode the running statistics are constants.
    """
    shape = (1, -1, 1, 1)
    if train:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        m = stats.momentum
        stats.mean = ((1 - m) * stats.mean + m * mu.data.reshape(-1)).astype(stats.mean.dtype)
        stats.var = ((1 - m) * stats.var + m * var.data.reshape(-1)).astype(stats.var.dtype)
        normed = centered / (var + eps).sqrt()
    else:
        mean = stats.mean.reshape(shape).astype(x.dtype)
        inv = (1.0 / np.sqrt(stats.var + eps)).reshape(shape).astype(x.dtype)
        normed = (x - mean) * inv
    return normed * gamma.reshape(shape) + beta.reshape(shape)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; the identity outside training or when ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    diff = pred - as_tensor(target, dtype=pred.dtype)
    return (diff * diff).mean()


# --- Differentiation entry points ---

def value_and_grad(loss_fn: Callable[[dict], Tensor],
                   params: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(params)`` and its gradient with respect to every parameter.

    Args:
        loss_fn: Callable building a scalar loss from the parameter dict
        params: Named leaf tensors

    Returns:
        (loss value, gradients keyed like ``params`` with matching shapes)

    Raises:
        ValueError: If the loss is not a scalar
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = loss_fn(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ValueError(f"loss must be a scalar tensor, got {shape}")
    loss.backward()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    for p in params.values():
        p.grad = None
    return float(loss.item()), grads


def grad(loss_fn: Callable[[dict], Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every named parameter."""
    return value_and_grad(loss_fn, params)[1]


def gradcheck(loss_fn: Callable[[dict], Tensor], params: dict[str, Tensor], h: float = 1e-5,
              max_entries: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> dict[str, float]:
    """Compare reverse-mode gradients with central finite differences.

    Relative error per parameter is ``||a - n|| / max(||a|| + ||n||, 1e-12)`` over
    the checked coordinates. Run with float64 parameters.

    Args:
        loss_fn: Deterministic scalar loss of the parameter dict
        params: Named float64 leaf tensors
        h: Finite-difference step
        max_entries: Check at most this many random coordinates per parameter
        rng: Generator for coordinate sampling (defaults to seed 0)

    Returns:
        Relative error per parameter name
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = grad(loss_fn, params)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(coords), dtype=np.float64)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params).item())
            flat[i] = orig - h
            down = float(loss_fn(params).item())
            flat[i] = orig
            numeric[n] = (up - down) / (2 * h)
        a = analytic[name].reshape(-1)[coords].astype(np.float64)
        denom = max(np.linalg.norm(a) + np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(a - numeric) / denom)
    return errors


# --- Adam ---

@dataclass
class AdamState:
    """Adam optimizer state.

    Attributes:
        step: Number of updates applied so far
        m: First-moment accumulators keyed by parameter name
        v: Second-moment accumulators keyed by parameter name
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator stabilizer
    """
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(step=0,
                   m={k: np.zeros_like(np.asarray(v)) for k, v in params.items()},
                   v={k: np.zeros_like(np.asarray(v)) for k, v in params.items()},
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """Apply one bias-corrected Adam update and return new params and state.

    Coordinates whose gradient is exactly zero keep their value and moments,
    so frozen or unused parameters are never moved by stale momentum.

    Args:
        params: Parameter arrays keyed by name
        grads: Gradients with the same keys and shapes
        state: Current optimizer state (not modified)

    Returns:
        (updated parameter copies, new AdamState with step incremented by 1)

    Raises:
        ValueError: If keys or shapes of params and grads differ
    """
    if set(params) != set(grads):
        raise ValueError(f"params and grads differ in keys: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        p = np.asarray(p)
        g = np.asarray(grads[k])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{k}' {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        active = g != 0
        m_next = np.where(active, state.beta1 * m + (1.0 - state.beta1) * g, m)
        v_next = np.where(active, state.beta2 * v + (1.0 - state.beta2) * (g * g), v)
        update = state.lr * (m_next / bc1) / (np.sqrt(v_next / bc2) + state.eps)
        new_params[k] = np.where(active, p - update, p).astype(p.dtype, copy=False)
        new_m[k] = m_next.astype(p.dtype, copy=False)
        new_v[k] = v_next.astype(p.dtype, copy=False)
    return new_params, AdamState(step=t, m=new_m, v=new_v, lr=state.lr, beta1=state.beta1,
                                 beta2=state.beta2, eps=state.eps)


def apply_adam(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
               frozen: Sequence[str] = ()) -> AdamState:
    """Run ``adam_step`` on tensor parameters in place, skipping frozen names."""
    trainable = {k: p.data for k, p in params.items() if k not in frozen}
    updated, state = adam_step(trainable, {k: grads[k] for k in trainable}, state)
    for k, arr in updated.items():
        params[k].data = arr
    return state


# --- Initialization ---

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fan-in-scaled normal init, std = sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def embedding_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02,
                     dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    """Copy a parameter dict into a new dtype (float64 for gradient checks)."""
    return {k: Tensor(p.data.astype(dtype), dtype=dtype) for k, p in params.items()}
