"""Dense tensors with a small reverse-mode autodiff tape.

Values are numpy arrays. Every op works on the last two axes (rows, cols);
any leading axes are treated as a batch and broadcast like ``np.matmul``.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 op: str = "leaf", backward: Callable | None = None):
        arr = np.asarray(value)
        if arr.dtype != _DTYPE and op == "leaf":
            arr = arr.astype(_DTYPE)
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _node(value, parents, op, backward_fn) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(value, True, parents, op, backward_fn)
    return Tensor(value, False, (), op, None)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not match") from None


def _check_elementwise(a: Tensor, b: Tensor, opname: str):
    # equal shapes, or b is a row vector / scalar-like broadcast over a
    out = _check_broadcast(a, b, opname)
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not match")
    return out


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: a.cols={a.shape[-1]} != b.rows={b.shape[-2]}")
    av, bv = a.value, b.value
    if av.ndim > 2 and bv.ndim == 2:
        return _matmul_shared(a, b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _node(np.matmul(av, bv), (a, b), "matmul", bw)


def _matmul_shared(a: Tensor, b: Tensor) -> Tensor:
    # batched input times one shared weight: fold the batch into the rows
    av, bv = a.value, b.value
    flat = av.reshape(-1, av.shape[-1])
    out = (flat @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bv.T).reshape(av.shape) if a.requires_grad else None
        gb = flat.T @ g2 if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    return _node(np.swapaxes(a.value, -1, -2), (a,), "transpose",
                 lambda g: (np.swapaxes(g, -1, -2),))


def take(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice ``a[lo:hi]`` along the leading axis."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[lo:hi] = g
        return (full,)

    return _node(a.value[lo:hi], (a,), "take", bw)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.value.dtype.type(factor)
    return _node(a.value * f, (a,), "scale", lambda g: (g * f,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(a.value * mask, (a,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.value
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(0.044715) * (x * x * x))
    th = np.tanh(inner)
    out = dt(0.5) * x * (dt(1) + th)

    def bw(g):
        dinner = dt(_GELU_C) * (dt(1) + dt(3 * 0.044715) * x * x)
        return (g * (dt(0.5) * (dt(1) + th) + dt(0.5) * x * (dt(1) - th * th) * dinner),)

    return _node(out, (a,), "gelu", bw)


def elementwise(a: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, gelu, relu."""
    if kind in ("add", "sub", "mul"):
        return {"add": add, "sub": sub, "mul": mul}[kind](a, _lift(other))
    if kind == "scale":
        return scale(a, other)
    if kind == "gelu":
        return gelu(a)
    if kind == "relu":
        return relu(a)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- row ops

def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be > 0, got {eps}")
    width = a.shape[-1]
    if gain.shape[-1] != width or bias.shape[-1] != width:
        raise ShapeError(f"layer_norm: gain/bias width must be {width}")
    x = a.value
    dt = x.dtype.type
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = dt(1) / np.sqrt(var + dt(eps))
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value

    def bw(g):
        gx = None
        if a.requires_grad:
            dxhat = g * gv
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, bias.value.shape)

    return _node(out, (a, gain, bias), "layer_norm", bw)


def softmax_rows(a: Tensor) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), "softmax", bw)


def depthwise_conv1d(a: Tensor, kernels: Tensor, kernel_width: int) -> Tensor:
    """Per-column convolution along the time (row) axis, zero padded to keep length.

    ``kernels`` has shape (kernel_width, cols); tap k multiplies row t + k - width//2.
    """
    if kernel_width < 1 or kernel_width % 2 == 0:
        raise ConfigError(f"depthwise_conv1d: kernel_width must be odd, got {kernel_width}")
    if kernels.shape != (kernel_width, a.shape[-1]):
        raise ShapeError(f"depthwise_conv1d: kernels must be {(kernel_width, a.shape[-1])}, "
                         f"got {kernels.shape}")
    x, w = a.value, kernels.value
    half = kernel_width // 2
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for k in range(kernel_width):
        out += xp[..., k:k + T, :] * w[k]

    def bw(g):
        gx = gw = None
        if a.requires_grad:
            gp = np.zeros_like(xp)
            for k in range(kernel_width):
                gp[..., k:k + T, :] += g * w[k]
            gx = gp[..., half:half + T, :]
        if kernels.requires_grad:
            gw = np.stack([(g * xp[..., k:k + T, :]).reshape(-1, x.shape[-1]).sum(axis=0)
                           for k in range(kernel_width)])
        return gx, gw

    return _node(out, (a, kernels), "dwconv", bw)


# ---------------------------------------------------------------- reductions / losses

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    dt = a.value.dtype
    total = np.asarray(a.value.sum(dtype=np.float64), dtype=dt)
    return _node(total, (a,), "sum", lambda g: (np.broadcast_to(g, shape).astype(dt),))


def l1_loss(a: Tensor, target) -> Tensor:
    """Mean absolute difference. ``target`` may be a Tensor (gradients flow into it too)."""
    t = _lift(target)
    if a.shape != t.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} and {t.shape} do not match")
    diff = a.value - t.value
    n = diff.size
    dt = a.value.dtype
    loss = np.asarray(np.abs(diff).sum(dtype=np.float64) / n, dtype=dt)

    def bw(g):
        s = np.sign(diff) * (g / dt.type(n))
        return s, -s

    return _node(loss, (a, t), "l1", bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; ``labels`` are integer class ids."""
    x = logits.value
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ShapeError(f"cross_entropy: logits {x.shape} vs {len(labels)} labels")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(x.shape[0])
    n = x.shape[0]
    loss = np.asarray(-logp[rows, labels].sum(dtype=np.float64) / n, dtype=x.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / x.dtype.type(n)),)

    return _node(loss, (logits,), "xent", bw)


# ---------------------------------------------------------------- backward pass

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adj = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            adj[k] = pg if k not in adj else adj[k] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
