"""Minimal reverse-mode automatic differentiation over numpy arrays.

Forward values live in the tensor's own dtype (float32 by default).
Intermediate gradients follow the forward dtype; every leaf gradient is
accumulated into a float64 buffer.  Each differentiable op appends a
:class:`TapeNode` to its output, and :func:`backward` walks those nodes in
reverse topological order.

A node may carry an ``override`` record.  When present, the op's backward
asks the record for its coefficient instead of reusing the forward one;
this is how ShakeDrop gets a backward pass that differs from its forward.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GRAD_DTYPE = np.float64

_local = threading.local()
_param_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape, e.g. backward with nothing recorded."""


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = get_default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class TapeNode:
    __slots__ = ("kind", "inputs", "backward_fn", "override")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], backward_fn: Callable, override: Any = None):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.override = override

    def __repr__(self) -> str:
        return f"TapeNode({self.kind!r}, n_inputs={len(self.inputs)})"


class Tensor:
    """Dense n-d array plus the bookkeeping needed for reverse mode."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"all dimension sizes must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.grad: np.ndarray | None = None

    @classmethod
    def _result(cls, data: np.ndarray, kind: str, inputs, backward_fn, override=None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node = None
        out.requires_grad = False
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = TapeNode(kind, inputs, backward_fn, override)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor with a float64 gradient accumulator."""

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.uid = next(_param_counter)
        self.name = name if name is not None else f"param{self.uid}"
        self.grad = np.zeros(self.data.shape, dtype=GRAD_DTYPE)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, "add", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._result(ad * bd, "mul", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    s = float(s)
    return Tensor._result(a.data * a.data.dtype.type(s), "scale", (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), "relu", (a,),
                          lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def scaled_join(residual: Tensor, block: Tensor, coefficient, override=None) -> Tensor:
    """``residual + coefficient * block`` with an optional backward override.

    ``coefficient`` is a scalar or an array broadcastable to ``block``.  If
    ``override`` is given, its ``backward_coefficient()`` supplies the factor
    applied to the block-branch gradient; the residual gradient always
    passes through unchanged.
    """
    if residual.shape != block.shape:
        raise ShapeError(f"scaled_join: residual {residual.shape} != block {block.shape}")
    coef = np.asarray(coefficient, dtype=block.dtype)
    out = residual.data + coef * block.data

    def backward(g):
        bc = coef if override is None else np.asarray(override.backward_coefficient(), dtype=g.dtype)
        return g, g * bc

    return Tensor._result(out, "scaled_join", (residual, block), backward, override)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), "sum", (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)

    return Tensor._result(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping average pooling with kernel == stride == k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial size {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return Tensor._result(out, "avg_pool2d", (x,), backward)


def pad_channels(x: Tensor, extra: int) -> Tensor:
    """Append ``extra`` zero channels along axis 1."""
    if extra == 0:
        return x
    c = x.shape[1]
    pad = [(0, 0)] * x.ndim
    pad[1] = (0, extra)
    return Tensor._result(np.pad(x.data, pad), "pad_channels", (x,), lambda g: (g[:, :c],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out_features, in_features).

    A 1-d ``x`` is treated as a single row and a 1-d result is returned.
    """
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2 or weight.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    wd = weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g[None, :] if squeeze else g
        gx = g2 @ wd
        grads = [gx[0] if squeeze else gx, g2.T @ xd]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, "dense", inputs, backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation.  x: (N, C, H, W), weight: (O, C, kh, kw)."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")

    xd = x.data
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride]
        ho, wo = xs.shape[2], xs.shape[3]
        cols = xs.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gf.T @ cols).reshape(weight.shape)
        gcols = gf @ wmat
        if kh == 1 and kw == 1 and padding == 0:
            gx = np.zeros((n, c, h, w), dtype=gcols.dtype)
            gx[:, :, ::stride, ::stride] = gcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            gcols = np.ascontiguousarray(gcols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return Tensor._result(np.ascontiguousarray(out), "conv2d", inputs, backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place (unbiased variance).  In eval mode
    the running buffers are used and nothing is mutated.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    c = x.shape[1]
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)

    if not training:
        inv = 1.0 / np.sqrt(running_var.astype(xd.dtype) + xd.dtype.type(eps))
        xhat = (xd - running_mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv.reshape(1, c, 1, 1)
        out = (gd * xhat + bd).astype(xd.dtype, copy=False)

        def backward_eval(g):
            return (g * (gd * inv.reshape(1, c, 1, 1)), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return Tensor._result(out, "batchnorm2d", (x, gamma, beta), backward_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = np.einsum("nchw->c", xd) / m
    xc = xd - mu.reshape(1, c, 1, 1)
    var = np.einsum("nchw,nchw->c", xc, xc) / m
    inv = (1.0 / np.sqrt(var + xd.dtype.type(eps))).reshape(1, c, 1, 1)
    xhat = xc * inv
    out = (gd * xhat + bd).astype(xd.dtype, copy=False)

    unbiased = var * (m / max(m - 1, 1))
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * unbiased

    def backward(g):
        g_sum = np.einsum("nchw->c", g)
        g_dot = np.einsum("nchw,nchw->c", g, xhat)
        # d/dx of gamma * xhat + beta, with batch statistics
        gx = (inv * gd) * (g - (g_sum / m).reshape(1, c, 1, 1) - xhat * (g_dot / m).reshape(1, c, 1, 1))
        return gx, g_dot, g_sum

    return Tensor._result(out, "batchnorm2d", (x, gamma, beta), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, "log_softmax", (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, "softmax", (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | float | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.node is None:
        raise TapeError("backward: nothing recorded on the tape for this tensor")
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = 1.0
    # intermediate gradients follow the forward dtype; leaf accumulators are float64
    grads: dict[int, np.ndarray] = {id(loss): np.broadcast_to(np.asarray(grad, dtype=loss.dtype), loss.shape)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.zeros(t.shape, dtype=GRAD_DTYPE)
            t.grad += g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise TapeError(f"{t.node.kind}: gradient shape {ig.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros(p.shape, dtype=GRAD_DTYPE)
        else:
            p.grad[...] = 0.0


def forward_op(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch an op by name; the named functions can also be called directly."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


_OPS: dict[str, Callable[..., Tensor]] = {
    "dense": dense,
    "conv2d": conv2d,
    "batchnorm2d": batchnorm2d,
    "relu": relu,
    "global_avg_pool": global_avg_pool,
    "add": add,
    "scale": scale,
    "mul": mul,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "avg_pool2d": avg_pool2d,
    "pad_channels": pad_channels,
    "scaled_join": scaled_join,
}
