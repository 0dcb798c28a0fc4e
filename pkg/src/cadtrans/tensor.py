"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every primitive below records one node on the tape: its parent tensors and a
closure mapping the output adjoint to the parents' adjoints. ``backward``
replays those closures in reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes or axes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("seq", "parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.seq = next(_SEQ)
        self.parents = parents
        self.backward = backward
        self.name = name


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    Args:
        data: Anything ``np.asarray`` accepts. Floating data keeps its dtype
            (float32 or float64); python scalars/ints become ``DEFAULT_DTYPE``
            unless ``dtype`` is given.
        requires_grad: Whether ``backward`` should populate ``grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._node: Optional[_Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _promote(a, b):
    """Coerce operands to tensors sharing the dtype of whichever is a Tensor."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# -- backward driver -----------------------------------------------------------
def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every reachable tensor with ``requires_grad``.

    Nodes are replayed in reverse creation order, which is a valid reverse
    topological order because a node can only consume earlier outputs.
    """
    if grad is None:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    tensors = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in tensors:
            continue
        tensors[id(t)] = t
        if t._node is not None:
            stack.extend(p for p in t._node.parents if p.requires_grad)
    order = sorted((t for t in tensors.values() if t._node is not None), key=lambda t: t._node.seq, reverse=True)
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = Tensor(np.asarray(g, dtype=t.dtype))
        node = t._node
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    # leaves (parameters and inputs) keep their gradients
    for tid, g in grads.items():
        t = tensors[tid]
        if t._node is None and t.requires_grad:
            g = np.asarray(g, dtype=t.dtype)
            if t.grad is None:
                t.grad = Tensor(g)
            else:
                t.grad = Tensor(t.grad.data + g)


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _promote(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _promote(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _promote(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _promote(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# -- reductions ----------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), bw, "mean")


def max_detached(x: Tensor, axis=-1, keepdims=True) -> np.ndarray:
    return np.max(x.data, axis=axis, keepdims=keepdims)


# -- shape ---------------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = _norm_axis(axis, ref.ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concatenate: shapes {ref.shape} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concatenate")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    dtype = x.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), bw, "getitem")


def take_rows(x: Tensor, idx) -> Tensor:
    """Row gather ``x[idx]`` along axis 0 (duplicates accumulate in backward)."""
    idx = np.asarray(idx, dtype=np.int64)
    return getitem(x, idx)


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- softmax family --------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


# -- norms -----------------------------------------------------------------------
def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis``; the adjoint at a zero vector is zero."""
    _norm_axis(axis, x.ndim)
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xd / np.maximum(n, eps),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _record(out, (x,), bw, "l2_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return div(x, add(l2_norm(x, axis=axis, keepdims=True), eps))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match last axis {d}")
    return _record(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except 1 (channels).

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as is conventional).
    In eval mode the running buffers normalize and are left untouched.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} does not match {gamma.shape[0]} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    xd = x.data
    count = xd.size // x.shape[1]
    if training:
        if count < 2:
            raise DimensionError("batch_norm in training mode needs more than one value per channel")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * count / (count - 1)
    else:
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        var = running_var.reshape(bshape).astype(xd.dtype)
        xc = xd - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)

    def bw(g):
        gx_hat = g * gd
        if training:
            gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gx_hat * inv
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return _record(xhat * gd + beta.data.reshape(bshape), (x, gamma, beta), bw, "batch_norm")


# -- convolution and pooling ---------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, Cin, Ho, Wo, k, k)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation; x is (B, Cin, H, W), weight is (Cout, Cin, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    B, cin, H, W = x.shape
    cout, _, k, _ = weight.shape
    ho, wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} stride {stride} padding {padding} too large for {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride)[:, :, :ho, :wo]
    wd = weight.data
    out = np.einsum("bchwij,ocij->bohw", cols, wd, optimize=True)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def bw(g):
        gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        gcols = np.einsum("bohw,ocij->bchwij", g, wd, optimize=True)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record(out.astype(x.dtype, copy=False), parents, bw, "conv2d")


def avg_pool2d(x: Tensor, kernel: Optional[int] = None, stride: Optional[int] = None) -> Tensor:
    """Average pooling on (B, C, H, W); ``kernel=None`` pools globally."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects rank 4, got {x.shape}")
    B, C, H, W = x.shape
    if kernel is None:
        if H != W:
            raise DimensionError(f"global avg_pool2d expects a square map, got {H}x{W}")
        kernel = H
    stride = stride or kernel
    ho, wo = conv_output_size(H, kernel, stride, 0), conv_output_size(W, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise DimensionError(f"avg_pool2d: kernel {kernel} too large for {H}x{W}")
    cols = _im2col(x.data, kernel, stride)[:, :, :ho, :wo]
    out = cols.mean(axis=(-1, -2))
    area = kernel * kernel

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g / area
        return (gx,)

    return _record(out, (x,), bw, "avg_pool2d")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.data.astype(np.float64) ** 2))
    return float(np.sqrt(total))
