"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps a float array. Operations executed while a `Tape` is
active are recorded and can be replayed backwards once per tape via
`backward(loss, tape)`. With no active tape, every op is a plain numpy
computation (inference path).

Arrays default to float32. Finite-difference verification runs the same
graph in float64 via the `double_precision()` context manager, because
32-bit central differences are too noisy to check gradients against.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError, StateError

# ---------------------------------------------------------------------------
# global switches

_DEFAULT_DTYPE = np.float32

# When True, every op output is checked for NaN/Inf. Costs one scan per op;
# off by default, enabled in tests and by cmd_gradcheck.
DEBUG_CHECKS = False


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def double_precision():
    """Run tensor creation in float64 (verification mode)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    global DEBUG_CHECKS
    prev = DEBUG_CHECKS
    DEBUG_CHECKS = enabled
    try:
        yield
    finally:
        DEBUG_CHECKS = prev


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: "Tensor", inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_TAPE_STACK: list[Optional["Tape"]] = []


class Tape:
    """Ordered record of executed ops; execution order is topological."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, node: _Node):
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)


class no_grad:
    """Suspend recording (teacher forward, inference inside training code)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# tensor

Scalar = Union[int, float]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # shape ops ------------------------------------------------------------
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # scalars follow the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _apply(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite values in op output")
    tape = _current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        tape._record(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _apply(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _apply(out, (a, b), bwd)


def power(x, p: Scalar) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    out = x.data ** p

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return _apply(out, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _apply(out, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _apply(out, (x,), bwd)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _apply(out, (x,), bwd)


def activation(x, kind: str) -> Tensor:
    """Elementwise nonlinearity; relu sends zero gradient at 0, gelu uses the
    tanh approximation."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ShapeError(f"unknown activation kind {kind!r}")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _apply(out, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _apply(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _apply(out, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _apply(out, (x,), bwd)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _apply(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _apply(out, tuple(tensors), bwd)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).astype(x.dtype, copy=True),)

    return _apply(out, (x,), bwd)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    return reduce_sum(x, axis, keepdims) * (1.0 / n)


def _reduce_extreme(x: Tensor, axis, keepdims: bool, mode: str) -> Tensor:
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % x.ndim for ax in axes)
    keep = tuple(ax for ax in range(x.ndim) if ax not in axes)
    perm = keep + axes
    moved = x.data.transpose(perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    if mode == "max":
        idx = flat.argmax(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        idx = flat.argmin(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals
    if keepdims:
        shape = list(x.shape)
        for ax in axes:
            shape[ax] = 1
        out = vals.reshape(shape)

    def bwd(g):
        gv = g.reshape(lead)
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], gv[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        return (gm.transpose(np.argsort(perm)),)

    return _apply(out, (x,), bwd)


def reduce_max(x, axis, keepdims: bool = False) -> Tensor:
    """Max over axis/axes; gradient routes to the first (row-major) maximum."""
    return _reduce_extreme(as_tensor(x), axis, keepdims, "max")


def reduce_min(x, axis, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(as_tensor(x), axis, keepdims, "min")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _apply(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization and softmax

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply(out, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _apply(out, (x,), bwd)


def layer_norm(x, gain, shift, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{shift.shape} "
                         f"does not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bwd(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dshift = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dshift

    return _apply(out, (x, gain, shift), bwd)


def batch_norm2d(x, gain, shift, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over NCHW. Train mode normalizes by batch
    statistics and updates the running buffers in place; eval mode uses the
    running buffers."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    n, c, h, w = x.shape
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm2d train mode needs >=2 elements per "
                             f"channel plane, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
        m = n * h * w
    mu4 = mu.reshape(1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
    xhat = (x.data - mu4) * inv
    out = xhat * gain.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)

    def bwd(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        dxhat = g * gain.data.reshape(1, c, 1, 1)
        if training:
            dx = inv / m * (m * dxhat
                            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgain, dshift

    return _apply(out, (x, gain, shift), bwd)


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) over NCHW."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs weight {cw}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >=1, got {stride}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output size {ho}x{wo} non-positive for input "
                         f"{h}x{w}, kernel {kh}x{kw}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride]
            out += np.tensordot(xs, weight.data[:, :, i, j],
                                axes=([1], [1])).transpose(0, 3, 1, 2)
    out += bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        db = g.sum(axis=(0, 2, 3))
        dw = np.zeros_like(weight.data)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                si = slice(i, i + stride * (ho - 1) + 1, stride)
                sj = slice(j, j + stride * (wo - 1) + 1, stride)
                xs = xp[:, :, si, sj]
                dw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, si, sj] += np.tensordot(
                    g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dw, db

    return _apply(out, (x, weight, bias), bwd)


def max_pool2d(x, k: int = 2) -> Tensor:
    """k=2 max pooling with stride 2; ties route gradient to the first
    (row-major) maximum in each window."""
    if k != 2:
        raise ShapeError(f"max_pool2d supports k=2 only, got {k}")
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.data.reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w),)

    return _apply(out, (x,), bwd)


def _upsample2x_indices(n: int, dtype):
    # align_corners=False: src = (dst + 0.5)/2 - 0.5, clamped to the grid
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def bilinear_upsample2x(x) -> Tensor:
    """Bilinear 2x upsampling (align_corners=False) over NCHW; linear, so the
    gradient is the transposed interpolation."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    hi0, hi1, hf = _upsample2x_indices(h, x.dtype)
    wi0, wi1, wf = _upsample2x_indices(w, x.dtype)
    hfc = hf.reshape(1, 1, -1, 1)
    wfc = wf.reshape(1, 1, 1, -1)
    rows = x.data[:, :, hi0, :] * (1 - hfc) + x.data[:, :, hi1, :] * hfc
    out = rows[:, :, :, wi0] * (1 - wfc) + rows[:, :, :, wi1] * wfc

    def bwd(g):
        grows = np.zeros((n, c, 2 * h, w), dtype=x.dtype)
        np.add.at(grows.transpose(3, 0, 1, 2), wi0, (g * (1 - wfc)).transpose(3, 0, 1, 2))
        np.add.at(grows.transpose(3, 0, 1, 2), wi1, (g * wfc).transpose(3, 0, 1, 2))
        gx = np.zeros_like(x.data)
        np.add.at(gx.transpose(2, 0, 1, 3), hi0, (grows * (1 - hfc)).transpose(2, 0, 1, 3))
        np.add.at(gx.transpose(2, 0, 1, 3), hi1, (grows * hfc).transpose(2, 0, 1, 3))
        return (gx,)

    return _apply(out, (x,), bwd)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target].

    logits: [N, K, H, W] (or [N, K]); targets: matching integer class map.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim == 2:
        k = logits.shape[1]
        flat = logits  # [N, K]
        tflat = targets.reshape(-1)
    elif logits.ndim == 4:
        n, k, h, w = logits.shape
        if targets.shape != (n, h, w):
            raise ShapeError(f"targets shape {targets.shape} does not match "
                             f"logits {logits.shape}")
        flat = transpose(logits, (0, 2, 3, 1)).reshape((n * h * w, k))
        tflat = targets.reshape(-1)
    else:
        raise ShapeError(f"cross_entropy expects 2-d or 4-d logits, got {logits.shape}")
    if tflat.min() < 0 or tflat.max() >= k:
        raise IndexError(f"target class out of range [0, {k}): "
                         f"min {tflat.min()}, max {tflat.max()}")
    logp = log_softmax(flat, axis=-1)
    count = tflat.shape[0]
    picked = getitem(logp, (np.arange(count), tflat))
    return -reduce_sum(picked) * (1.0 / count)


def sigmoid_bce_with_logits(logits, onehot: np.ndarray) -> Tensor:
    """Mean per-class binary cross-entropy against a {0,1} target array.

    Numerically stable fused op; gradient is (sigmoid(z) - y) / count.
    """
    logits = as_tensor(logits)
    y = np.asarray(onehot, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"targets shape {y.shape} does not match logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    out = np.asarray(loss.sum() / count, dtype=z.dtype)

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (g * (sig - y) / count,)

    return _apply(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor, tape: Tape):
    """Reverse accumulation over the tape; attaches .grad to every
    requires_grad tensor reached from `loss`."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise StateError("tape already consumed by a previous backward pass")
    tape._consumed = True

    produced = {id(node.output) for node in tape._nodes}
    if id(loss) not in produced:
        raise StateError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        input_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, tensor in leaves.items():
        if key in grads:
            tensor.grad = grads[key]


# ---------------------------------------------------------------------------
# verification harness

def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Compare autodiff gradients of a scalar-valued f against central finite
    differences. Returns the maximum elementwise relative error, with
    denominator max(|analytic|, |numeric|, 1e-8)."""
    x.grad = None
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    if x.grad is None:
        raise StateError("f does not depend on x (no gradient produced)")
    analytic = np.array(x.grad, dtype=np.float64, copy=True)

    numeric = np.zeros(x.size, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
