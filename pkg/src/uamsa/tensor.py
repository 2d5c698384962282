"""Tensor type and tape-based reverse-mode autodiff.

Tensors hold a numpy array (float32 by default, float64 on request for
gradient oracles).  Operations record a node on the innermost active
:class:`Tape`; nothing is recorded outside a ``with Tape():`` block, which is
how inference runs.  Gradients are stored in the dtype of the data they
belong to.  Reductions, pooling and resampling accumulate in float64 and
round back; convolutions and matmuls use the BLAS kernel of the storage
dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GeometryError, NumericalError, ParameterError, ShapeError, TapeError
from .rng import as_generator

_TAPES: list["Tape"] = []
_DEBUG = False


def set_debug(flag: bool) -> None:
    """When set, every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node = None
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another dtype (keeps ``requires_grad``)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one reverse pass.

    >>> x = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(x * x)
    >>> backward(tape, loss); x.grad.tolist()
    [2.0, -4.0]
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


def _make(arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {getattr(backward, '__qualname__', 'op')}")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        if tape.consumed:
            raise TapeError("tape already consumed by backward(); call reset() before reuse")
        out.requires_grad = True
        node = _Node(out, tuple(inputs), backward)
        out._node = (tape, len(tape.nodes))
        tape.nodes.append(node)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse pass over ``tape`` seeded at the scalar ``loss``.

    Gradients of leaf tensors (``requires_grad`` without a recorded node) are
    added to their ``.grad``.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; reset() it first")
    if loss._node is None or loss._node[0] is not tape:
        raise TapeError("loss was not produced under this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss._node[1] + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.consumed = True
    tape.nodes = []


# ---------------------------------------------------------------- helpers


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), _bw)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def _bw(g):
        return (g * (2 * xd),)

    return _make(xd * xd, (x,), _bw)


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ParameterError("log of non-positive value; clamp first")

    def _bw(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), _bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes where ``lo <= x <= hi``."""
    if lo > hi:
        raise ParameterError(f"clamp bounds reversed: {lo} > {hi}")
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)

    def _bw(g):
        return (g * inside,)

    return _make(np.clip(xd, lo, hi).astype(xd.dtype, copy=False), (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped into the open interval (0, 1) of the dtype."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)
    info = np.finfo(xd.dtype)
    y = np.clip(y, info.tiny, np.nextafter(xd.dtype.type(1), xd.dtype.type(0)))

    def _bw(g):
        return (g * y * (1 - y),)

    return _make(y, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0

    def _bw(g):
        return (g * mask,)

    return _make(np.where(mask, xd, xd.dtype.type(0)), (x,), _bw)


def dropout(x: Tensor, p: float, active: bool, rng=None) -> Tensor:
    """Inverted dropout: survivors scaled by ``1/(1-p)`` while active."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not active or p == 0:
        return x
    gen = as_generator(rng)
    keep = gen.random(x.shape, dtype=np.float32) >= p
    scale = np.where(keep, x.dtype.type(1.0 / (1.0 - p)), x.dtype.type(0))

    def _bw(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), _bw)


# ------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is not None:
        axis = _normalize_axes(axis, xd.ndim)
    out = np.sum(xd, axis=axis, dtype=np.float64, keepdims=keepdims).astype(xd.dtype)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype),)

    return _make(np.asarray(out), (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is not None:
        axis = _normalize_axes(axis, xd.ndim)
        count = int(np.prod([xd.shape[a] for a in axis]))
    else:
        count = xd.size
    out = np.mean(xd, axis=axis, dtype=np.float64, keepdims=keepdims).astype(xd.dtype)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / xd.dtype.type(count), xd.shape).astype(xd.dtype),)

    return _make(np.asarray(out), (x,), _bw)


def _normalize_axes(axis, ndim) -> tuple:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_check_axis(a, ndim) for a in axis))


def softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(xd.dtype)

    def _bw(g):
        inner = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)
        return (y * (g - inner),)

    return _make(y, (x,), _bw)


# ------------------------------------------------------------ shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None

    def _bw(g):
        return (g.reshape(src),)

    return _make(out, (x,), _bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")

    def _bw(g):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)

    return _make(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0]
    axis = _check_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat shape mismatch: {ref.shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# --------------------------------------------------------- linear algebra


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul expects B*m*k @ B*k*n, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g @ bd.transpose(0, 2, 1) if a.requires_grad else None
        gb = ad.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), _bw)


def _channel_sum(g):
    B, C = g.shape[:2]
    return g.reshape(B, C, -1).sum(axis=2, dtype=np.float64).sum(axis=0)


def _conv_out(size, k, stride, padding, axis_name):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"conv2d {axis_name}: ({size} + 2*{padding} - {k}) is not a non-negative multiple of stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, NCHW input, OIHW weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    Ho = _conv_out(H, kh, stride, padding, "height")
    Wo = _conv_out(W, kw, stride, padding, "width")
    wd = weight.data

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        w2 = wd.reshape(Co, Ci)
        out = np.matmul(w2, xs.reshape(B, Ci, Ho * Wo)).reshape(B, Co, Ho, Wo)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def _bw(g):
            g3 = g.reshape(B, Co, Ho * Wo)
            gx = gw = gb = None
            if x.requires_grad:
                gx = np.matmul(w2.T, g3).reshape(B, Ci, Ho, Wo)
                if stride > 1:
                    full = np.zeros_like(x.data)
                    full[:, :, ::stride, ::stride] = gx
                    gx = full
            if weight.requires_grad:
                xs3 = np.ascontiguousarray(xs).reshape(B, Ci, Ho * Wo)
                gw = np.tensordot(g3, xs3, axes=([0, 2], [0, 2])).reshape(Co, Ci, 1, 1).astype(wd.dtype)
            if bias is not None and bias.requires_grad:
                gb = _channel_sum(g).astype(bias.data.dtype)
            return gx, gw, gb

        inputs = (x, weight) if bias is None else (x, weight, bias)
        return _make(out, inputs, _bw)

    if stride == 1 and Co < Ci:
        out, _bw = _conv_shift_add(x, weight, padding, Ho, Wo)
    else:
        out, _bw = _conv_im2col(x, weight, stride, padding, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _bw_all(g):
        gx, gw = _bw(g)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = _channel_sum(g).astype(bias.data.dtype)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, _bw_all)


def _conv_im2col(x, weight, stride, padding, Ho, Wo):
    B, C, H, W = x.shape
    Co, _, kh, kw = weight.shape
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    w2 = wd.reshape(Co, C * kh * kw)
    # B, C, kh*kw, Ho, Wo -> B, C*kh*kw, Ho*Wo (row order matches OIHW weights)
    cols = np.empty((B, C, kh * kw, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i : i + hs : stride, j : j + ws : stride]
    cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    out = np.matmul(w2, cols).reshape(B, Co, Ho, Wo)
    if not weight.requires_grad:
        cols = None

    def _bw(g):
        g3 = g.reshape(B, Co, Ho * Wo)
        gx = gw = None
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            gw = gw.astype(wd.dtype).reshape(Co, C, kh, kw)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3).reshape(B, C, kh * kw, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, :, i * kw + j]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + H, padding : padding + W]) if padding else gxp
        return gx, gw

    return out, _bw


def _shift_ranges(k, pad, size, out_size):
    """Output rows receiving input row ``o + k - pad`` and the matching source rows."""
    lo = max(0, pad - k)
    hi = min(out_size, size + pad - k)
    return lo, hi, lo + k - pad, hi + k - pad


def _conv_shift_add(x, weight, padding, Ho, Wo):
    """Stride-1 conv as one GEMM per kernel tap followed by shifted adds.

    Cheaper than im2col when the output has fewer channels than the input,
    because only ``kh*kw*C_out`` intermediate rows are materialized.
    """
    B, C, H, W = x.shape
    Co, _, kh, kw = weight.shape
    xd, wd = x.data, weight.data
    x3 = xd.reshape(B, C, H * W)
    wstack = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(kh * kw * Co, C)
    y = np.matmul(wstack, x3).reshape(B, kh * kw, Co, H, W)
    out = np.zeros((B, Co, Ho, Wo), dtype=xd.dtype)
    taps = []
    for i in range(kh):
        for j in range(kw):
            r = _shift_ranges(i, padding, H, Ho)
            c = _shift_ranges(j, padding, W, Wo)
            taps.append((i * kw + j, r, c))
            if r[1] > r[0] and c[1] > c[0]:
                out[:, :, r[0] : r[1], c[0] : c[1]] += y[:, i * kw + j, :, r[2] : r[3], c[2] : c[3]]
    del y

    def _bw(g):
        # gshift[k][o, s] = g[o, s - k + pad]
        gshift = np.zeros((B, kh * kw, Co, H, W), dtype=xd.dtype)
        for k, r, c in taps:
            if r[1] > r[0] and c[1] > c[0]:
                gshift[:, k, :, r[2] : r[3], c[2] : c[3]] = g[:, :, r[0] : r[1], c[0] : c[1]]
        gshift = gshift.reshape(B, kh * kw * Co, H * W)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(wstack.T, gshift).reshape(B, C, H, W)
        if weight.requires_grad:
            gws = np.matmul(gshift, x3.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            gw = gws.reshape(kh, kw, Co, C).transpose(2, 3, 0, 1).astype(wd.dtype)
            gw = np.ascontiguousarray(gw)
        return gx, gw

    return out, _bw


# ---------------------------------------------------- pooling / resampling


def pool_matrix(size: int, out: int) -> np.ndarray:
    """Row i averages input window [floor(i*size/out), ceil((i+1)*size/out))."""
    m = np.zeros((out, size))
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def interp_matrix(size: int, out: int, mode: str) -> np.ndarray:
    """Resampling weights from ``size`` to ``out`` samples (either direction)."""
    m = np.zeros((out, size))
    if mode == "nearest":
        for i in range(out):
            m[i, min((i * size) // out, size - 1)] = 1.0
    elif mode == "bilinear":
        scale = size / out
        for i in range(out):
            src = max((i + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(math.floor(src)), size - 1)
            i1 = min(i0 + 1, size - 1)
            frac = src - i0
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
    else:
        raise ParameterError(f"unknown resampling mode {mode!r}")
    return m


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    xd = x.data
    out = (mh @ xd.astype(np.float64) @ mw.T).astype(xd.dtype)

    def _bw(g):
        return ((mh.T @ g.astype(np.float64) @ mw).astype(xd.dtype),)

    return _make(out, (x,), _bw)


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects B*C*H*W, got {x.shape}")
    B, C, H, W = x.shape
    if not (1 <= out_h <= H and 1 <= out_w <= W):
        raise GeometryError(f"cannot pool {H}x{W} to {out_h}x{out_w}")
    if out_h == H and out_w == W:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    if H % out_h == 0 and W % out_w == 0:
        fh, fw = H // out_h, W // out_w
        xd = x.data
        out = xd.reshape(B, C, out_h, fh, out_w, fw).mean(axis=(3, 5), dtype=np.float64).astype(xd.dtype)
        inv = xd.dtype.type(1.0 / (fh * fw))

        def _bw(g):
            gg = (g * inv)[:, :, :, None, :, None]
            return (np.broadcast_to(gg, (B, C, out_h, fh, out_w, fw)).reshape(B, C, H, W),)

        return _make(out, (x,), _bw)
    return _separable(x, pool_matrix(H, out_h), pool_matrix(W, out_w))


def upsample(x: Tensor, out_h: int, out_w: int, mode: str = "nearest") -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample expects B*C*h*w, got {x.shape}")
    B, C, h, w = x.shape
    if out_h < h or out_w < w:
        raise GeometryError(f"upsample cannot shrink {h}x{w} to {out_h}x{out_w}; use adaptive_avg_pool2d")
    if mode not in ("nearest", "bilinear"):
        raise ParameterError(f"unknown upsample mode {mode!r}")
    if out_h == h and out_w == w:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    if mode == "nearest" and out_h % h == 0 and out_w % w == 0:
        fh, fw = out_h // h, out_w // w
        xd = x.data
        out = np.broadcast_to(xd[:, :, :, None, :, None], (B, C, h, fh, w, fw)).reshape(B, C, out_h, out_w)

        def _bw(g):
            s = g.reshape(B, C, h, fh, w, fw).sum(axis=(3, 5), dtype=np.float64)
            return (s.astype(xd.dtype),)

        return _make(out, (x,), _bw)
    return _separable(x, interp_matrix(h, out_h, mode), interp_matrix(w, out_w, mode))
