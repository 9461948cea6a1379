"""Dense float tensors with define-by-run reverse-mode differentiation.

The tape is a flat, append-only list of nodes. Because results are recorded
in creation order, insertion order is already topological, and the backward
pass simply walks the list in exact reverse insertion order. A fresh tape is
installed at the start of every training step (`fresh_tape`).

Default element type is float32. The gradient-check harness may switch to
float64 via `compute_dtype` so central differences at h=1e-3 are not drowned
by single-precision rounding; training always runs in float32.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operands of an op have incompatible shapes."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (frozen tape, off-tape backward, ...)."""


class Tape:
    """Append-only record of executed ops, walked backwards for gradients."""

    __slots__ = ("nodes", "frozen")

    def __init__(self):
        self.nodes: list[Node] = []
        self.frozen = False

    def append(self, node: "Node") -> int:
        if self.frozen:
            raise TapeError("cannot record ops on a frozen tape")
        self.nodes.append(node)
        return len(self.nodes) - 1


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


_tape = Tape()
_grad_enabled = True


def fresh_tape() -> Tape:
    """Install and return a new empty tape, dropping all recorded nodes."""
    global _tape
    _tape = Tape()
    return _tape


def active_tape() -> Tape:
    return _tape


@contextmanager
def no_grad():
    """Disable recording; results inside carry no tape node."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextmanager
def compute_dtype(dtype):
    """Temporarily switch the element type new tensors are created with."""
    global DTYPE
    old = DTYPE
    DTYPE = dtype
    try:
        yield
    finally:
        DTYPE = old


class Tensor:
    """N-d float array, optionally a differentiable leaf or a taped result."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _live(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _record(op: str, out_data: np.ndarray, inputs: list[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.tape = None
    if _grad_enabled and any(_live(t) for t in inputs):
        out.node = _tape.append(Node(op, inputs, backward_fn))
        out.tape = _tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from the loss.

    Repeated calls accumulate; call zero_grad on leaves to reset.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise TapeError("loss is not on the tape and requires no grad")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node: seed}
    tape.frozen = True
    try:
        for idx in range(loss.node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = tape.nodes[idx]
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not _live(inp):
                    continue
                if inp.node is not None:
                    prev = grads.get(inp.node)
                    grads[inp.node] = gi if prev is None else prev + gi
                elif inp.requires_grad:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    finally:
        tape.frozen = False


def zero_grad(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _record("add", out, [a, b], bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)]

    return _record("sub", out, [a, b], bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)]

    return _record("mul", out, [a, b], bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    mask = (x.data > 0).astype(x.data.dtype)

    def bwd(g):
        return [g * mask]

    return _record("relu", out, [x], bwd)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype)

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return [g * (cdf + xd * pdf).astype(xd.dtype)]

    return _record("gelu", out, [x], bwd)


def clamp01(x) -> Tensor:
    """Clip to [0,1]; gradient is zero wherever the input was out of range."""
    x = as_tensor(x)
    out = np.clip(x.data, 0.0, 1.0)
    mask = ((x.data >= 0.0) & (x.data <= 1.0)).astype(x.data.dtype)

    def bwd(g):
        return [g * mask]

    return _record("clamp01", out, [x], bwd)


# ---------------------------------------------------------------- reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    for a in sorted(axes):
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis), dtype=x.data.dtype)
    shape = x.data.shape

    def bwd(g):
        return [np.ascontiguousarray(_expand_reduced(g, shape, axis))]

    return _record("sum", out, [x], bwd)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis), dtype=x.data.dtype)
    shape = x.data.shape
    count = x.data.size if axis is None else x.data.size // out.size

    def bwd(g):
        return [np.ascontiguousarray(_expand_reduced(g, shape, axis)) / count]

    return _record("mean", out, [x], bwd)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return [g.reshape(old)]

    return _record("reshape", out, [x], bwd)


def transpose(x, ax0: int, ax1: int) -> Tensor:
    x = as_tensor(x)
    out = np.swapaxes(x.data, ax0, ax1)

    def bwd(g):
        return [np.swapaxes(g, ax0, ax1)]

    return _record("transpose", out, [x], bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    base = list(ts[0].data.shape)
    for t in ts[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].data.shape} and {t.data.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return list(np.split(g, offsets, axis=axis))

    return _record("concat", out, ts, bwd)


def slice_(x, ranges) -> Tensor:
    """Take x[ranges]; ranges is a tuple of slice objects (one per leading dim)."""
    x = as_tensor(x)
    key = tuple(ranges)
    out = np.ascontiguousarray(x.data[key])
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return [gx]

    return _record("slice", out, [x], bwd)


def embed(x, shape, offset) -> Tensor:
    """Place x into a zero canvas of the given shape at offset (slice adjoint)."""
    x = as_tensor(x)
    if len(shape) != x.data.ndim or len(offset) != x.data.ndim:
        raise ShapeError(f"embed: rank mismatch between {x.data.shape} and canvas {shape}")
    key = tuple(slice(o, o + n) for o, n in zip(offset, x.data.shape))
    if any(o < 0 or o + n > s for o, n, s in zip(offset, x.data.shape, shape)):
        raise ShapeError(f"embed: block {x.data.shape} at {tuple(offset)} exceeds canvas {shape}")
    out = np.zeros(shape, dtype=x.data.dtype)
    out[key] = x.data

    def bwd(g):
        return [np.ascontiguousarray(g[key])]

    return _record("embed", out, [x], bwd)


# ---------------------------------------------------------------- linear alg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return [_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)]

    return _record("matmul", out, [a, b], bwd)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, stride=1, pad=0) -> Tensor:
    """2-d cross-correlation, NCHW input, (F,C,kh,kw) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} and {w.data.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, c, h, wd = x.data.shape
    f, _, kh, kw = w.data.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.data.shape} does not fit input {x.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    wm = w.data.reshape(f, c * kh * kw)
    out = np.matmul(wm, cols).reshape(n, f, oh, ow)

    def bwd(g):
        gm = g.reshape(n, f, oh * ow)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        gcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + wd] if ph or pw else gxp
        return [gx, gw]

    return _record("conv2d", out, [x, w], bwd)


# ---------------------------------------------------------------- normalizers


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return _record("softmax", out, [x], bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bwd(g):
        return [g - p * g.sum(axis=axis, keepdims=True)]

    return _record("log_softmax", out, [x], bwd)


def layer_norm(x, gain, shift, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then scale and shift (broadcastable params)."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bwd(g):
        gxh = g * gain.data
        gx = inv * (
            gxh
            - gxh.mean(axis=axis, keepdims=True)
            - xhat * (gxh * xhat).mean(axis=axis, keepdims=True)
        )
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gshift = _unbroadcast(g, shift.data.shape)
        return [gx, ggain, gshift]

    return _record("layer_norm", out, [x, gain, shift], bwd)


# ---------------------------------------------------------------- resampling


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected NCHW, got {x.data.shape}")
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    n, c, h, w = x.data.shape

    def bwd(g):
        return [g.reshape(n, c, h, f, w, f).sum(axis=(3, 5))]

    return _record("upsample_nearest", out, [x], bwd)


def downsample_avg(x, factor: int) -> Tensor:
    x = as_tensor(x)
    f = int(factor)
    if x.data.ndim != 4 or x.data.shape[2] % f or x.data.shape[3] % f:
        raise ShapeError(f"downsample_avg: shape {x.data.shape} not divisible by {f}")
    n, c, h, w = x.data.shape
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def bwd(g):
        return [np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)]

    return _record("downsample_avg", out, [x], bwd)


# ---------------------------------------------------------------- attention


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; composed from primitives."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(
            f"scaled_dot_attention: incompatible shapes {q.data.shape} and {k.data.shape}"
        )
    d = q.data.shape[-1]
    scores = mul(matmul(q, transpose(k, -1, -2)), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)
