"""Dense float64 tensors with tape-based reverse-mode differentiation.

Image tensors follow the (B, C, H, W) layout. Everything is computed in
64-bit floats with fixed reduction orders, so identical inputs produce
bit-identical outputs across runs. Any op whose output contains NaN/Inf
raises NumericsError on the spot instead of propagating poison values.

Recording: ops append to the thread-local active ``Tape`` (entered via
``with Tape():``) whenever an input participates in differentiation.
Without an active tape, ops just compute.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, NumericsError, ShapeError

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array, optionally participating in gradient recording.

    ``grad`` is populated on requires_grad leaves by ``backward``. Data of
    op outputs is frozen (read-only); leaves stay writable so optimizers
    can update parameters in place between recorded passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Wengert list of primitive applications.

    Ops are appended in execution order, so walking the records backwards
    visits nodes in reverse topological order. A tape can be consumed by
    ``backward`` exactly once; re-recording requires a fresh tape. Tapes
    are not shareable across threads (the active tape is thread-local).
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise ConfigError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        if self._consumed:
            raise ConfigError("tape already consumed by backward; record on a fresh tape")
        out.requires_grad = True
        out._tape = self
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if self._consumed:
            raise ConfigError("backward called twice on one tape")
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ConfigError("loss was not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gt in backward_fn(g):
                if t is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = np.array(gt, dtype=np.float64, copy=True)
        # deliver to leaves (tensors that were never produced by this tape)
        produced = {id(out) for out, _, _ in self._records}
        seen: set[int] = set()
        for _, inputs, _ in self._records:
            for t in inputs:
                key = id(t)
                if t is None or key in produced or key in seen:
                    continue
                seen.add(key)
                if t.requires_grad and key in grads:
                    g = grads[key]
                    if t.grad is None:
                        t.grad = g
                    else:
                        t.grad = t.grad + g


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar recorded loss."""
    if loss._tape is None:
        raise ConfigError("loss is not attached to a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _finite_or_raise(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by {op}")


def _make_out(data: np.ndarray, op: str) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    _finite_or_raise(arr, op)
    if arr.base is not None or not arr.flags.c_contiguous or not arr.flags.owndata:
        arr = np.array(arr, dtype=np.float64, order="C")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.data.flags.writeable = False
    out.requires_grad = False
    out.grad = None
    out._tape = None
    return out


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
    tape = _active_tape()
    if tape is None:
        return
    if any(t is not None and t.requires_grad for t in inputs):
        tape.record(out, tuple(inputs), backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data + b.data, "add")

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    _record(out, (a, b), bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data - b.data, "sub")

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    _record(out, (a, b), bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data * b.data, "mul")

    def bwd(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    _record(out, (a, b), bwd)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _make_out(a.data / b.data, "div")

    def bwd(g):
        return [
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ]

    _record(out, (a, b), bwd)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _make_out(-a.data, "neg")
    _record(out, (a,), lambda g: [(a, -g)])
    return out


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", over="ignore"):
        out = _make_out(a.data**p, "power")

    def bwd(g):
        return [(a, g * p * a.data ** (p - 1.0))]

    _record(out, (a,), bwd)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    out = _make_out(y, "exp")
    _record(out, (a,), lambda g: [(a, g * y)])
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _make_out(np.log(a.data), "log")
    _record(out, (a,), lambda g: [(a, g / a.data)])
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)
    out = _make_out(y, "sqrt")
    _record(out, (a,), lambda g: [(a, g * 0.5 / y)])
    return out


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, so finite differences apply."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = _make_out(x * cdf, "gelu")

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return [(a, g * (cdf + x * pdf))]

    _record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make_out(a.data.reshape(shape), "reshape")
    _record(out, (a,), lambda g: [(a, g.reshape(a.shape))])
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = _make_out(np.transpose(a.data, axes), "transpose")
    inv = tuple(np.argsort(axes))
    _record(out, (a,), lambda g: [(a, np.transpose(g, inv))])
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make_out(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return pieces

    _record(out, tuple(tensors), bwd)
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make_out(a.data.sum(axis=axis, keepdims=keepdims), "sum")

    def bwd(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return [(a, np.broadcast_to(gx, a.shape).copy())]

    _record(out, (a,), bwd)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch dims of a and b must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    out = _make_out(a.data @ b.data, "matmul")

    def bwd(g):
        return [
            (a, g @ np.swapaxes(b.data, -1, -2)),
            (b, np.swapaxes(a.data, -1, -2) @ g),
        ]

    _record(out, (a, b), bwd)
    return out


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: y[..., o] = sum_i x[..., i] w[o, i] + b[o]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear expects last axis {cin}, got input shape {x.shape}")
    y = np.einsum("...i,oi->...o", x.data, weight.data, optimize=True)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"linear bias shape {bias.shape} != ({cout},)")
        y = y + bias.data
    out = _make_out(y, "linear")

    def bwd(g):
        grads = [
            (x, np.einsum("...o,oi->...i", g, weight.data, optimize=True)),
            (weight, np.einsum("...o,...i->oi", g, x.data, optimize=True)),
        ]
        if bias is not None:
            grads.append((bias, g.reshape(-1, cout).sum(axis=0)))
        return grads

    _record(out, (x, weight) + ((bias,) if bias is not None else ()), bwd)
    return out


# ---------------------------------------------------------------------------
# normalization and attention-style ops
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1, additive_mask=None) -> Tensor:
    """Max-stabilized softmax along ``axis``.

    ``additive_mask`` holds 0 for allowed entries and -inf for disallowed
    ones (broadcastable against x); masked entries come out exactly 0. A
    slice with every entry masked has no valid key and is a config error.
    """
    x = _as_tensor(x)
    s = x.data if additive_mask is None else x.data + _mask_data(additive_mask)
    m = np.max(s, axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise ConfigError("softmax slice is fully masked (no valid key)")
    e = np.exp(s - m)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / denom
    out = _make_out(y, "softmax")

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    _record(out, (x,), bwd)
    return out


def _mask_data(mask) -> np.ndarray:
    if isinstance(mask, Tensor):
        return mask.data
    return np.asarray(mask, dtype=np.float64)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    y = x.data - lse
    out = _make_out(y, "log_softmax")

    def bwd(g):
        return [(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]

    _record(out, (x,), bwd)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis (axis 1) per spatial location.

    For (B, C, H, W) input, every (b, h, w) column of C values is brought
    to zero mean / unit variance, then scaled and shifted per channel.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shape must be ({c},)")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make_out(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape), "layer_norm")

    def bwd(g):
        gsum_axes = tuple(i for i in range(x.ndim) if i != 1)
        gy = g * gamma.data.reshape(bshape)
        mean_gy = gy.mean(axis=1, keepdims=True)
        mean_gyx = (gy * xhat).mean(axis=1, keepdims=True)
        dx = inv * (gy - mean_gy - xhat * mean_gyx)
        return [
            (x, dx),
            (gamma, (g * xhat).sum(axis=gsum_axes)),
            (beta, g.sum(axis=gsum_axes)),
        ]

    _record(out, (x, gamma, beta), bwd)
    return out


# ---------------------------------------------------------------------------
# spatial ops on (B, C, H, W)
# ---------------------------------------------------------------------------


def _out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"window {k}x{k} does not fit input {h}x{w} with padding {padding}")
    return ho, wo


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2D cross-correlation with zero-fill padding.

    kernel has shape (Cout, Cin/groups, K, K) with odd K. Output height is
    floor((H + 2*padding - K)/stride) + 1, likewise width.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4D input and 4D kernel")
    bsz, cin, h, w = x.shape
    cout, cg, kh, kw = kernel.shape
    if kh != kw:
        raise ConfigError("conv2d kernels must be square")
    k = kh
    if k % 2 == 0:
        raise ConfigError("conv2d kernel size must be odd")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
    if cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise ShapeError(f"kernel expects Cin/groups={cg}, input has Cin/groups={cin // groups}")
    og = cout // groups
    ho, wo = _out_hw(h, w, k, stride, padding)

    xp = np.zeros((bsz, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data
    xg = xp.reshape(bsz, groups, cg, h + 2 * padding, w + 2 * padding)
    wg = kernel.data.reshape(groups, og, cg, k, k)

    y = np.zeros((bsz, groups, og, ho, wo), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            win = xg[:, :, :, ky : ky + (ho - 1) * stride + 1 : stride, kx : kx + (wo - 1) * stride + 1 : stride]
            y += np.einsum("bgchw,goc->bgohw", win, wg[:, :, :, ky, kx], optimize=True)
    y = y.reshape(bsz, cout, ho, wo)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        y = y + bias.data.reshape(1, cout, 1, 1)
    out = _make_out(y, "conv2d")

    def bwd(g):
        gg = g.reshape(bsz, groups, og, ho, wo)
        dw = np.zeros_like(wg)
        gxp = np.zeros_like(xg)
        for ky in range(k):
            for kx in range(k):
                sl_h = slice(ky, ky + (ho - 1) * stride + 1, stride)
                sl_w = slice(kx, kx + (wo - 1) * stride + 1, stride)
                win = xg[:, :, :, sl_h, sl_w]
                dw[:, :, :, ky, kx] = np.einsum("bgohw,bgchw->goc", gg, win, optimize=True)
                gxp[:, :, :, sl_h, sl_w] += np.einsum(
                    "bgohw,goc->bgchw", gg, wg[:, :, :, ky, kx], optimize=True
                )
        gx = gxp.reshape(bsz, cin, h + 2 * padding, w + 2 * padding)[
            :, :, padding : padding + h, padding : padding + w
        ]
        grads = [(x, gx), (kernel, dw.reshape(cout, cg, k, k))]
        if bias is not None:
            grads.append((bias, gg.sum(axis=(0, 3, 4)).reshape(cout)))
        return grads

    _record(out, (x, kernel) + ((bias,) if bias is not None else ()), bwd)
    return out


def avg_pool2d(x, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average pooling with a fixed K*K divisor (padded cells count).

    stride 1 with padding (K-1)/2 preserves the spatial size, which is the
    token-mixer configuration.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d expects (B, C, H, W)")
    if k % 2 == 0 or k < 1:
        raise ConfigError("avg_pool2d pool size must be odd and positive")
    if stride < 1 or padding < 0:
        raise ConfigError("avg_pool2d needs stride >= 1 and padding >= 0")
    bsz, c, h, w = x.shape
    ho, wo = _out_hw(h, w, k, stride, padding)
    xp = np.zeros((bsz, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data

    acc = np.zeros((bsz, c, ho, wo), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            acc += xp[:, :, ky : ky + (ho - 1) * stride + 1 : stride, kx : kx + (wo - 1) * stride + 1 : stride]
    scale = 1.0 / (k * k)
    out = _make_out(acc * scale, "avg_pool2d")

    def bwd(g):
        gxp = np.zeros_like(xp)
        gs = g * scale
        for ky in range(k):
            for kx in range(k):
                gxp[:, :, ky : ky + (ho - 1) * stride + 1 : stride, kx : kx + (wo - 1) * stride + 1 : stride] += gs
        return [(x, gxp[:, :, padding : padding + h, padding : padding + w])]

    _record(out, (x,), bwd)
    return out


def global_avg_pool(x) -> Tensor:
    """Collapse (B, C, H, W) to (B, C) by averaging the spatial axes."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects (B, C, H, W)")
    _, _, h, w = x.shape
    out = _make_out(x.data.mean(axis=(2, 3)), "global_avg_pool")

    def bwd(g):
        return [(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())]

    _record(out, (x,), bwd)
    return out


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source indices and blend weights for one axis."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, frac


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample with half-pixel centers (align-corners false)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("bilinear_resize expects (B, C, H, W)")
    if out_h < 1 or out_w < 1:
        raise ConfigError("bilinear_resize output size must be >= 1")
    bsz, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = _make_out(x.data, "bilinear_resize")
        _record(out, (x,), lambda g: [(x, g)])
        return out

    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    d = x.data
    y = (
        d[:, :, y0[:, None], x0[None, :]] * (wy0 * wx0)
        + d[:, :, y0[:, None], x1[None, :]] * (wy0 * wx1)
        + d[:, :, y1[:, None], x0[None, :]] * (wy1 * wx0)
        + d[:, :, y1[:, None], x1[None, :]] * (wy1 * wx1)
    )
    out = _make_out(y, "bilinear_resize")

    def bwd(g):
        gx = np.zeros_like(d)
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x0[None, :]), g * (wy0 * wx0))
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x1[None, :]), g * (wy0 * wx1))
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x0[None, :]), g * (wy1 * wx0))
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x1[None, :]), g * (wy1 * wx1))
        return [(x, gx)]

    _record(out, (x,), bwd)
    return out
