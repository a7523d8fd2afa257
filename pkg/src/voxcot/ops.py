"""Differentiable operations for the tensor engine.

Everything the segmentation network and its losses need: 3D cross-correlation
with arbitrary (asymmetric) kernel extents, learned/trilinear upsampling,
inverted dropout, channel softmax, elementwise arithmetic with broadcasting,
reductions, and exact spatial permutation/flip.

Convolutions are evaluated by materializing sliding windows
(``np.lib.stride_tricks.sliding_window_view``) and contracting with
``np.tensordot`` so the heavy lifting lands in BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import views
from .rng import RngStream
from .tensor import EngineError, Tensor

__all__ = [
    "add", "sub", "mul", "div", "mul_scalar", "add_scalar", "relu", "sum",
    "mean", "softmax_channel", "concat_channels", "channel_slice",
    "add_channel_bias", "permute_flip", "dropout", "conv3d",
    "transpose_conv3d", "resize_trilinear",
]

_builtin_sum = sum  # shadowed below


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _triple(v, name: str):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(e) for e in v)
    if len(t) != 3:
        raise EngineError(f"{name} must be an int or a 3-tuple, got {v!r}")
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data  # non-finite results raise in _from_op

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "div")


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data * s

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return Tensor._from_op(out_data, (x,), backward, "mul_scalar")


def add_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data + s

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)

    return Tensor._from_op(out_data, (x,), backward, "add_scalar")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return Tensor._from_op(out_data, (x,), backward, "relu")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.data.shape

    def backward(g):
        if not x.requires_grad:
            return
        gg = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(in_shape) for a in axes)
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        x.accumulate_grad(np.broadcast_to(gg, in_shape).astype(x.data.dtype, copy=False))

    return Tensor._from_op(np.asarray(out_data), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return mul_scalar(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# softmax over the channel axis
# ---------------------------------------------------------------------------

def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 1 of an (N, C, ...) tensor; channel sums are 1."""
    if x.ndim < 2:
        raise EngineError(f"softmax_channel expects (N, C, ...), got shape {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return Tensor._from_op(y, (x,), backward, "softmax_channel")


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def concat_channels(tensors) -> Tensor:
    tensors = [t for t in tensors]
    if not tensors:
        raise EngineError("concat_channels needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise EngineError(
                f"concat_channels shape mismatch: {base} vs {s} "
                "(all axes except channels must agree)")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat_channels")


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    out_data = np.ascontiguousarray(x.data[:, lo:hi])

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            x.accumulate_grad(gx)

    return Tensor._from_op(out_data, (x,), backward, "channel_slice")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    c = x.data.shape[1]
    if bias.data.shape != (c,):
        raise EngineError(
            f"bias shape {bias.data.shape} does not match channel axis extent {c}")
    out_data = x.data + bias.data.reshape((1, c) + (1,) * (x.ndim - 2))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if bias.requires_grad:
            axes = (0,) + tuple(range(2, g.ndim))
            bias.accumulate_grad(g.sum(axis=axes))

    return Tensor._from_op(out_data, (x, bias), backward, "add_channel_bias")


# ---------------------------------------------------------------------------
# exact spatial permutation / flip (differentiable view transform)
# ---------------------------------------------------------------------------

def permute_flip(x: Tensor, perm, flips) -> Tensor:
    """Apply a cube-symmetry index remap to the last three axes."""
    perm = tuple(perm)
    flips = tuple(bool(f) for f in flips)
    out_data = views.transform_array(x.data, perm, flips)
    inv_perm, inv_flips = views.inverse_perm_flips(perm, flips)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(views.transform_array(g, inv_perm, inv_flips))

    return Tensor._from_op(out_data, (x,), backward, "permute_flip")


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x: Tensor, p_drop: float, mode: str, rng_stream: RngStream | None = None) -> Tensor:
    """Inverted dropout.

    ``train`` and ``mc`` sample a fresh mask from ``rng_stream`` (MC-dropout at
    test time is exactly train-mode sampling); ``eval`` is the identity.
    """
    if not 0.0 <= p_drop < 1.0:
        raise EngineError(f"p_drop must be in [0, 1), got {p_drop}")
    if mode not in ("train", "eval", "mc"):
        raise EngineError(f"dropout mode must be train|eval|mc, got {mode!r}")
    if mode == "eval" or p_drop == 0.0:
        return x
    if rng_stream is None:
        raise EngineError("dropout in train/mc mode requires an rng_stream")
    gen = rng_stream.generator()
    dtype = x.data.dtype if x.data.dtype in (np.float32, np.float64) else np.float32
    keep = gen.random(x.data.shape, dtype=dtype) >= p_drop
    scale = np.asarray(1.0 / (1.0 - p_drop), dtype=dtype)
    mult = keep.astype(dtype) * scale
    out_data = x.data * mult

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mult)

    return Tensor._from_op(out_data, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation), asymmetric kernels supported
# ---------------------------------------------------------------------------

def _conv_out_extent(size, k, s, p, axis_name):
    o = (size + 2 * p - k) // s + 1
    if o < 1:
        raise EngineError(
            f"conv3d output extent along {axis_name} would be {o} "
            f"(input {size}, kernel {k}, stride {s}, padding {p})")
    return o


def conv3d(x: Tensor, weight: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlate (N, Cin, D, H, W) with (Cout, Cin, kd, kh, kw).

    Lowered to im2col + GEMM: a channels-last column buffer is filled with one
    strided copy per kernel tap, then a single matmul produces the output.
    The buffer is kept for the backward pass (weight grad is one GEMM; input
    grad is one GEMM plus a per-tap scatter-add).
    """
    if x.ndim != 5:
        raise EngineError(f"conv3d input must be 5D (N,C,D,H,W), got shape {x.data.shape}")
    if weight.ndim != 5:
        raise EngineError(
            f"conv3d kernel must be 5D (Cout,Cin,kd,kh,kw), got shape {weight.data.shape}")
    n, cin, d, h, w = x.data.shape
    cout, wcin, kd, kh, kw = weight.data.shape
    if wcin != cin:
        raise EngineError(
            f"conv3d channel mismatch: input axis 1 has {cin} channels, "
            f"kernel axis 1 expects {wcin}")
    sd, sh, sw = _triple(stride, "stride")
    pd, ph, pw = _triple(padding, "padding")
    if min(sd, sh, sw) < 1 or min(pd, ph, pw) < 0:
        raise EngineError("conv3d stride must be >= 1 and padding >= 0")
    od = _conv_out_extent(d, kd, sd, pd, "D (axis 2)")
    oh = _conv_out_extent(h, kh, sh, ph, "H (axis 3)")
    ow = _conv_out_extent(w, kw, sw, pw, "W (axis 4)")
    dtype = x.data.dtype

    if pd or ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = np.ascontiguousarray(x.data)

    m = od * oh * ow
    kvol = kd * kh * kw
    if kvol == 1 and (sd, sh, sw) == (1, 1, 1):
        cols_mat = xp.reshape(n, cin, m)  # 1x1x1 kernel: columns are the input
    else:
        cols = np.empty((n, cin, kd, kh, kw, od, oh, ow), dtype=dtype)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    cols[:, :, i, j, k] = xp[:, :, i:i + od * sd:sd,
                                             j:j + oh * sh:sh, k:k + ow * sw:sw]
        cols_mat = cols.reshape(n, cin * kvol, m)
    w_mat = weight.data.reshape(cout, cin * kvol)
    out = np.matmul(w_mat, cols_mat).reshape(n, cout, od, oh, ow)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(n, cout, m)
        if weight.requires_grad:
            gw = np.zeros((cout, cin * kvol), dtype=g.dtype)
            for b in range(n):
                gw += g3[b] @ cols_mat[b].T
            weight.accumulate_grad(gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g3).reshape(n, cin, kd, kh, kw, od, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i:i + od * sd:sd, j:j + oh * sh:sh,
                            k:k + ow * sw:sw] += gcols[:, :, i, j, k]
            gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
            x.accumulate_grad(np.ascontiguousarray(gx))

    return Tensor._from_op(out, (x, weight), backward, "conv3d")


# ---------------------------------------------------------------------------
# transposed convolution: integer-factor learned upsampling
# ---------------------------------------------------------------------------

def transpose_conv3d(x: Tensor, weight: Tensor, factor: int) -> Tensor:
    """Upsample (N, Cin, D, H, W) by ``factor`` with kernel (Cin, Cout, f, f, f).

    Kernel extent equals the stride, so output taps never overlap and the
    output spatial extents are exactly ``factor`` times the input's.
    """
    f = int(factor)
    if f < 2:
        raise EngineError(f"transpose_conv3d factor must be >= 2, got {factor}")
    if x.ndim != 5 or weight.ndim != 5:
        raise EngineError("transpose_conv3d expects 5D input and kernel")
    n, cin, d, h, w = x.data.shape
    wcin, cout, fd, fh, fw = weight.data.shape
    if wcin != cin:
        raise EngineError(
            f"transpose_conv3d channel mismatch: input has {cin}, kernel expects {wcin}")
    if (fd, fh, fw) != (f, f, f):
        raise EngineError(
            f"transpose_conv3d kernel extents {(fd, fh, fw)} must equal factor {f}")

    t = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (N,D,H,W,Cout,f,f,f)
    out_cl = np.empty((n, d * f, h * f, w * f, cout), dtype=x.data.dtype)
    for i in range(f):
        for j in range(f):
            for k in range(f):
                out_cl[:, i::f, j::f, k::f, :] = t[..., i, j, k]
    out = np.ascontiguousarray(np.moveaxis(out_cl, -1, 1))

    def backward(g):
        g_cl = np.moveaxis(g, 1, -1)  # (N,Df,Hf,Wf,Cout)
        if x.requires_grad:
            gx_cl = np.zeros((n, d, h, w, cin), dtype=x.data.dtype)
            for i in range(f):
                for j in range(f):
                    for k in range(f):
                        gslice = g_cl[:, i::f, j::f, k::f, :]
                        gx_cl += np.tensordot(gslice, weight.data[:, :, i, j, k],
                                              axes=([4], [1]))
            x.accumulate_grad(np.ascontiguousarray(np.moveaxis(gx_cl, -1, 1)))
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(f):
                for j in range(f):
                    for k in range(f):
                        gslice = g_cl[:, i::f, j::f, k::f, :]
                        gw[:, :, i, j, k] = np.tensordot(
                            x.data, gslice, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
            weight.accumulate_grad(gw)

    return Tensor._from_op(out, (x, weight), backward, "transpose_conv3d")


# ---------------------------------------------------------------------------
# trilinear resize (separable 1D linear interpolation per spatial axis)
# ---------------------------------------------------------------------------

def _lerp_coeffs(size: int, factor: int):
    """Source indices and weights for factor-x upsampling of one axis."""
    src = (np.arange(size * factor, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1.0)
    lo = np.minimum(np.floor(src).astype(np.int64), size - 2) if size > 1 else \
        np.zeros(size * factor, dtype=np.int64)
    t = src - lo
    return lo, t


def _lerp_axis_forward(a: np.ndarray, axis: int, lo, t):
    moved = np.moveaxis(a, axis, -1)
    t_ = t.astype(a.dtype)
    out = moved[..., lo] * (1.0 - t_) + moved[..., lo + 1] * t_
    return np.moveaxis(out, -1, axis)


def _lerp_axis_backward(g: np.ndarray, axis: int, in_size: int, lo, t):
    gm = np.moveaxis(g, axis, -1)
    t_ = t.astype(g.dtype)
    gin = np.zeros(gm.shape[:-1] + (in_size,), dtype=g.dtype)
    np.add.at(gin, (Ellipsis, lo), gm * (1.0 - t_))
    np.add.at(gin, (Ellipsis, lo + 1), gm * t_)
    return np.moveaxis(gin, -1, axis)


def resize_trilinear(x: Tensor, factor: int) -> Tensor:
    """Upsample the three trailing spatial axes by an integer factor >= 2."""
    f = int(factor)
    if f < 2:
        raise EngineError(f"resize_trilinear factor must be >= 2, got {factor}")
    if x.ndim != 5:
        raise EngineError(f"resize_trilinear expects 5D input, got shape {x.data.shape}")
    sizes = x.data.shape[2:]
    coeffs = [_lerp_coeffs(s, f) for s in sizes]

    out = x.data
    for ax, (lo, t) in zip((2, 3, 4), coeffs):
        if x.data.shape[ax] == 1:
            out = np.repeat(out, f, axis=ax)
        else:
            out = _lerp_axis_forward(out, ax, lo, t)

    def backward(g):
        if not x.requires_grad:
            return
        gg = g
        for ax, in_size, (lo, t) in zip((4, 3, 2), sizes[::-1], coeffs[::-1]):
            if in_size == 1:
                gg = gg.sum(axis=ax, keepdims=True)
            else:
                gg = _lerp_axis_backward(gg, ax, in_size, lo, t)
        x.accumulate_grad(gg)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "resize_trilinear")
