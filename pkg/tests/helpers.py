"""Shared test utilities: finite-difference gradient checks and brute-force
oracles for the structured ops (conv, transpose conv, trilinear resize)."""

import numpy as np

from voxcot.tensor import Tensor
from voxcot import ops


def gradcheck(fn, arrays, tol=1e-5, eps=1e-6, max_checks=6, seed=0):
    """Central finite-difference check of fn's gradient w.r.t. every array.

    fn takes len(arrays) Tensors and returns one Tensor. The output is
    projected onto a fixed random direction so the check covers non-scalar
    outputs. Arrays are promoted to float64. Returns the worst relative
    error; raises AssertionError above tol.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.data.shape)

    def scalar(arrs):
        ts = [Tensor(a) for a in arrs]
        return float(np.sum(fn(*ts).data * proj))

    ops.sum(ops.mul(out, Tensor(proj))).backward()
    worst = 0.0
    for ti, (t, base) in enumerate(zip(tensors, arrays)):
        assert t.grad is not None, f"input {ti}: no gradient reached it"
        flat_size = base.size
        if flat_size <= max_checks:
            idxs = range(flat_size)
        else:
            idxs = rng.choice(flat_size, size=max_checks, replace=False)
        for flat in idxs:
            idx = np.unravel_index(flat, base.shape)
            hi = [a.copy() for a in arrays]
            lo = [a.copy() for a in arrays]
            hi[ti][idx] += eps
            lo[ti][idx] -= eps
            numeric = (scalar(hi) - scalar(lo)) / (2 * eps)
            analytic = float(t.grad[idx])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
            assert err < tol, (
                f"input {ti} index {idx}: analytic {analytic:.8g} vs "
                f"numeric {numeric:.8g} (rel err {err:.2e} >= {tol})")
    return worst


def conv3d_brute(x, w, stride, pad):
    """Direct nested-loop cross-correlation oracle."""
    n, cin, d, h, w_ = x.shape
    co, ci, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w_ + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co, od, oh, ow), dtype=np.float64)
    for b in range(n):
        for c in range(co):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        patch = xp[b, :, i * sd:i * sd + kd,
                                   j * sh:j * sh + kh, k * sw:k * sw + kw]
                        out[b, c, i, j, k] = np.sum(patch * w[c])
    return out


def transpose_conv3d_brute(x, w, factor):
    """Oracle: scatter each input voxel into a factor^3 output block."""
    n, cin, d, h, w_ = x.shape
    ci, co, fd, fh, fw = w.shape
    assert (fd, fh, fw) == (factor, factor, factor)
    out = np.zeros((n, co, d * factor, h * factor, w_ * factor), dtype=np.float64)
    for b in range(n):
        for i in range(d):
            for j in range(h):
                for k in range(w_):
                    contrib = np.tensordot(x[b, :, i, j, k], w, axes=([0], [0]))
                    out[b, :, i * factor:(i + 1) * factor,
                        j * factor:(j + 1) * factor,
                        k * factor:(k + 1) * factor] += contrib
    return out


def resize_trilinear_brute(x, factor):
    """Separable linear interpolation oracle with half-voxel alignment."""
    out = np.asarray(x, dtype=np.float64)
    for axis in range(2, x.ndim):
        size = out.shape[axis]
        new = size * factor
        src = (np.arange(new) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, size - 1.0)
        lo = np.minimum(np.floor(src).astype(int), max(size - 2, 0))
        t = src - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, np.minimum(lo + 1, size - 1), axis=axis)
        shape = [1] * out.ndim
        shape[axis] = new
        t = t.reshape(shape)
        out = a * (1 - t) + b * t
    return out
