"""Pure-numpy convolution kernels (the fallback backend).

All three routines are dtype-generic: float32 is the production path, while
float64 inputs stay float64, which is what the gradient-check tests use.
Convolutions are lowered to im2col + one BLAS matmul per batch chunk; the
chunking keeps the unfolded patch matrix below a fixed memory budget so wide
fusion layers do not blow up transient memory.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# transient im2col buffer budget, bytes
_CHUNK_BYTES = 256 * 1024 * 1024


def _out_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    return ho, wo


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _batch_chunks(n_batch, cols_bytes_per_sample):
    step = max(1, int(_CHUNK_BYTES // max(1, cols_bytes_per_sample)))
    for lo in range(0, n_batch, step):
        yield lo, min(n_batch, lo + step)


def _im2col(xp, kh, kw, stride, ho, wo):
    """Unfold (B, C, Hp, Wp) into (B, C*kh*kw, ho*wo)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    b, c = xp.shape[:2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlate x (B, Cin, H, W) with w (Cout, Cin, kh, kw)."""
    bs, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ValueError(f"weight expects {cin_w} input channels, got {cin}")
    ho, wo = _out_hw(h, wd, kh, kw, stride, pad)
    xp = _pad(x, pad)
    w2 = w.reshape(cout, cin * kh * kw)
    y = np.empty((bs, cout, ho * wo), dtype=np.result_type(x, w))
    if kh == 1 and kw == 1:
        v = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        np.matmul(w2[None], v.reshape(bs, cin, ho * wo), out=y)
    else:
        per_sample = cin * kh * kw * ho * wo * x.itemsize
        for lo, hi in _batch_chunks(bs, per_sample):
            cols = _im2col(xp[lo:hi], kh, kw, stride, ho, wo)
            np.matmul(w2[None], cols, out=y[lo:hi])
    y = y.reshape(bs, cout, ho, wo)
    if b is not None:
        y += b[:, None, None]
    return y


def conv2d_backward_input(gy, w, stride, pad, in_hw):
    """Gradient of conv2d_forward wrt x; gy is (B, Cout, Ho, Wo)."""
    bs, cout, ho, wo = gy.shape
    _, cin, kh, kw = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * pad, wd + 2 * pad
    dtype = np.result_type(gy, w)
    w2t = w.reshape(cout, cin * kh * kw).T
    gxp = np.zeros((bs, cin, hp, wp), dtype=dtype)
    per_sample = cin * kh * kw * ho * wo * dtype.itemsize
    for lo, hi in _batch_chunks(bs, per_sample):
        gcols = np.matmul(w2t[None], gy[lo:hi].reshape(hi - lo, cout, ho * wo))
        gcols = gcols.reshape(hi - lo, cin, kh, kw, ho, wo)
        for ki in range(kh):
            for kj in range(kw):
                gxp[lo:hi, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                    gcols[:, :, ki, kj]
                )
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight(x, gy, stride, pad, kh, kw):
    """Gradient of conv2d_forward wrt w."""
    bs, cin, h, wd = x.shape
    _, cout, ho, wo = gy.shape
    dtype = np.result_type(x, gy)
    xp = _pad(x, pad)
    gw = np.zeros((cout, cin * kh * kw), dtype=dtype)
    if kh == 1 and kw == 1:
        v = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(bs, cin, ho * wo)
        gy3 = gy.reshape(bs, cout, ho * wo)
        gw += np.matmul(gy3, v.transpose(0, 2, 1)).sum(axis=0)
    else:
        per_sample = cin * kh * kw * ho * wo * x.itemsize
        for lo, hi in _batch_chunks(bs, per_sample):
            cols = _im2col(xp[lo:hi], kh, kw, stride, ho, wo)
            gy3 = gy[lo:hi].reshape(hi - lo, cout, ho * wo)
            gw += np.matmul(gy3, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(cout, cin, kh, kw)
