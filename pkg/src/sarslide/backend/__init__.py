"""Convolution kernel backend, selected once at import.

Two implementations share one contract:

* ``compiled`` — Cython kernels (float32 only), built at install time.
* ``reference`` — pure numpy (im2col + BLAS), any float dtype.

The compiled backend is preferred when present, but only where it measures
faster: direct loops beat im2col+BLAS for narrow layers, while BLAS wins once
the channel product grows (see benchmarks/bench_kernels.py, which produced
the dispatch rule below).  Weight gradients always use BLAS, and 1x1
convolutions always go through the reference path, where they reduce to a
single matmul.  Selection can be forced with the ``SARSLIDE_BACKEND``
environment variable (``auto``, ``compiled`` or ``reference``);
``ACTIVE_BACKEND`` records the outcome for provenance.
"""

from __future__ import annotations

import os

import numpy as np

from . import reference

_ext = None
_choice = os.environ.get("SARSLIDE_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "reference"):
    raise RuntimeError(f"SARSLIDE_BACKEND must be auto|compiled|reference, got {_choice!r}")

if _choice in ("auto", "compiled"):
    try:
        from . import _convkernels as _ext
    except ImportError:
        if _choice == "compiled":
            raise RuntimeError("SARSLIDE_BACKEND=compiled but the extension is not built")
        _ext = None

ACTIVE_BACKEND = "compiled" if _ext is not None else "reference"


# Measured crossover: direct loops win below ~128 cin*cout, BLAS above.
# Forcing SARSLIDE_BACKEND=compiled skips the heuristic (parity testing).
_COMPILED_CHANNEL_LIMIT = 128


def _use_compiled(*arrays, kh, cin, cout):
    if _ext is None or kh == 1:
        return False
    if _choice != "compiled" and cin * cout >= _COMPILED_CHANNEL_LIMIT:
        return False
    return all(a is None or a.dtype == np.float32 for a in arrays)


def conv2d_forward(x, w, b=None, stride=1, pad=0):
    """y[b,co] = sum_ci x[b,ci] * w[co,ci] (cross-correlation) + bias."""
    kh, kw = w.shape[2], w.shape[3]
    if not _use_compiled(x, w, kh=kh, cin=w.shape[1], cout=w.shape[0]):
        return reference.conv2d_forward(x, w, b, stride, pad)
    bs, cin, h, wd = x.shape
    ho, wo = reference._out_hw(h, wd, kh, kw, stride, pad)
    xp = np.ascontiguousarray(reference._pad(x, pad))
    y = np.zeros((bs, w.shape[0], ho, wo), dtype=np.float32)
    _ext.conv_fwd_f32(xp, np.ascontiguousarray(w), y, stride)
    if b is not None:
        y += b[:, None, None]
    return y


def conv2d_backward_input(gy, w, stride=1, pad=0, in_hw=None):
    """Gradient wrt the conv input, shape (B, Cin, *in_hw)."""
    kh, kw = w.shape[2], w.shape[3]
    if not _use_compiled(gy, w, kh=kh, cin=w.shape[1], cout=w.shape[0]):
        return reference.conv2d_backward_input(gy, w, stride, pad, in_hw)
    h, wd = in_hw
    bs = gy.shape[0]
    gxp = np.zeros((bs, w.shape[1], h + 2 * pad, wd + 2 * pad), dtype=np.float32)
    _ext.conv_bwd_input_f32(np.ascontiguousarray(gy), np.ascontiguousarray(w), gxp, stride)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight(x, gy, stride=1, pad=0, kh=3, kw=3):
    """Gradient wrt the conv weight, shape (Cout, Cin, kh, kw).

    BLAS wins this reduction at every size measured, so ``auto`` never routes
    it to the compiled loop; forcing SARSLIDE_BACKEND=compiled still exercises
    the Cython kernel for parity testing.
    """
    if _choice != "compiled" or not _use_compiled(
        x, gy, kh=kh, cin=x.shape[1], cout=gy.shape[1]
    ):
        return reference.conv2d_backward_weight(x, gy, stride, pad, kh, kw)
    xp = np.ascontiguousarray(reference._pad(x, pad))
    gw = np.zeros((gy.shape[1], x.shape[1], kh, kw), dtype=np.float32)
    _ext.conv_bwd_weight_f32(xp, np.ascontiguousarray(gy), gw, stride)
    return gw
