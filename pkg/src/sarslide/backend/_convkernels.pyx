# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled float32 convolution kernels.

Direct (no im2col) loops, ordered so the innermost loop runs over the
contiguous width dimension and compiles to vectorized multiply-adds.
Padding and bias are handled by the numpy wrappers in backend/__init__.py;
these routines see pre-padded inputs and raw accumulation buffers.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv_fwd_f32(const float[:, :, :, ::1] xp,
                 const float[:, :, :, ::1] w,
                 float[:, :, :, ::1] y,
                 int stride):
    cdef Py_ssize_t bs = y.shape[0], cout = y.shape[1], ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t b, co, ci, ki, kj, i, j
    cdef float wv
    cdef const float *xrow
    cdef float *yrow
    for b in range(bs):
        for co in range(cout):
            for ci in range(cin):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[co, ci, ki, kj]
                        for i in range(ho):
                            xrow = &xp[b, ci, i * stride + ki, kj]
                            yrow = &y[b, co, i, 0]
                            if stride == 1:
                                for j in range(wo):
                                    yrow[j] += wv * xrow[j]
                            else:
                                for j in range(wo):
                                    yrow[j] += wv * xrow[j * stride]


def conv_bwd_input_f32(const float[:, :, :, ::1] gy,
                       const float[:, :, :, ::1] w,
                       float[:, :, :, ::1] gxp,
                       int stride):
    cdef Py_ssize_t bs = gy.shape[0], cout = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t b, co, ci, ki, kj, i, j
    cdef float wv
    cdef const float *gyrow
    cdef float *gxrow
    for b in range(bs):
        for ci in range(cin):
            for co in range(cout):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[co, ci, ki, kj]
                        for i in range(ho):
                            gyrow = &gy[b, co, i, 0]
                            gxrow = &gxp[b, ci, i * stride + ki, kj]
                            if stride == 1:
                                for j in range(wo):
                                    gxrow[j] += wv * gyrow[j]
                            else:
                                for j in range(wo):
                                    gxrow[j * stride] += wv * gyrow[j]


def conv_bwd_weight_f32(const float[:, :, :, ::1] xp,
                        const float[:, :, :, ::1] gy,
                        float[:, :, :, ::1] gw,
                        int stride):
    cdef Py_ssize_t bs = gy.shape[0], cout = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t cin = gw.shape[1], kh = gw.shape[2], kw = gw.shape[3]
    cdef Py_ssize_t b, co, ci, ki, kj, i, j
    cdef double total
    cdef const float *gyrow
    cdef const float *xrow
    # row-sized scratch keeps the inner loop elementwise (vectorizable); the
    # final reduction over the scratch row is the only serial sum
    acc_arr = np.empty(wo, dtype=np.float32)
    cdef float[::1] acc = acc_arr
    for co in range(cout):
        for ci in range(cin):
            for ki in range(kh):
                for kj in range(kw):
                    for j in range(wo):
                        acc[j] = 0.0
                    for b in range(bs):
                        for i in range(ho):
                            gyrow = &gy[b, co, i, 0]
                            xrow = &xp[b, ci, i * stride + ki, kj]
                            if stride == 1:
                                for j in range(wo):
                                    acc[j] += gyrow[j] * xrow[j]
                            else:
                                for j in range(wo):
                                    acc[j] += gyrow[j] * xrow[j * stride]
                    total = 0.0
                    for j in range(wo):
                        total += acc[j]
                    gw[co, ci, ki, kj] = <float> total
