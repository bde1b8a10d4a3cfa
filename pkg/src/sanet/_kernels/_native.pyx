# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Direct-loop grouped/dilated cross-correlation.  All addressing is done with
raw base pointers and precomputed strides (memoryview indexing in the hot
loops costs more than the arithmetic itself), and stride-1 convolutions take
a fast path whose innermost loops are the vectorizable row primitives in
rowops.h.  Padding is handled by clamping the output-column range per kernel
tap instead of testing bounds per element.
"""

import numpy as np

cdef extern from "rowops.h" nogil:
    void srow_axpy(float *o, const float *x, float a, Py_ssize_t n)
    void drow_axpy(double *o, const double *x, double a, Py_ssize_t n)
    float srow_dot(const float *a, const float *b, Py_ssize_t n)
    double drow_dot(const double *a, const double *b, Py_ssize_t n)


ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _wo_lo(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest wo with wo*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _wo_hi(Py_ssize_t off, Py_ssize_t stride,
                              Py_ssize_t w, Py_ssize_t w_out) nogil:
    # one past the largest wo with wo*stride + off <= w-1
    cdef Py_ssize_t hi
    if w - 1 - off < 0:
        return 0
    hi = (w - 1 - off) // stride + 1
    if hi > w_out:
        hi = w_out
    return hi


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] weight,
                   floating[::1] bias, int stride, int pad, int dilation,
                   int groups):
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t c_out = weight.shape[0], cig = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t h_out = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t w_out = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    cdef Py_ssize_t cog = c_out // groups

    if floating is float:
        out_arr = np.empty((n, c_out, h_out, w_out), dtype=np.float32)
    else:
        out_arr = np.empty((n, c_out, h_out, w_out), dtype=np.float64)
    cdef floating[:, :, :, ::1] out = out_arr

    cdef floating *xbase = &x[0, 0, 0, 0]
    cdef floating *wbase = &weight[0, 0, 0, 0]
    cdef floating *bbase = &bias[0]
    cdef floating *obase = &out[0, 0, 0, 0]
    cdef floating *xplane
    cdef floating *oplane
    cdef floating *wrow
    cdef floating *orow
    cdef floating *xrow

    cdef Py_ssize_t b, g, col, co, ci, ci_abs, ho, wo, ki, kj, hi, off, lo, hi_x
    cdef Py_ssize_t i, span
    cdef floating wv, bv
    with nogil:
        for b in range(n):
            for g in range(groups):
                for col in range(cog):
                    co = g * cog + col
                    bv = bbase[co]
                    oplane = obase + (b * c_out + co) * h_out * w_out
                    for i in range(h_out * w_out):
                        oplane[i] = bv
                    for ci in range(cig):
                        ci_abs = g * cig + ci
                        xplane = xbase + (b * c_in + ci_abs) * h * w
                        for ki in range(kh):
                            wrow = wbase + ((co * cig + ci) * kh + ki) * kw
                            for ho in range(h_out):
                                hi = ho * stride - pad + ki * dilation
                                if hi < 0 or hi >= h:
                                    continue
                                orow = oplane + ho * w_out
                                xrow = xplane + hi * w
                                for kj in range(kw):
                                    wv = wrow[kj]
                                    off = kj * dilation - pad
                                    lo = _wo_lo(off, stride)
                                    hi_x = _wo_hi(off, stride, w, w_out)
                                    span = hi_x - lo
                                    if span <= 0:
                                        continue
                                    if stride == 1:
                                        if floating is float:
                                            srow_axpy(orow + lo, xrow + lo + off,
                                                      wv, span)
                                        else:
                                            drow_axpy(orow + lo, xrow + lo + off,
                                                      wv, span)
                                    else:
                                        for wo in range(lo, hi_x):
                                            orow[wo] = orow[wo] + \
                                                wv * xrow[wo * stride + off]
    return out_arr


def conv2d_backward_input(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] weight,
                          x_shape, int stride, int pad, int dilation, int groups):
    cdef Py_ssize_t n = x_shape[0], c_in = x_shape[1]
    cdef Py_ssize_t h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t c_out = weight.shape[0], cig = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t h_out = gy.shape[2], w_out = gy.shape[3]
    cdef Py_ssize_t cog = c_out // groups

    if floating is float:
        gx_arr = np.zeros((n, c_in, h, w), dtype=np.float32)
    else:
        gx_arr = np.zeros((n, c_in, h, w), dtype=np.float64)
    cdef floating[:, :, :, ::1] gx = gx_arr

    cdef floating *gybase = &gy[0, 0, 0, 0]
    cdef floating *wbase = &weight[0, 0, 0, 0]
    cdef floating *gxbase = &gx[0, 0, 0, 0]
    cdef floating *gyplane
    cdef floating *gxplane
    cdef floating *wrow
    cdef floating *gyrow
    cdef floating *gxrow

    cdef Py_ssize_t b, g, col, co, ci, ci_abs, ho, wo, ki, kj, hi, off, lo, hi_x
    cdef Py_ssize_t span
    cdef floating wv
    with nogil:
        for b in range(n):
            for g in range(groups):
                for col in range(cog):
                    co = g * cog + col
                    gyplane = gybase + (b * c_out + co) * h_out * w_out
                    for ci in range(cig):
                        ci_abs = g * cig + ci
                        gxplane = gxbase + (b * c_in + ci_abs) * h * w
                        for ki in range(kh):
                            wrow = wbase + ((co * cig + ci) * kh + ki) * kw
                            for ho in range(h_out):
                                hi = ho * stride - pad + ki * dilation
                                if hi < 0 or hi >= h:
                                    continue
                                gyrow = gyplane + ho * w_out
                                gxrow = gxplane + hi * w
                                for kj in range(kw):
                                    wv = wrow[kj]
                                    off = kj * dilation - pad
                                    lo = _wo_lo(off, stride)
                                    hi_x = _wo_hi(off, stride, w, w_out)
                                    span = hi_x - lo
                                    if span <= 0:
                                        continue
                                    if stride == 1:
                                        if floating is float:
                                            srow_axpy(gxrow + lo + off,
                                                      gyrow + lo, wv, span)
                                        else:
                                            drow_axpy(gxrow + lo + off,
                                                      gyrow + lo, wv, span)
                                    else:
                                        for wo in range(lo, hi_x):
                                            gxrow[wo * stride + off] = \
                                                gxrow[wo * stride + off] + \
                                                wv * gyrow[wo]
    return gx_arr


def conv2d_backward_weight(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x,
                           w_shape, int stride, int pad, int dilation, int groups):
    cdef Py_ssize_t c_out = w_shape[0], cig = w_shape[1]
    cdef Py_ssize_t kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t h_out = gy.shape[2], w_out = gy.shape[3]
    cdef Py_ssize_t cog = c_out // groups

    if floating is float:
        gw_arr = np.zeros((c_out, cig, kh, kw), dtype=np.float32)
    else:
        gw_arr = np.zeros((c_out, cig, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] gw = gw_arr

    cdef floating *gybase = &gy[0, 0, 0, 0]
    cdef floating *xbase = &x[0, 0, 0, 0]
    cdef floating *gwbase = &gw[0, 0, 0, 0]
    cdef floating *gyplane
    cdef floating *xplane
    cdef floating *gwrow
    cdef floating *gyrow
    cdef floating *xrow

    cdef Py_ssize_t b, g, col, co, ci, ci_abs, ho, wo, ki, kj, hi, off, lo, hi_x
    cdef Py_ssize_t span
    cdef floating acc
    with nogil:
        for b in range(n):
            for g in range(groups):
                for col in range(cog):
                    co = g * cog + col
                    gyplane = gybase + (b * c_out + co) * h_out * w_out
                    for ci in range(cig):
                        ci_abs = g * cig + ci
                        xplane = xbase + (b * c_in + ci_abs) * h * w
                        for ki in range(kh):
                            gwrow = gwbase + ((co * cig + ci) * kh + ki) * kw
                            for kj in range(kw):
                                off = kj * dilation - pad
                                lo = _wo_lo(off, stride)
                                hi_x = _wo_hi(off, stride, w, w_out)
                                span = hi_x - lo
                                if span <= 0:
                                    continue
                                acc = 0
                                for ho in range(h_out):
                                    hi = ho * stride - pad + ki * dilation
                                    if hi < 0 or hi >= h:
                                        continue
                                    gyrow = gyplane + ho * w_out
                                    xrow = xplane + hi * w
                                    if stride == 1:
                                        if floating is float:
                                            acc = acc + srow_dot(
                                                gyrow + lo, xrow + lo + off, span)
                                        else:
                                            acc = acc + drow_dot(
                                                gyrow + lo, xrow + lo + off, span)
                                    else:
                                        for wo in range(lo, hi_x):
                                            acc = acc + gyrow[wo] * \
                                                xrow[wo * stride + off]
                                gwrow[kj] = gwrow[kj] + acc
    return gw_arr
