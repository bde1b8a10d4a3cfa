"""Numpy implementations of the convolution kernels.

Fallback backend used when the compiled extension is not built (or when
forced via SANET_BACKEND=python).  The convolution is lowered to a batched
matrix product over gathered patches; the scatter in the input-gradient
pass exploits the fact that for a fixed kernel tap the target locations
form a disjoint strided grid.
"""

import numpy as np


def conv_out_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(x, kh, kw, stride, pad, dilation, h_out, w_out):
    # (n, c, h, w) -> (n, c, kh, kw, h_out, w_out)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            hi = i * dilation
            wi = j * dilation
            cols[:, :, i, j] = x[:, :, hi:hi + stride * h_out:stride,
                                 wi:wi + stride * w_out:stride]
    return cols


def _col2im(cols, x_shape, stride, pad, dilation):
    n, c, h, w = x_shape
    kh, kw, h_out, w_out = cols.shape[2:]
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            hi = i * dilation
            wi = j * dilation
            gx[:, :, hi:hi + stride * h_out:stride,
               wi:wi + stride * w_out:stride] += cols[:, :, i, j]
    if pad:
        gx = np.ascontiguousarray(gx[:, :, pad:-pad, pad:-pad])
    return gx


def conv2d_forward(x, weight, bias, stride, pad, dilation, groups):
    n, c_in, h, w = x.shape
    c_out, cig, kh, kw = weight.shape
    h_out = conv_out_size(h, kh, stride, pad, dilation)
    w_out = conv_out_size(w, kw, stride, pad, dilation)
    cog = c_out // groups
    cols = _im2col(x, kh, kw, stride, pad, dilation, h_out, w_out)
    cols = cols.reshape(n, groups, cig * kh * kw, h_out * w_out)
    wg = weight.reshape(groups, cog, cig * kh * kw)
    y = np.matmul(wg, cols)  # (n, groups, cog, h_out*w_out)
    y = y.reshape(n, c_out, h_out, w_out)
    y += bias[None, :, None, None]
    return y


def conv2d_backward_input(gy, weight, x_shape, stride, pad, dilation, groups):
    n = x_shape[0]
    c_out, cig, kh, kw = weight.shape
    h_out, w_out = gy.shape[2:]
    cog = c_out // groups
    wg = weight.reshape(groups, cog, cig * kh * kw)
    gyg = gy.reshape(n, groups, cog, h_out * w_out)
    gcols = np.matmul(wg.transpose(0, 2, 1), gyg)
    gcols = gcols.reshape(n, groups * cig, kh, kw, h_out, w_out)
    return _col2im(gcols, x_shape, stride, pad, dilation)


def conv2d_backward_weight(gy, x, w_shape, stride, pad, dilation, groups):
    c_out, cig, kh, kw = w_shape
    n = x.shape[0]
    h_out, w_out = gy.shape[2:]
    cog = c_out // groups
    cols = _im2col(x, kh, kw, stride, pad, dilation, h_out, w_out)
    cols = cols.reshape(n, groups, cig * kh * kw, h_out * w_out)
    gyg = gy.reshape(n, groups, cog, h_out * w_out)
    gw = np.matmul(gyg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape(c_out, cig, kh, kw)
