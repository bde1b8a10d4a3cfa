"""Naive nested-loop reference implementations.

Everything here trades speed for obviousness: plain Python loops, one
arithmetic step per innermost line, no vectorization, no shared code with
the library under test.  Inputs small enough for these to finish instantly.
"""
import math

import numpy as np


def conv2d(x, weight, bias, stride, pad, dilation, groups):
    n, c_in, h, w = x.shape
    c_out, cig, kh, kw = weight.shape
    h_out = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    w_out = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    cog = c_out // groups
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            g = co // cog
            for ho in range(h_out):
                for wo in range(w_out):
                    acc = float(bias[co])
                    for ci in range(cig):
                        for ki in range(kh):
                            for kj in range(kw):
                                hi = ho * stride - pad + ki * dilation
                                wi = wo * stride - pad + kj * dilation
                                if 0 <= hi < h and 0 <= wi < w:
                                    acc += float(weight[co, ci, ki, kj]) * \
                                        float(x[b, g * cig + ci, hi, wi])
                    out[b, co, ho, wo] = acc
    return out


def avg_pool2d(x, k, stride):
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    out = np.zeros((n, c, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for ci in range(c):
            for ho in range(h_out):
                for wo in range(w_out):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            acc += float(x[b, ci, ho * stride + ki,
                                           wo * stride + kj])
                    out[b, ci, ho, wo] = acc / (k * k)
    return out


def max_pool2d(x, k, stride):
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    out = np.zeros((n, c, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for ci in range(c):
            for ho in range(h_out):
                for wo in range(w_out):
                    best = -math.inf
                    for ki in range(k):
                        for kj in range(k):
                            v = float(x[b, ci, ho * stride + ki,
                                        wo * stride + kj])
                            if v > best:
                                best = v
                    out[b, ci, ho, wo] = best
    return out


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1), dtype=np.float64)
    for b in range(n):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += float(x[b, ci, i, j])
            out[b, ci, 0, 0] = acc / (h * w)
    return out


def bilinear_upsample(x, factor):
    """Half-pixel-aligned sampling evaluated independently per output pixel."""
    n, c, h, w = x.shape
    h_out, w_out = h * factor, w * factor
    out = np.zeros((n, c, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for ci in range(c):
            for i in range(h_out):
                sy = min(max((i + 0.5) / factor - 0.5, 0.0), h - 1.0)
                y0 = int(math.floor(sy))
                y1 = min(y0 + 1, h - 1)
                fy = sy - y0
                for j in range(w_out):
                    sx = min(max((j + 0.5) / factor - 0.5, 0.0), w - 1.0)
                    x0 = int(math.floor(sx))
                    x1 = min(x0 + 1, w - 1)
                    fx = sx - x0
                    top = (1 - fx) * float(x[b, ci, y0, x0]) + \
                        fx * float(x[b, ci, y0, x1])
                    bot = (1 - fx) * float(x[b, ci, y1, x0]) + \
                        fx * float(x[b, ci, y1, x1])
                    out[b, ci, i, j] = (1 - fy) * top + fy * bot
    return out


def fully_connected(x, weight, bias):
    n, c = x.shape
    m = weight.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for b in range(n):
        for o in range(m):
            acc = float(bias[o])
            for ci in range(c):
                acc += float(weight[o, ci]) * float(x[b, ci])
            out[b, o] = acc
    return out


def softmax(values):
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    s = sum(exps)
    return [e / s for e in exps]


def cross_entropy_mean(logits, labels):
    """Mean per-pixel negative log softmax probability of the true class."""
    n, c, h, w = logits.shape
    total = 0.0
    count = 0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                probs = softmax([float(logits[b, ci, i, j]) for ci in range(c)])
                total += -math.log(probs[int(labels[b, i, j])])
                count += 1
    return total / count


def bce_with_logits_mean(logits, targets):
    n, c = logits.shape
    total = 0.0
    for b in range(n):
        for ci in range(c):
            p = 1.0 / (1.0 + math.exp(-float(logits[b, ci])))
            t = float(targets[b, ci])
            total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / (n * c)


def argmax_labels(probs):
    n, c, h, w = probs.shape
    out = np.zeros((n, h, w), dtype=np.int64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                best, best_c = -math.inf, 0
                for ci in range(c):
                    v = float(probs[b, ci, i, j])
                    if v > best:
                        best, best_c = v, ci
                out[b, i, j] = best_c
    return out
