"""Rank-4 tensors with reverse-mode automatic differentiation.

Every value flowing through a network is a ``Tensor`` wrapping a numpy array
of shape (batch, channels, height, width).  Operations record their inputs
and a backward closure on the output node; ``Tensor.backward()`` walks the
recorded graph once in reverse topological order and accumulates gradients
into ``.grad`` arrays.

float32 is the working precision; the same graph runs in float64 when fed
float64 leaves, which is what the finite-difference checks use.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands have shapes the operation cannot accept."""


class UsageError(RuntimeError):
    """The API was called in an invalid order or with invalid arguments."""


def _require_rank4(name, arr):
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected a rank-4 array, got shape {arr.shape}")


class Tensor:
    """A node in the autodiff graph.

    ``data`` is the forward value, ``grad`` the accumulated gradient (same
    shape, allocated on demand).  ``op`` names the operation that produced
    the node, which the NaN diagnostics use to point at the first bad layer.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward",
                 "_backward_done")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf"):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        _require_rank4(op, data)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def topo_order(self):
        """All reachable nodes, parents before children."""
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return order

    def backward(self):
        if self.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar output, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise UsageError("backward() on a graph with no trainable inputs")
        if self._backward_done:
            raise UsageError("backward() called twice on the same graph")
        self._backward_done = True
        order = self.topo_order()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _result(data, parents, op):
    return Tensor(data, parents=parents, op=op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"add: rank mismatch {a.shape} vs {b.shape}")
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = _result(data, (a, b), "add")

    def _backward():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    out._backward = _backward
    return out


def mul(a, b):
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"mul: rank mismatch {a.shape} vs {b.shape}")
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = _result(data, (a, b), "mul")

    def _backward():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _backward
    return out


def scale(x, factor):
    factor = float(factor)
    out = _result(x.data * factor, (x,), "scale")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * factor)

    out._backward = _backward
    return out


def sum_all(x):
    out = _result(x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1), (x,), "sum")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad, x.shape).copy())

    out._backward = _backward
    return out


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.data.size)


def concat_channels(tensors):
    if not tensors:
        raise UsageError("concat_channels: empty input list")
    ref = tensors[0]
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(
                f"concat_channels: incompatible shapes {ref.shape} and {t.shape}"
            )
    data = np.concatenate([t.data for t in tensors], axis=1)
    out = _result(data, tuple(tensors), "concat")

    def _backward():
        offset = 0
        for t in tensors:
            c = t.shape[1]
            if t.requires_grad:
                t.accumulate_grad(out.grad[:, offset:offset + c])
            offset += c

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# activations

def relu(x):
    out = _result(np.maximum(x.data, 0), (x,), "relu")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    out._backward = _backward
    return out


def sigmoid(x):
    # exp of a non-positive argument on both branches keeps this finite
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    out = _result(y, (x,), "sigmoid")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * y * (1.0 - y))

    out._backward = _backward
    return out


def softmax_channels(x):
    d = x.data
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, (x,), "softmax")

    def _backward():
        if x.requires_grad:
            dot = (out.grad * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(y * (out.grad - dot))

    out._backward = _backward
    return out


def dropout(x, p, rng, training):
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    mask = keep / (1.0 - p)
    out = _result(x.data * mask, (x,), "dropout")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * mask)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# convolution and dense

@dataclass
class ConvParams:
    """Weight, bias, and the four convolution hyperparameters."""

    weight: Tensor            # (c_out, c_in/groups, k_h, k_w)
    bias: Tensor              # (1, c_out, 1, 1)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def validate(self, c_in):
        c_out, cig, kh, kw = self.weight.shape
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise UsageError(
                f"conv2d: stride={self.stride}, padding={self.padding}, "
                f"dilation={self.dilation} out of range"
            )
        if c_in % self.groups or c_out % self.groups:
            raise ShapeError(
                f"conv2d: channels ({c_in} in, {c_out} out) not divisible "
                f"by groups={self.groups}"
            )
        if cig != c_in // self.groups:
            raise ShapeError(
                f"conv2d: weight {self.weight.shape} does not match "
                f"{c_in} input channels with groups={self.groups}"
            )
        if self.bias.data.shape != (1, c_out, 1, 1):
            raise ShapeError(
                f"conv2d: bias shape {self.bias.shape} != (1, {c_out}, 1, 1)"
            )


def conv2d(x, p):
    n, c_in, h, w = x.shape
    p.validate(c_in)
    weight, bias = p.weight, p.bias
    c_out, cig, kh, kw = weight.shape
    stride, pad, dilation, groups = p.stride, p.padding, p.dilation, p.groups
    h_out = _kernels.conv_out_size(h, kh, stride, pad, dilation)
    w_out = _kernels.conv_out_size(w, kw, stride, pad, dilation)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: input {h}x{w} too small for kernel {kh}x{kw} "
            f"(stride={stride}, pad={pad}, dilation={dilation})"
        )
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(weight.data)
    bd = np.ascontiguousarray(bias.data.reshape(c_out))
    y = _kernels.conv2d_forward(xd, wd, bd, stride, pad, dilation, groups)
    out = _result(y, (x, weight, bias), "conv2d")

    def _backward():
        gy = np.ascontiguousarray(out.grad)
        if x.requires_grad:
            x.accumulate_grad(_kernels.conv2d_backward_input(
                gy, wd, x.shape, stride, pad, dilation, groups))
        if weight.requires_grad:
            weight.accumulate_grad(_kernels.conv2d_backward_weight(
                gy, xd, weight.shape, stride, pad, dilation, groups))
        if bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))

    out._backward = _backward
    return out


def fully_connected(x, weight, bias):
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"fully_connected: expected (n, c, 1, 1) input, got {x.shape}")
    m, cw = weight.data.shape[:2]
    if weight.data.shape != (m, cw, 1, 1) or cw != c:
        raise ShapeError(
            f"fully_connected: weight {weight.shape} does not match input {x.shape}"
        )
    if bias.data.shape != (1, m, 1, 1):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != (1, {m}, 1, 1)")
    xm = x.data.reshape(n, c)
    wm = weight.data.reshape(m, c)
    y = (xm @ wm.T + bias.data.reshape(m)).reshape(n, m, 1, 1)
    out = _result(y, (x, weight, bias), "fc")

    def _backward():
        gy = out.grad.reshape(n, m)
        if x.requires_grad:
            x.accumulate_grad((gy @ wm).reshape(n, c, 1, 1))
        if weight.requires_grad:
            weight.accumulate_grad((gy.T @ xm).reshape(m, c, 1, 1))
        if bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=0).reshape(1, m, 1, 1))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# normalization

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               eps=1e-5, momentum=0.1):
    n, c, h, w = x.shape
    if gamma.data.shape != (1, c, 1, 1) or beta.data.shape != (1, c, 1, 1):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match {c} channels"
        )
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.data.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = gamma.data * xhat + beta.data
    out = _result(y, (x, gamma, beta), "batch_norm")

    def _backward():
        gy = out.grad
        if gamma.requires_grad:
            gamma.accumulate_grad((gy * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        if beta.requires_grad:
            beta.accumulate_grad(gy.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        if x.requires_grad:
            gxhat = gy * gamma.data
            if training:
                m = n * h * w
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x.accumulate_grad(inv_std / m * (m * gxhat - s1 - xhat * s2))
            else:
                x.accumulate_grad(gxhat * inv_std)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# pooling and resampling

def _pool_prep(x, k, stride, padding, op):
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    h_out = _kernels.conv_out_size(h, k, stride, padding, 1)
    w_out = _kernels.conv_out_size(w, k, stride, padding, 1)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"{op}: input {h}x{w} too small for window {k} "
            f"(stride={stride}, padding={padding})"
        )
    return stride, h_out, w_out


def avg_pool2d(x, k, stride=None, padding=0):
    stride, h_out, w_out = _pool_prep(x, k, stride, padding, "avg_pool2d")
    from ._kernels import pyfallback as _pf
    cols = _pf._im2col(x.data, k, k, stride, padding, 1, h_out, w_out)
    y = cols.mean(axis=(2, 3))
    out = _result(y, (x,), "avg_pool")

    def _backward():
        if x.requires_grad:
            g = out.grad / (k * k)
            gcols = np.broadcast_to(
                g[:, :, None, None], (x.shape[0], x.shape[1], k, k, h_out, w_out))
            x.accumulate_grad(_pf._col2im(gcols, x.shape, stride, padding, 1))

    out._backward = _backward
    return out


def max_pool2d(x, k, stride=None, padding=0):
    stride, h_out, w_out = _pool_prep(x, k, stride, padding, "max_pool2d")
    from ._kernels import pyfallback as _pf
    n, c, h, w = x.shape
    xd = x.data
    if padding:
        fill = np.finfo(xd.dtype).min
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=fill)
    cols = _pf._im2col(xd, k, k, stride, 0, 1, h_out, w_out)
    flat = cols.reshape(n, c, k * k, h_out, w_out)
    # first row-major maximum inside each window receives the gradient
    arg = flat.argmax(axis=2)
    y = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    out = _result(y, (x,), "max_pool")

    def _backward():
        if x.requires_grad:
            ki, kj = np.divmod(arg, k)
            ho = np.arange(h_out)[None, None, :, None]
            wo = np.arange(w_out)[None, None, None, :]
            hi = ho * stride - padding + ki
            wi = wo * stride - padding + kj
            bi = np.arange(n)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            gx = np.zeros_like(x.data)
            np.add.at(gx,
                      (np.broadcast_to(bi, arg.shape),
                       np.broadcast_to(ci, arg.shape), hi, wi),
                      out.grad)
            x.accumulate_grad(gx)

    out._backward = _backward
    return out


def global_avg_pool(x):
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)
    out = _result(y, (x,), "global_avg_pool")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad / (h * w), x.shape).copy())

    out._backward = _backward
    return out


_INTERP_CACHE = {}


def _interp_matrix(in_size, factor, dtype):
    """Row-stochastic (out_size, in_size) matrix for 1-d linear resampling.

    Output sample i reads source coordinate (i + 0.5) / factor - 0.5 (pixel
    centers aligned), clamped to the valid range, and blends its two nearest
    neighbours.
    """
    key = (in_size, factor, np.dtype(dtype).str)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    out_size = in_size * factor
    m = np.zeros((out_size, in_size), dtype=dtype)
    for i in range(out_size):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(np.floor(src))
        frac = src - i0
        i1 = min(i0 + 1, in_size - 1)
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(x, factor):
    if factor < 1 or int(factor) != factor:
        raise UsageError(f"bilinear_upsample: factor must be a positive int, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    n, c, h, w = x.shape
    my = _interp_matrix(h, factor, x.data.dtype)
    mx = _interp_matrix(w, factor, x.data.dtype)
    y = np.matmul(np.matmul(my, x.data), mx.T)
    out = _result(y, (x,), "upsample")

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(np.matmul(np.matmul(my.T, out.grad), mx))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# diagnostics

def first_invalid_node(root):
    """First node in forward order whose value is NaN or infinite, or None."""
    for node in root.topo_order():
        if not np.isfinite(node.data).all():
            return node
    return None
