"""Finite-difference verification of every backward rule.

Each case owns 64-bit leaf tensors and a forward closure that rebuilds its
graph from the leaves' current values.  The checker compares the recorded
backward gradients against central differences ((f(x+h) - f(x-h)) / 2h,
h = 1e-5) at randomly probed elements and reports the worst relative error
|a - n| / max(|a| + |n|, floor), with the floor set by the gradient scale
of the case so probes of structurally-zero directions compare noise to
noise instead of failing.
"""
import numpy as np

from . import tensor as T
from .blocks import (ResidualBlock, ResidualBlockCfg, SABlock, SABlockCfg,
                     SEBlock, SEBlockCfg)
from .losses import LossWeights, SegTargets, loss_total
from .params import ParamStore
from .tensor import ConvParams, Tensor


class CheckCase:
    def __init__(self, name, leaves, forward):
        self.name = name
        self.leaves = leaves          # Tensors probed and differentiated
        self.forward = forward        # () -> scalar Tensor from current leaves


def check_case(case, rng, probes=20, h=1e-5):
    """Max relative error between backward and central finite differences."""
    out = case.forward()
    for leaf in case.leaves:
        leaf.grad = None
    out.backward()
    grads = [leaf.grad.copy() if leaf.grad is not None
             else np.zeros_like(leaf.data) for leaf in case.leaves]

    # Structurally-zero directions (e.g. a conv bias whose shift the next
    # normalization cancels) leave both sides at finite-difference noise;
    # the denominator floor is tied to the graph's gradient scale so that
    # noise is not scored as disagreement.
    gscale = max(max((float(np.abs(g).max()) for g in grads), default=0.0), 1.0)
    floor = 1e-5 * gscale

    worst = 0.0
    for _ in range(probes):
        li = int(rng.integers(len(case.leaves)))
        leaf = case.leaves[li]
        ei = int(rng.integers(leaf.data.size))
        orig = leaf.data.reshape(-1)[ei]
        leaf.data.reshape(-1)[ei] = orig + h
        plus = case.forward().item()
        leaf.data.reshape(-1)[ei] = orig - h
        minus = case.forward().item()
        leaf.data.reshape(-1)[ei] = orig
        numeric = (plus - minus) / (2.0 * h)
        analytic = grads[li].reshape(-1)[ei]
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
        worst = max(worst, err)
    return worst


def _leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted_sum(out, weight_arr):
    # a fixed random projection catches errors a plain sum would cancel out
    return T.sum_all(T.mul(out, Tensor(weight_arr)))


def build_suite(seed):
    """Named gradient-check cases covering ops, blocks, and the loss."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    cases = []

    def op_case(name, leaves, fn, out_shape):
        w = rng.normal(size=out_shape)
        cases.append(CheckCase(name, leaves, lambda: _weighted_sum(fn(), w)))

    x = _leaf(rng, (2, 4, 8, 8))
    cw = _leaf(rng, (6, 2, 3, 3))
    cb = _leaf(rng, (1, 6, 1, 1))
    conv = ConvParams(cw, cb, stride=2, padding=2, dilation=2, groups=2)
    op_case("conv2d", [x, cw, cb], lambda: T.conv2d(x, conv), (2, 6, 4, 4))

    xp = _leaf(rng, (2, 3, 8, 8))
    op_case("avg_pool2d", [xp], lambda: T.avg_pool2d(xp, 2, 2), (2, 3, 4, 4))
    op_case("max_pool2d", [xp], lambda: T.max_pool2d(xp, 3, 2, padding=1),
            (2, 3, 4, 4))
    op_case("global_avg_pool", [xp], lambda: T.global_avg_pool(xp), (2, 3, 1, 1))
    op_case("bilinear_upsample", [xp], lambda: T.bilinear_upsample(xp, 2),
            (2, 3, 16, 16))

    xf = _leaf(rng, (3, 5, 1, 1))
    fw = _leaf(rng, (4, 5, 1, 1))
    fb = _leaf(rng, (1, 4, 1, 1))
    op_case("fully_connected", [xf, fw, fb],
            lambda: T.fully_connected(xf, fw, fb), (3, 4, 1, 1))

    xa = _leaf(rng, (2, 4, 5, 5))
    op_case("relu", [xa], lambda: T.relu(xa), (2, 4, 5, 5))
    op_case("sigmoid", [xa], lambda: T.sigmoid(xa), (2, 4, 5, 5))
    op_case("softmax_channel", [xa], lambda: T.softmax_channels(xa), (2, 4, 5, 5))

    gamma = Tensor(np.ones((1, 4, 1, 1)) + 0.1 * rng.normal(size=(1, 4, 1, 1)),
                   requires_grad=True)
    beta = _leaf(rng, (1, 4, 1, 1))
    rmean = np.zeros(4)
    rvar = np.ones(4)
    op_case("batch_norm_train", [xa, gamma, beta],
            lambda: T.batch_norm(xa, gamma, beta, rmean, rvar, True),
            (2, 4, 5, 5))
    op_case("batch_norm_eval", [xa, gamma, beta],
            lambda: T.batch_norm(xa, gamma, beta, rmean, rvar, False),
            (2, 4, 5, 5))

    ya = _leaf(rng, (2, 4, 5, 5))
    yb = _leaf(rng, (2, 4, 1, 1))
    op_case("add", [ya, yb], lambda: T.add(ya, yb), (2, 4, 5, 5))
    op_case("mul_broadcast", [ya, yb], lambda: T.mul(yb, ya), (2, 4, 5, 5))

    yc = _leaf(rng, (2, 3, 5, 5))
    op_case("concat_channels", [ya, yc],
            lambda: T.concat_channels([ya, yc]), (2, 7, 5, 5))

    xd = _leaf(rng, (2, 4, 6, 6))
    op_case("dropout", [xd],
            lambda: T.dropout(xd, 0.3, np.random.default_rng(5), True),
            (2, 4, 6, 6))

    # blocks run in training mode so the batch-statistics path is exercised
    def block_case(name, store, block, c_in, c_out, hw):
        bx = _leaf(rng, (2, c_in, hw, hw))
        leaves = [bx] + store.trainable_tensors()
        w = rng.normal(size=(2, c_out, hw, hw))

        def run():
            out = block.forward(bx, True)
            if isinstance(out, tuple):
                out = out[0]
            return _weighted_sum(out, w)

        cases.append(CheckCase(name, leaves, run))

    store = ParamStore(seed=seed + 1, dtype=np.float64)
    res = ResidualBlock(store, "res", ResidualBlockCfg(4, 4, 4))
    block_case("residual_block", store, res, 4, 4, 6)

    store = ParamStore(seed=seed + 2, dtype=np.float64)
    se = SEBlock(store, "se", SEBlockCfg(c_in=4, c_mid=2))
    block_case("se_module", store, se, 4, 4, 6)

    store = ParamStore(seed=seed + 3, dtype=np.float64)
    sa = SABlock(store, "sa", SABlockCfg(c_in=8, ratio=2))
    block_case("sa_module", store, sa, 8, 8, 8)

    # three logit heads into the combined objective
    labels = rng.integers(0, 3, size=(2, 4, 4))
    targets = SegTargets.from_labels(labels, 3)
    lm = _leaf(rng, (2, 3, 4, 4))
    lc = _leaf(rng, (2, 3, 1, 1))
    ld = _leaf(rng, (2, 3, 4, 4))
    cases.append(CheckCase(
        "loss_total", [lm, lc, ld],
        lambda: loss_total(lm, lc, ld, targets, LossWeights())[0]))

    return cases


def run_suite(seed, probes=20, h=1e-5):
    """[(name, max_rel_err)] for every case, probed with a per-case rng."""
    results = []
    for i, case in enumerate(build_suite(seed)):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        results.append((case.name, check_case(case, rng, probes=probes, h=h)))
    return results
