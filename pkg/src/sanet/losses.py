"""Training losses and evaluation metrics.

The three loss terms are differentiable graph nodes with hand-derived
backward rules (softmax-minus-onehot, sigmoid-minus-target), combined as

    total = mask + alpha * cat + beta * den

Metrics (per-class IoU, mean IoU, pixel accuracy) operate on plain label
arrays and are pure functions.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DataError(ValueError):
    """Targets are inconsistent with the model (labels out of range etc.)."""


class MetricError(RuntimeError):
    """A metric is undefined on the given inputs (no valid pixels)."""


@dataclass
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DataError(
                f"loss weights must be non-negative, got alpha={self.alpha}, "
                f"beta={self.beta}"
            )


@dataclass
class SegTargets:
    labels: np.ndarray            # (n, h, w) integer class ids
    presence: np.ndarray          # (n, c) binary indicators
    ignore_id: int = None

    @classmethod
    def from_labels(cls, labels, classes, ignore_id=None):
        labels = np.asarray(labels)
        presence = np.zeros((labels.shape[0], classes), dtype=np.float32)
        for i in range(labels.shape[0]):
            ids = np.unique(labels[i])
            if ignore_id is not None:
                ids = ids[ids != ignore_id]
            presence[i, ids] = 1.0
        return cls(labels=labels, presence=presence, ignore_id=ignore_id)


def downsample_labels(labels, h_out, w_out):
    """Nearest sampling at cell centers, matching logits at a coarser grid."""
    n, h, w = labels.shape
    if (h, w) == (h_out, w_out):
        return labels
    fh, fw = h // h_out, w // w_out
    if fh * h_out != h or fw * w_out != w:
        raise DataError(
            f"labels {h}x{w} are not an integer multiple of logits {h_out}x{w_out}"
        )
    return labels[:, fh // 2::fh, fw // 2::fw][:, :h_out, :w_out]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _pixel_cross_entropy(logits, targets, op):
    """Mean CE of softmax(logits) against integer labels, ignore-aware."""
    n, c, h, w = logits.shape
    labels = downsample_labels(targets.labels, h, w)
    valid = np.ones(labels.shape, dtype=bool)
    if targets.ignore_id is not None:
        valid = labels != targets.ignore_id
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= c):
        raise DataError(
            f"{op}: labels outside [0, {c}): "
            f"min {checked.min()}, max {checked.max()}"
        )
    count = int(valid.sum())
    if count == 0:
        raise MetricError(f"{op}: no valid pixels")
    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    value = -(picked * valid).sum(dtype=logits.data.dtype) / count
    out = Tensor(np.asarray(value, dtype=logits.data.dtype).reshape(1, 1, 1, 1),
                 parents=(logits,), op=op)

    def _backward():
        if logits.requires_grad:
            g = _softmax(logits.data)
            bi = np.arange(n)[:, None, None]
            hi = np.arange(h)[None, :, None]
            wi = np.arange(w)[None, None, :]
            g[bi, safe, hi, wi] -= 1.0
            g *= valid[:, None, :, :]
            logits.accumulate_grad(g * (out.grad.reshape(()) / count))

    out._backward = _backward
    return out


def loss_mask(y_mask_logits, targets):
    """Mean negative log-softmax probability of the true class per pixel."""
    return _pixel_cross_entropy(y_mask_logits, targets, "loss_mask")


def loss_den(y_den_logits, targets):
    """Same contract as loss_mask, applied to the dense-head logits."""
    return _pixel_cross_entropy(y_den_logits, targets, "loss_den")


def loss_cat(y_cat_logits, targets):
    """Mean binary cross entropy of sigmoid(logits) against presence."""
    n, c, h, w = y_cat_logits.shape
    if (h, w) != (1, 1) or targets.presence.shape != (n, c):
        raise DataError(
            f"loss_cat: logits {y_cat_logits.shape} vs presence "
            f"{targets.presence.shape}"
        )
    x = y_cat_logits.data.reshape(n, c)
    t = targets.presence.astype(x.dtype)
    # max(x,0) - x*t + log1p(exp(-|x|)) is the overflow-free BCE form
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    value = per.mean(dtype=x.dtype)
    out = Tensor(np.asarray(value, dtype=x.dtype).reshape(1, 1, 1, 1),
                 parents=(y_cat_logits,), op="loss_cat")

    def _backward():
        if y_cat_logits.requires_grad:
            e = np.exp(-np.abs(x))
            sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            g = (sig - t) / (n * c)
            y_cat_logits.accumulate_grad(
                (g * out.grad.reshape(())).reshape(n, c, 1, 1))

    out._backward = _backward
    return out


def loss_total(y_mask_logits, y_cat_logits, y_den_logits, targets, weights):
    """mask + alpha * cat + beta * den as one differentiable scalar."""
    mask = loss_mask(y_mask_logits, targets)
    cat = loss_cat(y_cat_logits, targets)
    den = loss_den(y_den_logits, targets)
    total = T.add(mask, T.add(T.scale(cat, weights.alpha),
                              T.scale(den, weights.beta)))
    return total, mask, cat, den


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(pred, target, classes, ignore_id=None):
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise DataError(f"metrics: pred size {pred.shape} != target {target.shape}")
    valid = np.ones(target.shape, dtype=bool)
    if ignore_id is not None:
        valid = target != ignore_id
    pred, target = pred[valid], target[valid]
    if pred.size == 0:
        raise MetricError("metrics: no valid pixels")
    if pred.min() < 0 or pred.max() >= classes or target.min() < 0 \
            or target.max() >= classes:
        raise DataError(f"metrics: labels outside [0, {classes})")
    idx = target.astype(np.int64) * classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=classes * classes).reshape(classes, classes)


def miou(pred, target, classes, ignore_id=None):
    """Per-class IoU (NaN where a class never occurs) and their mean.

    The mean runs over classes present in target or prediction, so absent
    classes neither reward nor punish.
    """
    cm = confusion_matrix(pred, target, classes, ignore_id)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    per_class = np.full(classes, np.nan)
    per_class[present] = tp[present] / denom[present]
    return per_class, float(per_class[present].mean())


def pixel_acc(pred, target, classes, ignore_id=None):
    cm = confusion_matrix(pred, target, classes, ignore_id)
    return float(np.diag(cm).sum() / cm.sum())


def metric_report(per_class, mean_iou, pacc):
    """One `class_id iou` line per class, then miou and pacc, 4 decimals."""
    lines = []
    for j, v in enumerate(per_class):
        lines.append(f"{j} nan" if np.isnan(v) else f"{j} {v:.4f}")
    lines.append(f"miou {mean_iou:.4f}")
    lines.append(f"pacc {pacc:.4f}")
    return "\n".join(lines) + "\n"
