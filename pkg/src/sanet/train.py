"""Training loop, evaluation, and checkpoint persistence.

All randomness (shuffling, flips, dropout) flows from one generator seeded
by the run seed, so two runs with the same configuration write identical
logs and identical checkpoint bytes.
"""
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .data import load_batch, read_meta, read_tensor, write_tensor
from .losses import LossWeights, confusion_matrix, loss_cat, loss_den, loss_mask
from .model import ModelCfg, SegModel, predict_labels
from .params import ParamStore
from .tensor import first_invalid_node
from . import tensor as T


class TrainAbort(RuntimeError):
    """Training hit a non-finite loss; the message names the first bad layer."""


@dataclass
class TrainCfg:
    epochs: int = 30
    batch_size: int = 8           # desk-scale default; catalog recipes use 16
    base_lr: float = 0.001
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    alpha: float = 0.2
    beta: float = 0.8
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


def poly_lr(base_lr, iteration, max_iter, power=0.9):
    """base_lr * (1 - iteration/max_iter) ** power."""
    if max_iter <= 0:
        raise ConfigError(f"poly_lr: max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(
            f"poly_lr: iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(ckpt_dir, store, model_cfg, epoch, iteration, lr):
    os.makedirs(ckpt_dir, exist_ok=True)
    lines = [
        f"model = {model_cfg.name}",
        f"classes = {model_cfg.classes}",
        f"sa.ratio = {model_cfg.sa_ratio}",
        f"sa.activation = {model_cfg.sa_activation}",
        f"sa.pool = {model_cfg.sa_pool}",
        f"epoch = {epoch}",
        f"iteration = {iteration}",
        f"lr = {lr!r}",
    ]
    for i, (name, arr, _) in enumerate(store.named_arrays()):
        fname = f"{i:04d}.sat"
        write_tensor(os.path.join(ckpt_dir, fname), arr)
        dims = "x".join(str(d) for d in arr.shape)
        lines.append(f"tensor {fname} {name} {arr.dtype.name} {dims}")
    with open(os.path.join(ckpt_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(ckpt_dir):
    """Rebuild (store, model, scalars) from a checkpoint directory."""
    path = os.path.join(ckpt_dir, "manifest.txt")
    scalars = {}
    tensors = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("tensor "):
                _, fname, name, _dtype, _dims = line.split(" ")
                tensors.append((fname, name))
            else:
                key, value = (part.strip() for part in line.split("=", 1))
                scalars[key] = value
    cfg = ModelCfg.from_name(
        scalars["model"],
        classes=int(scalars["classes"]),
        sa_ratio=int(scalars["sa.ratio"]),
        sa_activation=scalars["sa.activation"],
        sa_pool=scalars["sa.pool"],
    )
    store = ParamStore(seed=0)
    model = SegModel(store, cfg)
    named = {name: read_tensor(os.path.join(ckpt_dir, fname))
             for fname, name in tensors}
    store.load_arrays(named)
    meta = {
        "epoch": int(scalars["epoch"]),
        "iteration": int(scalars["iteration"]),
        "lr": float(scalars["lr"]),
    }
    return store, model, meta


# ---------------------------------------------------------------------------
# evaluation

def eval_confusion(model, data_dir, classes, batch_size=8, limit=None):
    meta = read_meta(data_dir)
    count = meta["count"] if limit is None else min(limit, meta["count"])
    cm = np.zeros((classes, classes), dtype=np.int64)
    for start in range(0, count, batch_size):
        idx = range(start, min(start + batch_size, count))
        batch = load_batch(data_dir, idx, classes)
        outputs = model.forward(batch.images, training=False)
        pred = predict_labels(outputs)
        cm += confusion_matrix(pred, batch.targets.labels, classes)
    return cm


def metrics_from_confusion(cm):
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    per_class = np.full(cm.shape[0], np.nan)
    per_class[present] = tp[present] / denom[present]
    mean_iou = float(per_class[present].mean())
    pacc = float(tp.sum() / cm.sum())
    return per_class, mean_iou, pacc


def evaluate(ckpt_dir, data_dir, batch_size=8):
    """(per_class_iou, miou, pacc) of a checkpoint over a dataset directory."""
    store, model, _ = load_checkpoint(ckpt_dir)
    meta = read_meta(data_dir)
    if meta["classes"] != model.cfg.classes:
        raise ConfigError(
            f"dataset has {meta['classes']} classes but checkpoint was trained "
            f"with {model.cfg.classes}")
    cm = eval_confusion(model, data_dir, model.cfg.classes, batch_size)
    return metrics_from_confusion(cm)


# ---------------------------------------------------------------------------
# training

def _loss_for(model, outputs, targets, weights):
    """(total, mask, cat, den) with zeros where a family lacks a head."""
    den = loss_den(outputs.y_den, targets)
    if outputs.y_mask is None:
        return den, None, None, den
    mask = loss_mask(outputs.y_mask, targets)
    cat = loss_cat(outputs.y_cat, targets)
    total = T.add(mask, T.add(T.scale(cat, weights.alpha),
                              T.scale(den, weights.beta)))
    return total, mask, cat, den


def train(model_name, data_dir, out_dir, tc, classes=None, sa_ratio=None,
          sa_activation="sigmoid", sa_pool="avg", eval_limit=None):
    """Run the full loop; returns (log_text, final_dir, best_dir)."""
    meta = read_meta(data_dir)
    if classes is None:
        classes = meta["classes"]
    if classes != meta["classes"]:
        raise ConfigError(
            f"model.classes = {classes} but dataset has {meta['classes']}")
    cfg = ModelCfg.from_name(model_name, classes=classes, sa_ratio=sa_ratio,
                             sa_activation=sa_activation, sa_pool=sa_pool)
    store = ParamStore(seed=tc.seed)
    model = SegModel(store, cfg)
    weights = LossWeights(alpha=tc.alpha, beta=tc.beta)
    rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 1)))

    count = meta["count"]
    batches_per_epoch = math.ceil(count / tc.batch_size)
    max_iter = tc.epochs * batches_per_epoch
    iteration = 0
    lr = tc.base_lr
    best_miou = float("-inf")
    final_dir = os.path.join(out_dir, "final")
    best_dir = os.path.join(out_dir, "best")
    log_lines = []
    last_eval = (float("nan"), float("nan"))

    for epoch in range(1, tc.epochs + 1):
        perm = rng.permutation(count)
        sums = np.zeros(4)
        for start in range(0, count, tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            flips = rng.random(len(idx)) < 0.5
            batch = load_batch(data_dir, idx, classes, flips)
            outputs = model.forward(batch.images, training=True, rng=rng)
            total, mask, cat, den = _loss_for(model, outputs, batch.targets,
                                              weights)
            value = total.item()
            if not math.isfinite(value):
                bad = first_invalid_node(total)
                raise TrainAbort(
                    f"non-finite loss at epoch {epoch}, iteration {iteration}; "
                    f"first invalid value produced by {bad.op!r}")
            lr = poly_lr(tc.base_lr, iteration, max_iter, tc.lr_power)
            store.zero_grads()
            total.backward()
            store.sgd_step(lr, tc.momentum, tc.weight_decay)
            iteration += 1
            sums += (mask.item() if mask is not None else 0.0,
                     cat.item() if cat is not None else 0.0,
                     den.item(), value)
        mask_avg, cat_avg, den_avg, total_avg = sums / batches_per_epoch

        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            cm = eval_confusion(model, data_dir, classes, tc.batch_size,
                                limit=eval_limit)
            _, mean_iou, pacc = metrics_from_confusion(cm)
            last_eval = (mean_iou, pacc)
            if mean_iou > best_miou:
                best_miou = mean_iou
                save_checkpoint(best_dir, store, cfg, epoch, iteration, lr)
        log_lines.append(
            f"{epoch} {mask_avg:.6f} {cat_avg:.6f} {den_avg:.6f} "
            f"{total_avg:.6f} {last_eval[0]:.6f} {last_eval[1]:.6f}")

    save_checkpoint(final_dir, store, cfg, tc.epochs, iteration, lr)
    log_text = "\n".join(log_lines) + "\n"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "log.txt"), "w", encoding="utf-8") as f:
        f.write(log_text)
    return log_text, final_dir, best_dir
