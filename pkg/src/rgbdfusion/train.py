"""Training recipe, loss, and segmentation metrics.

Cross-entropy over valid pixels, AdamW with decoupled weight decay, a poly
learning-rate schedule with linear warmup, and confusion-matrix based
mIoU / pixel-accuracy evaluation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import IGNORE_INDEX, Sample
from .network import model_forward

__all__ = [
    "poly_lr",
    "AdamW",
    "cross_entropy",
    "MetricAccumulator",
    "evaluate",
    "predict_labels",
    "train_loop",
    "TrainingDiverged",
    "TraceRow",
]

POLY_POWER = 0.9


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(it, max_iter, base_lr, warmup_iters):
    """Linear 0 -> base_lr warmup, then polynomial decay to 0 at max_iter.

    The decay term is shifted so the schedule is continuous and equals
    base_lr at the warmup boundary.
    """
    if warmup_iters >= max_iter:
        raise ValueError("warmup_iters must be < max_iter")
    if it < 0:
        raise ValueError("iteration must be non-negative")
    if it > max_iter:
        warnings.warn(f"poly_lr: iteration {it} past max_iter {max_iter}, clamping to 0")
        return 0.0
    if warmup_iters > 0 and it < warmup_iters:
        return base_lr * it / warmup_iters
    frac = (it - warmup_iters) / (max_iter - warmup_iters)
    return base_lr * (1.0 - frac) ** POLY_POWER


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0


class AdamW:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01, base_lr=5e-5):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.base_lr = base_lr
        self.state = OptimState()
        for name, t in self.named_params:
            self.state.m[name] = np.zeros_like(t.data)
            self.state.v[name] = np.zeros_like(t.data)

    def zero_grad(self):
        for _, t in self.named_params:
            t.zero_grad()

    def step(self, lr=None):
        lr = self.base_lr if lr is None else lr
        self.state.step_count += 1
        tstep = self.state.step_count
        bc1 = 1.0 - self.beta1 ** tstep
        bc2 = 1.0 - self.beta2 ** tstep
        for name, p in self.named_params:
            if p.grad is None:
                raise ValueError(f"adamw_step: parameter {name!r} has no gradient")
            g = p.grad
            p.data *= 1.0 - lr * self.weight_decay
            m = self.state.m[name]
            v = self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cross_entropy(logits, labels, ignore=IGNORE_INDEX):
    """Mean negative log-likelihood over non-ignored pixels.

    logits: Tensor (K,H,W); labels: integer (H,W) array.
    """
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    lab = np.where(valid, labels, 0).astype(np.intp)
    if lab.max() >= k:
        raise ValueError("label id out of range")

    x = logits.data
    shifted = x - x.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - lse                                   # (K,H,W)
    picked = np.take_along_axis(logp, lab[None], axis=0)[0]
    value = -(picked * valid).sum() / n_valid

    softmax = np.exp(logp)

    def backward_fn(g):
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, lab[None], 1.0, axis=0)
        grad = (softmax - onehot) * valid[None] / n_valid
        return (g * grad,)

    out = Tensor(np.float64(value).reshape(()))
    if logits.requires_grad or logits._parents:
        out._parents = (logits,)
        out._backward_fn = backward_fn
    return out


class MetricAccumulator:
    """Confusion-matrix accumulator over (prediction, label) grids."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, preds, labels, ignore=IGNORE_INDEX):
        preds = np.asarray(preds).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        if preds.shape != labels.shape:
            raise ValueError("prediction and label grids must be aligned")
        valid = labels != ignore
        idx = labels[valid].astype(np.int64) * self.num_classes + preds[valid].astype(np.int64)
        counts = np.bincount(idx, minlength=self.num_classes ** 2)
        self.confusion += counts.reshape(self.num_classes, self.num_classes)

    def merge(self, other):
        self.confusion += other.confusion

    def pixel_accuracy(self):
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def miou(self):
        """Mean IoU over classes present in the ground truth."""
        diag = np.diag(self.confusion).astype(np.float64)
        gt = self.confusion.sum(axis=1).astype(np.float64)
        pred = self.confusion.sum(axis=0).astype(np.float64)
        present = gt > 0
        if not present.any():
            return 0.0
        union = gt + pred - diag
        iou = np.where(union > 0, diag / np.maximum(union, 1), 0.0)
        return float(iou[present].mean())


def evaluate(preds, labels, acc=None, num_classes=None, ignore=IGNORE_INDEX):
    """Score one grid (or accumulate into ``acc``); returns (mIoU, pixel_acc)."""
    if acc is None:
        if num_classes is None:
            num_classes = int(np.asarray(labels)[np.asarray(labels) != ignore].max()) + 1
        acc = MetricAccumulator(num_classes)
    acc.update(preds, labels, ignore=ignore)
    return acc.miou(), acc.pixel_accuracy()


def predict_labels(logits):
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return arr.argmax(axis=0).astype(np.uint8)


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    epoch: int


def train_loop(model, samples, epochs, batch_size, seed, base_lr=5e-5,
               weight_decay=0.01, warmup_frac=0.1, augment=None,
               depth_zeroed=False, eval_samples=None, on_epoch=None,
               max_steps=None):
    """Deterministic mini-batch training; returns (trace rows, epoch metrics).

    ``augment`` is an AugmentPolicy or None; ``depth_zeroed`` feeds zeros to
    the depth branch (single-modality control). Gradients are averaged over
    the batch; a non-finite loss aborts with TrainingDiverged.
    """
    from .data import augment_sample  # local to avoid cycle at import time

    if not samples:
        raise ValueError("training corpus is empty")
    params = model.parameters()
    opt = AdamW(params, weight_decay=weight_decay, base_lr=base_lr)
    order_rng = np.random.default_rng([int(seed), 0x7124])

    steps_per_epoch = max(1, len(samples) // batch_size)
    total_steps = epochs * steps_per_epoch if max_steps is None else max_steps
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if warmup >= total_steps:
        warmup = max(0, total_steps - 1)

    trace = []
    epoch_metrics = []
    step = 0
    done = False
    for epoch in range(epochs):
        idx = order_rng.permutation(len(samples))
        for b in range(steps_per_epoch):
            batch = [samples[i] for i in idx[b * batch_size:(b + 1) * batch_size]]
            if not batch:
                continue
            opt.zero_grad()
            loss_total = 0.0
            for j, s in enumerate(batch):
                if augment is not None:
                    s = augment_sample(s, int(order_rng.integers(2 ** 48)), augment)
                depth = np.zeros_like(s.depth) if depth_zeroed else s.depth
                logits = model_forward(Tensor(s.rgb), Tensor(depth), model)
                loss = cross_entropy(logits, s.labels) / len(batch)
                loss.backward()
                loss_total += loss.item() * len(batch)
            loss_mean = loss_total / len(batch)
            if not np.isfinite(loss_mean):
                raise TrainingDiverged(
                    f"non-finite loss {loss_mean} at step {step} (epoch {epoch})")
            lr = poly_lr(step, max(total_steps, 1), base_lr, warmup)
            opt.step(lr)
            trace.append(TraceRow(step=step, lr=lr, loss=loss_mean, epoch=epoch))
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        if eval_samples:
            acc = MetricAccumulator(model.cfg.num_classes)
            for s in eval_samples:
                depth = np.zeros_like(s.depth) if depth_zeroed else s.depth
                logits = model_forward(Tensor(s.rgb), Tensor(depth), model)
                acc.update(predict_labels(logits), s.labels)
            epoch_metrics.append({"epoch": epoch, "miou": acc.miou(),
                                  "pixel_acc": acc.pixel_accuracy()})
        if on_epoch is not None:
            on_epoch(epoch, trace, epoch_metrics)
        if done:
            break
    return trace, epoch_metrics
