"""Losses, metrics, optimizer, and the train/eval loops.

The objective is a weighted sum of pixel cross-entropy (computed from
logits in log-sum-exp form) and Dice loss on the change-probability
map. Optimization is SGD with momentum, L2 weight decay folded into the
gradient, and polynomial learning-rate decay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, from_op, narrow, reshape, softmax

__all__ = [
    "LossConfig",
    "ConfusionCounts",
    "MetricReport",
    "bce_loss",
    "dice_loss",
    "combined_loss",
    "metrics",
    "metrics_from_counts",
    "poly_lr",
    "sgd_step",
    "SgdOptimizer",
    "augment_pair",
    "box_blur3",
    "train_model",
    "evaluate_model",
    "EPOCH_CSV_HEADER",
]

EPOCH_CSV_HEADER = ("epoch", "lr", "loss", "F1", "Pre", "Rec", "IoU", "OA")


@dataclass
class LossConfig:
    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_dice < 0 or self.lambda_ce + self.lambda_dice <= 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.dice_eps <= 0:
            raise ValueError("dice smoothing must be positive")


def _require_binary(target: np.ndarray) -> np.ndarray:
    t = np.asarray(target)
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target mask must be binary (0/1)")
    return t


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean two-class cross-entropy from [2, H, W] logits.

    Fused, numerically stable log-sum-exp form with the analytic
    gradient (softmax minus one-hot).
    """
    t = _require_binary(target)
    if logits.shape[0] != 2 or logits.shape[1:] != t.shape:
        raise ValueError(f"logits {logits.shape} do not match target {t.shape}")
    z = logits.data
    m = np.max(z, axis=0)
    lse = m + np.log(np.exp(z[0] - m) + np.exp(z[1] - m))
    picked = np.where(t == 1, z[1], z[0])
    n = t.size
    value = float((lse - picked).sum() / n)

    def backward(g):
        p = np.exp(z - lse[None])
        p[0] -= t == 0
        p[1] -= t == 1
        logits._accumulate(g * p / n)

    return from_op(np.asarray(value, dtype=logits.dtype), (logits,), backward, "bce_loss")


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = 1.0) -> Tensor:
    """1 - (2 |P intersect T| + eps) / (|P| + |T| + eps) on a probability map."""
    t = _require_binary(target)
    if probs.shape != t.shape:
        raise ValueError(f"probs {probs.shape} do not match target {t.shape}")
    tt = Tensor(t.astype(probs.dtype))
    inter = (probs * tt).sum()
    denom = probs.sum() + float(t.sum()) + eps
    return 1.0 - (inter * 2.0 + eps) / denom


def combined_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    loss = bce_loss(logits, target) * cfg.lambda_ce
    if cfg.lambda_dice:
        probs = softmax(logits, axis=0)
        h, w = logits.shape[1], logits.shape[2]
        p1 = reshape(narrow(reshape(probs, 2, h * w), 0, 1, 1), h, w)
        loss = loss + dice_loss(p1, target, cfg.dice_eps) * cfg.lambda_dice
    return loss


# -- metrics ------------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @staticmethod
    def from_masks(pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        p = _require_binary(pred).astype(bool)
        g = _require_binary(gt).astype(bool)
        if p.shape != g.shape:
            raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
        return ConfusionCounts(
            tp=int(np.sum(p & g)),
            tn=int(np.sum(~p & ~g)),
            fp=int(np.sum(p & ~g)),
            fn=int(np.sum(~p & g)),
        )


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    degenerate: tuple[str, ...] = ()

    def row(self) -> dict:
        return {"F1": self.f1, "Pre": self.precision, "Rec": self.recall, "IoU": self.iou, "OA": self.oa}


def metrics_from_counts(c: ConfusionCounts) -> MetricReport:
    """Precision, recall, F1, IoU, overall accuracy.

    Zero denominators yield 0 and are reported in ``degenerate`` instead
    of propagating NaN.
    """
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    pre = ratio(c.tp, c.tp + c.fp, "precision")
    rec = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * rec * pre, rec + pre, "f1")
    iou = ratio(c.tp, c.tp + c.fn + c.fp, "iou")
    oa = ratio(c.tp + c.tn, c.total, "oa")
    return MetricReport(pre, rec, f1, iou, oa, tuple(degenerate))


def metrics(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    return metrics_from_counts(ConfusionCounts.from_masks(pred, gt))


# -- optimizer ----------------------------------------------------------------------


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step > total_steps:
        raise ValueError(f"step {step} exceeds total_steps {total_steps}")
    return lr0 * (1.0 - step / total_steps) ** power


def sgd_step(params, velocities, step, total_steps, lr0=0.01, momentum=0.9, weight_decay=5e-4, power=0.9) -> float:
    """One SGD update with momentum and L2 decay; returns the applied lr."""
    lr = poly_lr(step, total_steps, lr0, power)
    for t, v in zip(params, velocities):
        if t.grad is None:
            continue
        g = t.grad
        if weight_decay:
            g = g + weight_decay * t.data
        v *= momentum
        v += g
        t.data -= (lr * v).astype(t.dtype, copy=False)
    return lr


class SgdOptimizer:
    def __init__(self, params: list[Tensor], lr0=0.01, momentum=0.9, weight_decay=5e-4, total_steps=1, power=0.9):
        self.params = params
        self.velocities = [np.zeros_like(p.data) for p in params]
        self.lr0, self.momentum, self.weight_decay = lr0, momentum, weight_decay
        self.total_steps, self.power = total_steps, power
        self.step_count = 0

    def step(self) -> float:
        lr = sgd_step(
            self.params,
            self.velocities,
            self.step_count,
            self.total_steps,
            self.lr0,
            self.momentum,
            self.weight_decay,
            self.power,
        )
        self.step_count += 1
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- augmentation --------------------------------------------------------------------


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter with reflect borders over the trailing two axes."""
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="reflect")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += p[..., di : di + img.shape[-2], dj : dj + img.shape[-1]]
    return out / 9.0


def augment_pair(t1: np.ndarray, t2: np.ndarray, gt: np.ndarray, rng: np.random.Generator):
    """Random flips of the whole triple plus occasional blur of the images."""
    if rng.random() < 0.5:
        t1, t2, gt = t1[..., ::-1], t2[..., ::-1], gt[..., ::-1]
    if rng.random() < 0.5:
        t1, t2, gt = t1[..., ::-1, :], t2[..., ::-1, :], gt[..., ::-1, :]
    if rng.random() < 0.2:
        t1, t2 = box_blur3(t1), box_blur3(t2)
    return np.ascontiguousarray(t1), np.ascontiguousarray(t2), np.ascontiguousarray(gt)


# -- loops --------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    lr: float
    loss: float
    report: MetricReport

    def as_csv(self) -> list[str]:
        return [
            str(self.epoch),
            f"{self.lr:.8f}",
            f"{self.loss:.8f}",
            f"{self.report.f1:.6f}",
            f"{self.report.precision:.6f}",
            f"{self.report.recall:.6f}",
            f"{self.report.iou:.6f}",
            f"{self.report.oa:.6f}",
        ]


def evaluate_model(model, samples) -> MetricReport:
    counts = ConfusionCounts()
    for s in samples:
        pred = model.predict_mask(s.t1, s.t2)
        counts = counts + ConfusionCounts.from_masks(pred, s.gt)
    return metrics_from_counts(counts)


def train_model(
    model,
    train_samples,
    val_samples,
    loss_cfg: LossConfig,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    lr0: float = 0.01,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    augment: bool = True,
    target_f1: float | None = None,
    csv_path=None,
    log=None,
) -> list[EpochRow]:
    """Train in place; returns one row per completed epoch.

    Stops early once the held-out F1 reaches ``target_f1``. All
    randomness (shuffling, augmentation, window-selection noise) flows
    from ``rng``, so a fixed seed reproduces runs bitwise.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(train_samples)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total_steps = epochs * steps_per_epoch
    params = model.parameters()
    opt = SgdOptimizer(params, lr0, momentum, weight_decay, total_steps)
    rows: list[EpochRow] = []
    writer = None
    fh = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(EPOCH_CSV_HEADER)
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            losses = []
            lr_epoch = poly_lr(opt.step_count, total_steps, lr0)
            for b0 in range(0, n, batch_size):
                batch = order[b0 : b0 + batch_size]
                opt.zero_grad()
                for idx in batch:
                    s = train_samples[int(idx)]
                    t1, t2, gt = (s.t1, s.t2, s.gt)
                    if augment:
                        t1, t2, gt = augment_pair(t1, t2, gt, rng)
                    logits = model.forward(t1, t2, rng=rng, training=True)
                    gt_small = _downsample_mask(gt, logits.shape[1], logits.shape[2])
                    loss = combined_loss(logits, gt_small, loss_cfg) * (1.0 / len(batch))
                    loss.backward()
                    losses.append(loss.item() * len(batch))
                opt.step()
            report = evaluate_model(model, val_samples)
            row = EpochRow(epoch, lr_epoch, float(np.mean(losses)), report)
            rows.append(row)
            if writer is not None:
                writer.writerow(row.as_csv())
                fh.flush()
            if log is not None:
                log(
                    f"epoch {epoch}/{epochs} lr {row.lr:.5f} loss {row.loss:.4f} "
                    f"F1 {report.f1:.4f} IoU {report.iou:.4f}"
                )
            if target_f1 is not None and report.f1 >= target_f1:
                break
    finally:
        if fh is not None:
            fh.close()
    return rows


def _downsample_mask(gt: np.ndarray, h: int, w: int) -> np.ndarray:
    """Majority-pool a full-resolution binary mask onto the logit grid."""
    gh, gw = gt.shape
    fh, fw = gh // h, gw // w
    if fh * h != gh or fw * w != gw:
        raise ValueError(f"mask {gt.shape} is not an integer multiple of the logit grid ({h}, {w})")
    if fh == fw == 1:
        return gt
    pooled = gt.reshape(h, fh, w, fw).astype(np.float64).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.uint8)
