"""Dice loss, overlap metrics, and multi-view test-time ensembling."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, EngineError
from . import ops

DICE_SMOOTH = 1e-5


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Encode an integer label array as per-class indicator maps.

    The class axis is inserted in front of the batch axis if the input is
    batched (N, D, H, W) -> (N, C, D, H, W); an unbatched (D, H, W) map
    becomes (C, D, H, W).
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels out of range [0, {num_classes}): "
            f"found [{labels.min()}, {labels.max()}]")
    eye = np.eye(num_classes, dtype=dtype)
    oh = eye[labels.astype(np.intp)]  # (..., C)
    if labels.ndim == 4:  # batched: move class axis after batch
        return np.ascontiguousarray(np.moveaxis(oh, -1, 1))
    return np.ascontiguousarray(np.moveaxis(oh, -1, 0))


class LossValue:
    """A differentiable scalar loss plus its per-class breakdown."""

    def __init__(self, loss: Tensor, per_class: dict):
        self.loss = loss
        self.per_class = per_class

    def __float__(self):
        return float(self.loss.data)

    def __repr__(self):
        terms = ", ".join(f"c{c}={v:.4f}" for c, v in self.per_class.items())
        return f"LossValue({float(self):.4f}; {terms})"


def dice_loss(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> LossValue:
    """Soft Dice loss over foreground classes.

    pred: (N, C, D, H, W) channel-normalized scores (Tensor).
    target: same-shape soft or one-hot array (ndarray or Tensor; treated as
    constant). Per class c >= 1 the term is
        1 - (2 * sum(p_c * t_c) + eps) / (sum(p_c) + sum(t_c) + eps)
    with sums over the spatial axes per sample, then the mean is taken over
    the batch and the foreground classes.
    """
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tdata.shape:
        raise EngineError(
            f"dice_loss shape mismatch: pred {pred.data.shape} vs target {tdata.shape}")
    if pred.ndim != 5:
        raise EngineError(f"dice_loss expects (N,C,D,H,W), got {pred.data.shape}")
    n, c = pred.data.shape[:2]
    if c < 2:
        raise EngineError("dice_loss needs >= 2 classes (background + foreground)")
    csums = pred.data.sum(axis=1)
    if not np.allclose(csums, 1.0, atol=1e-3):
        raise EngineError("dice_loss pred is not channel-normalized (class sums != 1)")
    tconst = tdata.astype(pred.data.dtype, copy=False)

    spatial = (2, 3, 4)
    inter = ops.sum(ops.mul(pred, Tensor(tconst)), axis=spatial)   # (N, C)
    psum = ops.sum(pred, axis=spatial)                             # (N, C)
    tsum = tconst.sum(axis=spatial)                                # (N, C) const
    num = ops.add_scalar(ops.mul_scalar(inter, 2.0), smooth)
    den = ops.add_scalar(ops.add(psum, Tensor(tsum)), smooth)
    per_nc = ops.sub(ops.add_scalar(ops.mul_scalar(num, 0.0), 1.0),
                     ops.div(num, den))                            # 1 - num/den
    fg = ops.channel_slice(per_nc, 1, c)                           # (N, C-1)
    loss = ops.mean(fg)
    breakdown = {cls: float(per_nc.data[:, cls].mean()) for cls in range(1, c)}
    return LossValue(loss, breakdown)


def dsc(pred_hard: np.ndarray, target_hard: np.ndarray, class_id: int) -> float:
    """Dice-Sorensen coefficient 2|P&T| / (|P|+|T|) for one class.

    Both masks empty counts as perfect agreement (1.0).
    """
    pred_hard = np.asarray(pred_hard)
    target_hard = np.asarray(target_hard)
    if pred_hard.shape != target_hard.shape:
        raise ValueError(
            f"dsc shape mismatch: {pred_hard.shape} vs {target_hard.shape}")
    p = pred_hard == class_id
    t = target_hard == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def mean_foreground_dsc(pred_hard, target_hard, num_classes: int) -> float:
    """Average dsc over classes 1..num_classes-1."""
    vals = [dsc(pred_hard, target_hard, c) for c in range(1, num_classes)]
    return float(np.mean(vals))


def ensemble(predictions, mode: str = "mean") -> np.ndarray:
    """Fuse per-view score maps (each (C, D, H, W), canonical frame) into
    hard labels.

    mean: average the score maps, then argmax. majority: argmax each view,
    then vote per voxel; ties resolve toward the lower class id.
    """
    preds = [np.asarray(p) for p in predictions]
    if len(preds) < 2:
        raise ValueError("ensemble needs >= 2 views")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ValueError("ensemble predictions must share a shape")
    if mode == "mean":
        acc = np.zeros(shape, dtype=np.float64)
        for p in preds:
            acc += p
        return np.argmax(acc, axis=0).astype(np.int16)
    if mode == "majority":
        c = shape[0]
        votes = np.zeros(shape, dtype=np.int32)
        for p in preds:
            hard = np.argmax(p, axis=0)
            votes += one_hot(hard, c, dtype=np.int32)
        # np.argmax returns the first (lowest) index on ties
        return np.argmax(votes, axis=0).astype(np.int16)
    raise ValueError(f"unknown ensemble mode {mode!r} (expected mean|majority)")
