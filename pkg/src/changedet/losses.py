"""Supervision and distillation losses.

Each loss is a single tape record with a closed-form gradient, so the
backward pass costs one vectorized expression instead of replaying a chain
of primitive ops.  All losses return a (1,1,1,1) scalar tensor and are mean
reductions, making their magnitude independent of batch and image size.

Ground truth enters as a plain integer/float array, never as a tensor, so
no gradient can reach it.  Teacher predictions are likewise taken as raw
arrays (or tensors whose .data is read once): the teacher is frozen and the
distillation gradient flows into the student side only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError

CLAMP_EPS = 1e-7

GT_LOSSES = ("ce", "soft_miou")
DISTILL_LOSSES = ("mae", "mse", "kl", "none")


@dataclass(frozen=True)
class LossWeights:
    """Mixing coefficients: total = alpha1*gt + alpha2*boundary + alpha3*distill."""

    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 1.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"LossWeights.{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossSelection:
    """Which ground-truth term and which distillation term to use."""

    gt_loss: str = "ce"
    distill_loss: str = "mae"

    def __post_init__(self):
        if self.gt_loss not in GT_LOSSES:
            raise ConfigError(f"gt_loss must be one of {GT_LOSSES}, got {self.gt_loss!r}")
        if self.distill_loss not in DISTILL_LOSSES:
            raise ConfigError(f"distill_loss must be one of {DISTILL_LOSSES}, got {self.distill_loss!r}")


def _check_gt(gt: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.shape != (n, 1, h, w):
        raise ShapeError(f"ground truth must be ({n},1,{h},{w}), got {gt.shape}")
    vals = np.unique(gt)
    if not np.isin(vals, (0, 1)).all():
        raise DataError(f"ground truth must be binary, found values {vals[:8]}")
    return gt.astype(np.int64)


def _scalar(x: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(x, dtype=dtype).reshape(1, 1, 1, 1)


def _teacher_data(p_t) -> np.ndarray:
    # Accept a tensor or raw array; either way only the values are used.
    return p_t.data if isinstance(p_t, T.Tensor) else np.asarray(p_t)


def ce_loss(logits: T.Tensor, gt: np.ndarray) -> T.Tensor:
    """Mean over pixels of -log softmax probability of the true class."""
    n, c, h, w = logits.shape
    if c != 2:
        raise ShapeError(f"ce_loss expects 2-class logits, got C={c}")
    y = _check_gt(gt, n, h, w)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    lse = m + np.log(se)
    z_true = np.take_along_axis(z, y, axis=1)
    count = n * h * w
    out = _scalar((lse - z_true).sum() / count, z.dtype)
    probs = e / se

    def backward(gout: np.ndarray):
        if logits.requires_grad:
            onehot = np.zeros_like(z)
            np.put_along_axis(onehot, y, 1.0, axis=1)
            g = float(gout.reshape(())) / count
            T._accum(logits, (probs - onehot) * g)

    return T._emit("ce_loss", out, backward)


def bce_loss(s_hat: T.Tensor, gt: np.ndarray) -> T.Tensor:
    """Mean binary cross-entropy on a single-channel probability map."""
    n, c, h, w = s_hat.shape
    if c != 1:
        raise ShapeError(f"bce_loss expects a single-channel map, got C={c}")
    y = _check_gt(gt, n, h, w).astype(s_hat.dtype)
    p = s_hat.data
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    count = p.size
    out = _scalar(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / count, p.dtype)
    live = (p > CLAMP_EPS) & (p < 1.0 - CLAMP_EPS)  # clamp kills the gradient outside

    def backward(gout: np.ndarray):
        if s_hat.requires_grad:
            g = float(gout.reshape(())) / count
            T._accum(s_hat, np.where(live, (pc - y) / (pc * (1.0 - pc)), 0.0) * g)

    return T._emit("bce_loss", out, backward)


def _check_prob_pair(p_s: T.Tensor, p_t: np.ndarray, op: str) -> np.ndarray:
    if p_t.shape != p_s.shape:
        raise ShapeError(f"{op}: shapes differ, student {p_s.shape} vs teacher {p_t.shape}")
    return p_t.astype(p_s.dtype, copy=False)


def mae_loss(p_s: T.Tensor, p_t) -> T.Tensor:
    """Mean absolute difference between student and (detached) teacher maps."""
    t = _check_prob_pair(p_s, _teacher_data(p_t), "mae_loss")
    d = p_s.data - t
    count = d.size
    out = _scalar(np.abs(d).sum() / count, d.dtype)

    def backward(gout: np.ndarray):
        if p_s.requires_grad:
            g = float(gout.reshape(())) / count
            T._accum(p_s, np.sign(d) * g)

    return T._emit("mae_loss", out, backward)


def mse_loss(p_s: T.Tensor, p_t) -> T.Tensor:
    """Mean squared difference between student and (detached) teacher maps."""
    t = _check_prob_pair(p_s, _teacher_data(p_t), "mse_loss")
    d = p_s.data - t
    count = d.size
    out = _scalar((d * d).sum() / count, d.dtype)

    def backward(gout: np.ndarray):
        if p_s.requires_grad:
            g = float(gout.reshape(())) / count
            T._accum(p_s, 2.0 * d * g)

    return T._emit("mse_loss", out, backward)


def kl_loss(p_s: T.Tensor, p_t) -> T.Tensor:
    """Mean per-pixel KL divergence of the student from the teacher.

    Teacher is the reference distribution: sum_c p_t log(p_t / p_s), both
    operands clamped to [1e-7, 1] before the logs.  Averaged over pixels
    (channel sum stays inside).
    """
    t = _check_prob_pair(p_s, _teacher_data(p_t), "kl_loss")
    n, c, h, w = p_s.shape
    tc = np.clip(t, CLAMP_EPS, 1.0)
    sc = np.clip(p_s.data, CLAMP_EPS, 1.0)
    count = n * h * w
    out = _scalar((tc * (np.log(tc) - np.log(sc))).sum() / count, sc.dtype)
    live = (p_s.data > CLAMP_EPS) & (p_s.data < 1.0)

    def backward(gout: np.ndarray):
        if p_s.requires_grad:
            g = float(gout.reshape(())) / count
            T._accum(p_s, np.where(live, -tc / sc, 0.0) * g)

    return T._emit("kl_loss", out, backward)


def soft_miou_loss(p_s: T.Tensor, gt: np.ndarray, smooth: float = 1.0) -> T.Tensor:
    """One minus the smoothed soft IoU averaged over the two classes.

    Per class: (sum p*y + s) / (sum (p + y - p*y) + s) with all sums over the
    whole batch; s=1 keeps the ratio defined on empty classes.
    """
    n, c, h, w = p_s.shape
    if c != 2:
        raise ShapeError(f"soft_miou_loss expects 2-class probabilities, got C={c}")
    yidx = _check_gt(gt, n, h, w)
    p = p_s.data
    y = np.zeros_like(p)
    np.put_along_axis(y, yidx, 1.0, axis=1)
    inter = (p * y).sum(axis=(0, 2, 3)) + smooth  # per class
    union = (p + y - p * y).sum(axis=(0, 2, 3)) + smooth
    iou = inter / union
    out = _scalar(1.0 - iou.sum() / c, p.dtype)

    def backward(gout: np.ndarray):
        if p_s.requires_grad:
            g = float(gout.reshape(())) / c
            num = inter.reshape(1, c, 1, 1)
            den = union.reshape(1, c, 1, 1)
            diou = (y * den - num * (1.0 - y)) / (den * den)
            T._accum(p_s, -diou * g)

    return T._emit("soft_miou_loss", out, backward)


@dataclass
class LossParts:
    """The three component scalars feeding the weighted total."""

    gt: T.Tensor
    boundary: T.Tensor
    distill: T.Tensor | None = None


def total_loss(parts: LossParts, weights: LossWeights, selection: LossSelection) -> T.Tensor:
    """alpha1*gt + alpha2*boundary + alpha3*distill, distill skipped when absent."""
    out = T.add(T.scale(parts.gt, weights.alpha1), T.scale(parts.boundary, weights.alpha2))
    if selection.distill_loss != "none" and parts.distill is not None:
        out = T.add(out, T.scale(parts.distill, weights.alpha3))
    return out


def compute_losses(
    logits: T.Tensor,
    probs: T.Tensor,
    boundary: T.Tensor,
    gt: np.ndarray,
    teacher_probs,
    weights: LossWeights,
    selection: LossSelection,
) -> tuple[T.Tensor, dict[str, float]]:
    """Assemble the training objective for one batch.

    Returns the total-loss tensor plus a plain-float breakdown for logging.
    teacher_probs may be None, which drops the distillation term regardless
    of the selection.
    """
    if selection.gt_loss == "ce":
        gt_part = ce_loss(logits, gt)
    else:
        gt_part = soft_miou_loss(probs, gt)
    boundary_part = bce_loss(boundary, gt)
    distill_part = None
    if selection.distill_loss != "none" and teacher_probs is not None:
        fn = {"mae": mae_loss, "mse": mse_loss, "kl": kl_loss}[selection.distill_loss]
        distill_part = fn(probs, teacher_probs)
    parts = LossParts(gt=gt_part, boundary=boundary_part, distill=distill_part)
    total = total_loss(parts, weights, selection)
    breakdown = {
        "gt": gt_part.item(),
        "boundary": boundary_part.item(),
        "distill": distill_part.item() if distill_part is not None else 0.0,
        "total": total.item(),
    }
    return total, breakdown
