"""Training losses: penalty-reduced focal heatmap loss, smooth-L1 box
regression with sin/cos yaw, the auxiliary density-level focal loss, and
their weighted total.

Predicted heatmaps are raw sigmoid outputs; log arguments are clamped
internally so saturated cells still receive a recovery gradient.  Ground
truth lives in [0, 1] with exact 1.0 peaks.  A cell counts as positive
when its ground-truth value exceeds 1 - eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUMERIC_EPS = 1e-7  # sigmoid clamp band applied before any log


@dataclass(frozen=True)
class LossWeights:
    box: float = 0.25
    aux: float = 0.2
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-3
    tau: float = 0.2

    def __post_init__(self):
        for name in ("box", "aux", "alpha", "beta", "eps", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"loss weight {name} must be positive")
        if self.eps >= 1.0:
            raise ValueError("eps must be below 1")


def focal_heatmap_loss_logits(logits: Tensor, gt,
                              weights: LossWeights = LossWeights()):
    """Penalty-reduced focal loss taking raw heatmap logits.

    Same value as ``focal_heatmap_loss(sigmoid(logits), gt)`` but with the
    logs computed in logit space, so a cell saturated to probability 0 or 1
    still gets a usable gradient (the sigmoid derivative vanishes there,
    which can otherwise freeze badly-initialized or overshooting heads).
    """
    gt = np.asarray(gt, dtype=logits.dtype)
    if gt.shape != logits.shape:
        raise ValueError(
            f"heatmap shape mismatch: pred {logits.shape}, gt {gt.shape}")
    pos = gt > 1.0 - weights.eps
    n_pos = max(1, int(pos.sum()))
    neg_w = np.where(pos, 0.0, (1.0 - gt) ** weights.beta)
    pos_w = pos.astype(logits.dtype)
    p = T.sigmoid(logits)
    log_p = T.log_sigmoid(logits)
    log_1mp = T.log_sigmoid(-logits)
    pos_term = T.mul(Tensor(pos_w),
                     T.mul(T.pow(1.0 - p, weights.alpha), log_p))
    neg_term = T.mul(Tensor(neg_w), T.mul(T.pow(p, weights.alpha), log_1mp))
    total = T.sum(T.add(pos_term, neg_term))
    return T.mul(total, Tensor(np.asarray(-1.0 / n_pos, dtype=logits.dtype)))


def focal_heatmap_loss(pred: Tensor, gt, weights: LossWeights = LossWeights()):
    """Penalty-reduced focal loss over the center heatmap.

    Positives (gt > 1 - eps): (1-p)^alpha log p.  Negatives:
    (1-gt)^beta p^alpha log(1-p).  Normalized by the positive count
    (floored at 1) and negated.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"heatmap shape mismatch: pred {pred.shape}, gt {gt.shape}")
    pos = gt > 1.0 - weights.eps
    n_pos = max(1, int(pos.sum()))
    neg_w = np.where(pos, 0.0, (1.0 - gt) ** weights.beta)
    pos_w = pos.astype(pred.dtype)
    one_m_p = 1.0 - pred
    # Clamp only the log arguments: the polynomial focusing factors keep a
    # recovery gradient even when a cell saturates to 0 or 1.
    log_p = T.log(T.clamp(pred, NUMERIC_EPS, 1.0))
    log_1mp = T.log(T.clamp(one_m_p, NUMERIC_EPS, 1.0))
    pos_term = T.mul(Tensor(pos_w), T.mul(T.pow(one_m_p, weights.alpha), log_p))
    neg_term = T.mul(
        Tensor(neg_w), T.mul(T.pow(pred, weights.alpha), log_1mp)
    )
    total = T.sum(T.add(pos_term, neg_term))
    return T.mul(total, Tensor(np.asarray(-1.0 / n_pos, dtype=pred.dtype)))


def box_loss(pred: Tensor, box_targets, valid_mask):
    """Mean over valid cells of the per-cell smooth-L1 sum over channels.

    Returns (loss, has_positives); the loss is exactly 0 when the mask is
    empty.
    """
    tgt = np.asarray(box_targets, dtype=pred.dtype)
    mask = np.asarray(valid_mask, dtype=bool)
    if tgt.shape != pred.shape:
        raise ValueError(f"box-target shape mismatch: pred {pred.shape}, gt {tgt.shape}")
    n = int(mask.sum())
    if n == 0:
        return T.mul(T.sum(pred), Tensor(np.asarray(0.0, dtype=pred.dtype))), False
    # mask broadcasts over the channel axis (mask is ... x H x W).
    m = np.broadcast_to(mask, pred.shape).astype(pred.dtype)
    per_cell = T.mul(Tensor(m), T.smooth_l1(T.add(pred, Tensor(-tgt))))
    loss = T.mul(T.sum(per_cell), Tensor(np.asarray(1.0 / n, dtype=pred.dtype)))
    return loss, True


def density_loss(logits: Tensor, labels, alpha=2.0):
    """Focal classification loss over three density bins.

    ``logits`` are M x 3 rows gathered at ground-truth center cells;
    ``labels`` are density levels in {1, 2, 3}.  Returns (loss,
    has_centers).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return T.mul(T.sum(logits), Tensor(np.asarray(0.0, dtype=logits.dtype))), False
    if logits.shape != (labels.size, 3):
        raise ValueError(
            f"expected logits of shape ({labels.size}, 3), got {logits.shape}"
        )
    if labels.min() < 1 or labels.max() > 3:
        raise ValueError("density labels must lie in {1, 2, 3}")
    # Stable softmax: shifting by the (constant) row max leaves both the
    # value and the gradient unchanged.
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    ez = T.exp(T.add(logits, T.mul(shift, Tensor(np.asarray(-1.0, dtype=logits.dtype)))))
    probs = T.div(ez, T.sum_axis(ez, axis=1, keepdims=True))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels - 1] = 1.0
    p_correct = T.sum_axis(T.mul(probs, Tensor(onehot)), axis=1, keepdims=False)
    p_correct = T.clamp(p_correct, NUMERIC_EPS, 1.0 - NUMERIC_EPS)
    per_center = T.mul(T.pow(1.0 - p_correct, alpha), T.log(p_correct))
    loss = T.mul(
        T.sum(per_center), Tensor(np.asarray(-1.0 / labels.size, dtype=logits.dtype))
    )
    return loss, True


def total_loss(l_hm, l_box, l_aux, weights: LossWeights = LossWeights()):
    """Weighted sum of the components; pass l_aux=None when the density
    head is disabled."""
    for name, comp in (("heatmap", l_hm), ("box", l_box), ("aux", l_aux)):
        if comp is not None and not np.isfinite(comp.data).all():
            raise ValueError(f"non-finite {name} loss component")
    out = T.add(l_hm, T.mul(l_box, Tensor(np.asarray(weights.box, dtype=l_hm.dtype))))
    if l_aux is not None:
        out = T.add(
            out, T.mul(l_aux, Tensor(np.asarray(weights.aux, dtype=l_hm.dtype)))
        )
    return out
