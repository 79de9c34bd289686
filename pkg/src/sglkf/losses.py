"""Trajectory (TCL), semantic (SCL) and position (PCL) consistency losses.

Every function accepts plain numpy arrays or :class:`~sglkf.autodiff.Var`
inputs; with ``Var`` inputs the computation is recorded for reverse mode.
"""
from dataclasses import dataclass
import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeMismatchError

_EPS = 1e-12


@dataclass
class LossWeights:
    lam: float = 1.0  # position vs. semantic balance inside TCL
    gamma: float = 0.9  # decay over frame distance
    alpha: float = 1.0  # SCL weight
    beta: float = 1.0  # PCL weight
    rho: float = 0.5  # aggregate update rate
    trainable: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


@dataclass
class TrajectoryBatch:
    """Per-object, per-frame quantities for one batch of trajectories.

    Shapes use N objects and T frames.  ``valid[i, t]`` marks frames where
    object i has a posterior and a ground-truth box; valid frames of one object
    are contiguous.
    """

    centers: object  # (N, T, c) normalized predicted centers
    embeddings: object  # (N, T, d) embeddings of predicted boxes
    pred_boxes: object  # (N, T, 4|6)
    gt_boxes: np.ndarray  # (N, T, 4|6)
    gt_embeddings: np.ndarray  # (N, T, d)
    valid: np.ndarray  # (N, T) bool


def inverse_softplus(y):
    return y + math.log(-math.expm1(-y)) if y < 30 else y


def temporal_aggregate(values, rho, valid=None):
    """Causal exponential aggregate along the time axis (axis -2).

    ``agg[t] = rho * values[t] + (1 - rho) * agg[t-1]`` with ``agg`` restarted
    at the first valid frame of each row.

    Args:
        values: (..., T, D) array or Var.
        rho: update rate in (0, 1].
        valid: optional (..., T) mask; defaults to all frames valid.
    """
    vals = ad.value(values)
    T = vals.shape[-2]
    if T == 0:
        raise ValueError("temporal_aggregate needs a nonempty sequence")
    if valid is None:
        valid = np.ones(vals.shape[:-1], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    started = np.zeros(vals.shape[:-2], dtype=bool)
    aggs = []
    prev = None
    for t in range(T):
        cur = values[..., t, :]
        if prev is None:
            agg = cur
        else:
            blended = rho * cur + (1.0 - rho) * prev
            agg = ad.where(started[..., None], blended, cur)
        started = started | valid[..., t]
        aggs.append(agg)
        prev = agg
    return ad.stack(aggs, axis=-2)


def _decay_matrix(T, gamma):
    t = np.arange(T)
    lag = t[:, None] - t[None, :]
    return np.where(lag > 0, gamma ** np.maximum(lag, 0).astype(float), 0.0)


def tcl(centers, embeddings, weights, valid=None, center_scale=1.0):
    """Trajectory consistency loss.

    ``(1/N) sum_i sum_{t>=2} sum_{k<t} gamma^(t-k) (|f_t - F_k|^2 + lam |c_t - C_k|^2)``
    where ``F_k``, ``C_k`` are temporal aggregates up to frame k.

    Args:
        centers: (N, T, c) predicted centers.
        embeddings: (N, T, d) embeddings.
        weights: :class:`LossWeights`.
        valid: (N, T) mask; trajectories with fewer than two valid frames
            contribute nothing but still count in N.
        center_scale: centers are divided by this before use.
    """
    cv, ev = ad.value(centers), ad.value(embeddings)
    if cv.ndim != 3 or ev.ndim != 3 or cv.shape[:2] != ev.shape[:2]:
        raise ShapeMismatchError(f"centers {cv.shape} and embeddings {ev.shape} disagree")
    N, T = cv.shape[:2]
    if valid is None:
        valid = np.ones((N, T), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    n_traj = int(valid.any(axis=1).sum())
    if n_traj == 0 or T < 2:
        return ad.mul(ad.vsum(centers), 0.0) if isinstance(centers, ad.Var) else 0.0
    c = centers * (1.0 / center_scale) if center_scale != 1.0 else centers
    W = _decay_matrix(T, weights.gamma)[None] * (valid[:, :, None] & valid[:, None, :])
    total = 0.0
    for cur, lam in ((embeddings, 1.0), (c, weights.lam)):
        agg = temporal_aggregate(cur, weights.rho, valid)
        cur_b = ad.reshape(cur, (N, T, 1, -1))
        agg_b = ad.reshape(agg, (N, 1, T, -1))
        d2 = ad.vsum(ad.square(cur_b - agg_b), axis=-1)
        total = total + lam * ad.vsum(d2 * W)
    return total * (1.0 / n_traj)


def scl(pred_embeddings, gt_embeddings, mask=None):
    """Mean ``1 - cos(pred, gt)`` over matched pairs (last axis is the vector)."""
    pv = ad.value(pred_embeddings)
    gv = np.asarray(gt_embeddings, dtype=np.float64)
    if pv.shape != gv.shape:
        raise ShapeMismatchError(f"embedding shapes {pv.shape} and {gv.shape} differ")
    if mask is None:
        mask = np.ones(pv.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    pn = np.linalg.norm(pv, axis=-1)
    gn = np.linalg.norm(gv, axis=-1)
    if np.any((pn[mask] == 0) | (gn[mask] == 0)):
        raise NumericError("zero-norm embedding in semantic consistency loss")
    count = int(mask.sum())
    if count == 0:
        return 0.0
    safe_g = np.where(mask[..., None], gv, 1.0)
    g_unit = safe_g / np.linalg.norm(safe_g, axis=-1, keepdims=True)
    pred = ad.where(mask[..., None], pred_embeddings, 1.0)
    p_norm = ad.sqrt(ad.vsum(ad.square(pred), axis=-1))
    cos = ad.vsum(pred * g_unit, axis=-1) / p_norm
    return ad.vsum((1.0 - cos) * mask) * (1.0 / count)


def ciou(pred, gt):
    """Per-pair Complete-IoU loss for center-size boxes.

    2D boxes ``[x, y, w, h]``: ``1 - IoU + d^2/c^2 + a*v`` with
    ``v = 4/pi^2 (atan(wg/hg) - atan(w/h))^2`` and ``a = v / ((1 - IoU) + v)``.
    3D boxes ``[x, y, z, w, h, l]`` use the same overlap and distance terms
    without the aspect penalty.
    """
    pv = ad.value(pred)
    gt = np.asarray(gt, dtype=np.float64)
    k = pv.shape[-1] // 2
    pc, ps = pred[..., :k], pred[..., k:]
    gc, gs = gt[..., :k], gt[..., k:]
    p_lo, p_hi = pc - 0.5 * ps, pc + 0.5 * ps
    g_lo, g_hi = gc - 0.5 * gs, gc + 0.5 * gs
    side = ad.maximum(ad.minimum(p_hi, g_hi) - ad.maximum(p_lo, g_lo), 0.0)
    enclose = ad.maximum(p_hi, g_hi) - ad.minimum(p_lo, g_lo)
    inter = side[..., 0]
    vol_p = ps[..., 0]
    vol_g = gs[..., 0]
    for i in range(1, k):
        inter = inter * side[..., i]
        vol_p = vol_p * ps[..., i]
        vol_g = vol_g * gs[..., i]
    iou = inter / (vol_p + vol_g - inter)
    dist2 = ad.vsum(ad.square(pc - gc), axis=-1)
    diag2 = ad.vsum(ad.square(enclose), axis=-1)
    loss = 1.0 - iou + dist2 / diag2
    if k == 2:
        v = (4.0 / math.pi**2) * ad.square(np.arctan(gs[..., 0] / gs[..., 1]) - ad.arctan(ps[..., 0] / ps[..., 1]))
        a = v / ((1.0 - iou) + v + _EPS)
        loss = loss + a * v
    return loss


def ciou_loss(pred_box, gt_box):
    """CIoU loss of a single box pair (or the mean over leading axes)."""
    values = ciou(pred_box, gt_box)
    n = int(np.size(ad.value(values)))
    return ad.vsum(values) * (1.0 / n)


def pcl(pred_boxes, gt_boxes, mask):
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0
    gt = np.where(mask[..., None], gt_boxes, ad.value(pred_boxes))
    gt = np.where(np.isfinite(gt), gt, 1.0)
    values = ciou(pred_boxes, gt)
    return ad.vsum(values * mask) * (1.0 / count)


def total_loss(batch: TrajectoryBatch, weights: LossWeights, center_scale=1.0,
               alpha: Optional[object] = None, beta: Optional[object] = None):
    """``TCL + alpha * SCL + beta * PCL`` and its breakdown.

    ``alpha``/``beta`` override the weights' values (pass a Var to
    differentiate through them).

    Returns:
        ``(total, breakdown)`` where the ``*_term`` entries sum to ``total``.
    """
    a = weights.alpha if alpha is None else alpha
    b = weights.beta if beta is None else beta
    l_tcl = tcl(batch.centers, batch.embeddings, weights, batch.valid, center_scale)
    l_scl = scl(batch.embeddings, batch.gt_embeddings, batch.valid)
    l_pcl = pcl(batch.pred_boxes, batch.gt_boxes, batch.valid)
    scl_term = a * l_scl
    pcl_term = b * l_pcl
    total = l_tcl + scl_term + pcl_term
    breakdown = {
        "tcl": l_tcl,
        "scl": l_scl,
        "pcl": l_pcl,
        "tcl_term": l_tcl,
        "scl_term": scl_term,
        "pcl_term": pcl_term,
    }
    return total, breakdown
