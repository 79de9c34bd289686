"""Two-stage, confidence-partitioned data association."""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import kernels


@dataclass
class Detection:
    """One detector output.  ``box`` is center-size: ``[x, y, w, h]`` or ``[x, y, z, w, h, l]``."""

    box: np.ndarray
    score: float
    class_id: int = 0
    frame: int = 0
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        half = len(self.box) // 2
        if len(self.box) not in (4, 6) or np.any(self.box[half:] <= 0):
            raise ValueError(f"invalid detection box {self.box}")


@dataclass
class AssociationResult:
    matches: List[Tuple[int, int]] = field(default_factory=list)
    unmatched_tracks: List[int] = field(default_factory=list)
    unmatched_detections: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class AssociationConfig:
    tau_high: float = 0.6
    tau_low: float = 0.1
    gate_stage1: float = 0.7
    gate_stage2: float = 0.5
    class_aware: bool = True


def iou_2d(a, b):
    """IoU of two center-size 2D boxes."""
    return float(kernels.iou_matrix_2d(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def iou_3d(a, b):
    """Axis-aligned IoU of two center-size 3D boxes."""
    return float(kernels.iou_matrix_3d(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    width = a.shape[-1] if a.size else (b.shape[-1] if b.size else 4)
    if width == 6:
        return kernels.iou_matrix_3d(a, b)
    return kernels.iou_matrix_2d(a, b)


def solve_assignment(cost, max_cost):
    """Gated minimum-cost matching.

    Leaving a row or a column unmatched costs ``max_cost / 2``, so a pair is
    matched only when that is cheaper than leaving both ends free; every
    returned pair therefore has ``cost <= max_cost``.  With ``max_cost=inf``
    this is the plain rectangular assignment of ``min(n, m)`` pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        cost = cost.reshape(len(cost), -1) if cost.size else np.zeros((len(cost), 0))
    n, m = cost.shape
    if n == 0 or m == 0:
        return AssociationResult([], list(range(n)), list(range(m)))
    if np.isinf(max_cost):
        rows, cols = kernels.linear_sum_assignment(cost)
    else:
        ext = np.zeros((n + m, n + m))
        ext[:n, :m] = np.minimum(cost, max_cost + 1.0)
        ext[:n, m:] = max_cost / 2.0
        ext[n:, :m] = max_cost / 2.0
        r, c = kernels.linear_sum_assignment(ext)
        keep = (r < n) & (c < m)
        rows, cols = r[keep], c[keep]
        ok = cost[rows, cols] <= max_cost
        rows, cols = rows[ok], cols[ok]
    matches = [(int(i), int(j)) for i, j in zip(rows, cols)]
    matched_r = set(int(i) for i in rows)
    matched_c = set(int(j) for j in cols)
    return AssociationResult(
        matches,
        [i for i in range(n) if i not in matched_r],
        [j for j in range(m) if j not in matched_c],
    )


def cost_matrix(track_boxes, track_classes, dets, class_aware=True):
    """``1 - IoU`` between tracks and detections; cross-class pairs cost 1."""
    track_boxes = np.asarray(track_boxes, dtype=np.float64)
    if not dets or len(track_boxes) == 0:
        return np.ones((len(track_boxes), len(dets)))
    det_boxes = np.array([d.box for d in dets])
    cost = 1.0 - iou_matrix(track_boxes, det_boxes)
    if class_aware:
        det_cls = np.array([d.class_id for d in dets])
        cost[np.asarray(track_classes)[:, None] != det_cls[None, :]] = 1.0
    return cost


def two_stage_associate(track_boxes, dets, cfg=AssociationConfig(), track_classes=None):
    """Match predicted track boxes to detections in two confidence stages.

    Stage 1 matches every track against detections with ``score >= tau_high``.
    Stage 2 matches the leftover tracks against ``tau_low <= score < tau_high``.
    Unmatched high-confidence detections become new-track candidates; anything
    below ``tau_low`` is discarded.

    Returns:
        ``(stage1, stage2, new_track_candidates)``.  All indices refer to the
        original ``track_boxes`` / ``dets`` positions.
    """
    if cfg.tau_low > cfg.tau_high:
        raise ValueError("tau_low must not exceed tau_high")
    n_tracks = len(track_boxes)
    if track_classes is None:
        track_classes = [0] * n_tracks
        class_aware = False
    else:
        class_aware = cfg.class_aware
    track_classes = np.asarray(track_classes)
    high = [j for j, d in enumerate(dets) if d.score >= cfg.tau_high]
    low = [j for j, d in enumerate(dets) if cfg.tau_low <= d.score < cfg.tau_high]

    cost1 = cost_matrix(track_boxes, track_classes, [dets[j] for j in high], class_aware)
    r1 = solve_assignment(cost1, cfg.gate_stage1)
    stage1 = AssociationResult(
        [(i, high[j]) for i, j in r1.matches],
        list(r1.unmatched_tracks),
        [high[j] for j in r1.unmatched_detections],
    )

    left = stage1.unmatched_tracks
    sub_boxes = np.asarray(track_boxes, dtype=np.float64)[left] if n_tracks else np.zeros((0, 4))
    cost2 = cost_matrix(sub_boxes, track_classes[left], [dets[j] for j in low], class_aware)
    r2 = solve_assignment(cost2, cfg.gate_stage2)
    stage2 = AssociationResult(
        [(left[i], low[j]) for i, j in r2.matches],
        [left[i] for i in r2.unmatched_tracks],
        [low[j] for j in r2.unmatched_detections],
    )
    return stage1, stage2, list(stage1.unmatched_detections)
