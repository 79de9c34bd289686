"""Tracking evaluation: HOTA family, CLEAR-MOT subset and speed buckets."""
from dataclasses import asdict, dataclass, field
import csv
import io as _io
import json
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import kernels
from .association import iou_matrix

ALPHAS = np.arange(0.05, 0.99, 0.05)
CLEAR_THRESHOLD = 0.5
_EPS = np.finfo(float).eps

BUCKETS_2D = (0.0, 20.0, 40.0, 60.0)
BUCKETS_3D = (0.0, 15.0, 25.0, 35.0)


def _as_boxes(boxes, n):
    boxes = np.asarray(boxes, dtype=np.float64)
    if n == 0:
        return boxes.reshape(0, boxes.shape[-1] if boxes.ndim == 2 else 4)
    return boxes.reshape(n, -1)


@dataclass
class EvalFrame:
    frame: int
    gt_ids: np.ndarray
    gt_boxes: np.ndarray
    pred_ids: np.ndarray
    pred_boxes: np.ndarray
    speed: float = 0.0

    def __post_init__(self):
        self.gt_ids = np.asarray(self.gt_ids, dtype=np.int64).reshape(-1)
        self.pred_ids = np.asarray(self.pred_ids, dtype=np.int64).reshape(-1)
        self.gt_boxes = _as_boxes(self.gt_boxes, len(self.gt_ids))
        self.pred_boxes = _as_boxes(self.pred_boxes, len(self.pred_ids))
        if len(set(self.gt_ids.tolist())) != len(self.gt_ids) or len(set(self.pred_ids.tolist())) != len(self.pred_ids):
            raise ValueError(f"duplicate track id in frame {self.frame}")

    def similarity(self):
        if len(self.gt_ids) == 0 or len(self.pred_ids) == 0:
            return np.zeros((len(self.gt_ids), len(self.pred_ids)))
        return iou_matrix(self.gt_boxes, self.pred_boxes)


@dataclass
class EvalReport:
    HOTA: float = 0.0
    DetA: float = 0.0
    AssA: float = 0.0
    DetRe: float = 0.0
    DetPr: float = 0.0
    AssRe: float = 0.0
    AssPr: float = 0.0
    LocA: float = 0.0
    MOTA: float = 0.0
    MOTP: float = 0.0
    IDSW: int = 0
    CLR_TP: int = 0
    CLR_FN: int = 0
    CLR_FP: int = 0
    n_gt: int = 0
    n_pred: int = 0
    vacuous: bool = False
    per_alpha: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        keys = ["HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA", "MOTA", "MOTP", "IDSW"]
        head = " ".join(f"{k:>8}" for k in keys)
        vals = " ".join(f"{getattr(self, k):>8d}" if k == "IDSW" else f"{getattr(self, k):>8.3f}" for k in keys)
        return head + "\n" + vals + "\n"


def _maximize(score):
    if score.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return kernels.linear_sum_assignment(-score)


def _id_index(frames):
    gt_u = sorted({int(i) for f in frames for i in f.gt_ids})
    pr_u = sorted({int(i) for f in frames for i in f.pred_ids})
    return {g: k for k, g in enumerate(gt_u)}, {p: k for k, p in enumerate(pr_u)}


def _hota_stats(frames, alphas):
    """Sufficient statistics for HOTA so sequences can be combined."""
    gmap, pmap = _id_index(frames)
    n_g, n_p = len(gmap), len(pmap)
    sims = [f.similarity() for f in frames]
    g_idx = [np.array([gmap[int(i)] for i in f.gt_ids], dtype=np.int64) for f in frames]
    p_idx = [np.array([pmap[int(i)] for i in f.pred_ids], dtype=np.int64) for f in frames]

    potential = np.zeros((n_g, n_p))
    gt_count = np.zeros((n_g, 1))
    pr_count = np.zeros((1, n_p))
    for sim, gi, pi in zip(sims, g_idx, p_idx):
        if sim.size:
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            frac = np.zeros_like(sim)
            ok = denom > _EPS
            frac[ok] = sim[ok] / denom[ok]
            potential[gi[:, None], pi[None, :]] += frac
        gt_count[gi] += 1
        pr_count[0, pi] += 1
    global_score = potential / np.maximum(gt_count + pr_count - potential, _EPS)

    A = len(alphas)
    tp = np.zeros(A)
    loc = np.zeros(A)
    matches = np.zeros((A, n_g, n_p))
    for sim, gi, pi in zip(sims, g_idx, p_idx):
        if sim.size == 0:
            continue
        score = global_score[gi[:, None], pi[None, :]] * sim
        r, c = _maximize(score)
        for a, alpha in enumerate(alphas):
            ok = sim[r, c] >= alpha - _EPS
            rr, cc = r[ok], c[ok]
            tp[a] += len(rr)
            loc[a] += sim[rr, cc].sum()
            matches[a, gi[rr], pi[cc]] += 1
    ass = np.zeros(A)
    ass_re = np.zeros(A)
    ass_pr = np.zeros(A)
    for a in range(A):
        m = matches[a]
        denom = np.maximum(gt_count + pr_count - m, 1.0)
        ass[a] = (m * (m / denom)).sum()
        ass_re[a] = (m * (m / np.maximum(gt_count, 1.0))).sum()
        ass_pr[a] = (m * (m / np.maximum(pr_count, 1.0))).sum()
    return {
        "tp": tp, "loc": loc, "ass": ass, "ass_re": ass_re, "ass_pr": ass_pr,
        "n_gt": int(gt_count.sum()), "n_pred": int(pr_count.sum()),
    }


def _clear_stats(frames, threshold=CLEAR_THRESHOLD):
    """CLEAR-MOT matching with the continuity bonus; per-frame records."""
    prev_tr = {}  # gt id -> last matched pred id
    prev_step = {}  # gt id -> pred id matched at the previous frame
    records = []
    for f in frames:
        sim = f.similarity()
        cur_step = {}
        n_match, idsw, iou_sum = 0, 0, 0.0
        if sim.size:
            bonus = np.array([[1000.0 if prev_step.get(int(g)) == int(p) else 0.0 for p in f.pred_ids]
                              for g in f.gt_ids]).reshape(sim.shape)
            score = bonus + sim
            score[sim < threshold - _EPS] = 0.0
            r, c = _maximize(score)
            ok = score[r, c] > 0
            for i, j in zip(r[ok], c[ok]):
                g, p = int(f.gt_ids[i]), int(f.pred_ids[j])
                if g in prev_tr and prev_tr[g] != p:
                    idsw += 1
                prev_tr[g] = p
                cur_step[g] = p
                n_match += 1
                iou_sum += sim[i, j]
        prev_step = cur_step
        records.append({"frame": f.frame, "speed": f.speed, "tp": n_match, "idsw": idsw,
                        "iou_sum": iou_sum, "n_gt": len(f.gt_ids), "n_pred": len(f.pred_ids)})
    return records


def _finish(hota, clear, alphas):
    tp = hota["tp"]
    n_gt, n_pred = hota["n_gt"], hota["n_pred"]
    rep = EvalReport(n_gt=n_gt, n_pred=n_pred)
    if n_gt == 0 and n_pred == 0:
        for k in ("HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA", "MOTA", "MOTP"):
            setattr(rep, k, 100.0)
        rep.vacuous = True
        return rep
    fn = n_gt - tp
    fp = n_pred - tp
    det_a = tp / np.maximum(tp + fn + fp, 1.0)
    det_re = tp / np.maximum(tp + fn, 1.0)
    det_pr = tp / np.maximum(tp + fp, 1.0)
    ass_a = hota["ass"] / np.maximum(tp, 1.0)
    ass_re = hota["ass_re"] / np.maximum(tp, 1.0)
    ass_pr = hota["ass_pr"] / np.maximum(tp, 1.0)
    loc_a = np.where(tp > 0, hota["loc"] / np.maximum(tp, 1.0), 0.0)
    h = np.sqrt(det_a * ass_a)
    rep.HOTA, rep.DetA, rep.AssA = 100 * h.mean(), 100 * det_a.mean(), 100 * ass_a.mean()
    rep.DetRe, rep.DetPr = 100 * det_re.mean(), 100 * det_pr.mean()
    rep.AssRe, rep.AssPr = 100 * ass_re.mean(), 100 * ass_pr.mean()
    rep.LocA = 100 * loc_a.mean()
    rep.per_alpha = {"alpha": [float(a) for a in alphas], "HOTA": (100 * h).tolist(),
                     "DetA": (100 * det_a).tolist(), "AssA": (100 * ass_a).tolist()}
    ctp = sum(r["tp"] for r in clear)
    idsw = sum(r["idsw"] for r in clear)
    rep.CLR_TP, rep.IDSW = int(ctp), int(idsw)
    rep.CLR_FN, rep.CLR_FP = int(n_gt - ctp), int(n_pred - ctp)
    # MOTA is unbounded below: many false positives make it negative
    rep.MOTA = 100.0 * (ctp - rep.CLR_FP - idsw) / max(n_gt, 1)
    rep.MOTP = 100.0 * sum(r["iou_sum"] for r in clear) / max(ctp, 1)
    return rep


def evaluate(frames: Sequence[EvalFrame], alphas=ALPHAS) -> EvalReport:
    """Evaluate one sequence."""
    return evaluate_many([frames], alphas)


def evaluate_many(sequences, alphas=ALPHAS) -> EvalReport:
    """Evaluate several sequences; counts are pooled, association scores are
    weighted by true positives (the usual multi-sequence combination)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    total = None
    clear = []
    for frames in sequences:
        frames = list(frames)
        st = _hota_stats(frames, alphas)
        clear.extend(_clear_stats(frames))
        if total is None:
            total = st
        else:
            total = {k: total[k] + st[k] for k in total}
    if total is None:
        total = _hota_stats([], alphas)
    return _finish(total, clear, alphas)


def bucket_of(speed, centers, half_width=5.0):
    for c in centers:
        if abs(speed - c) <= half_width:
            return c
    return None


def speed_bucket_analysis(sequences, centers=BUCKETS_2D, half_width=5.0):
    """Matched-IoU mean and ID-switch rate per ego-speed bucket.

    Matching follows the CLEAR protocol run over each whole sequence; every
    frame's matches and switches are then credited to the bucket containing
    that frame's speed.  ``idsw_rate`` is switches per matched pair.  Buckets
    with no matched pairs are omitted.
    """
    acc = {c: {"frames": 0, "matches": 0, "iou_sum": 0.0, "idsw": 0, "n_gt": 0} for c in centers}
    for frames in sequences:
        for r in _clear_stats(list(frames)):
            c = bucket_of(r["speed"], centers, half_width)
            if c is None:
                continue
            a = acc[c]
            a["frames"] += 1
            a["matches"] += r["tp"]
            a["iou_sum"] += r["iou_sum"]
            a["idsw"] += r["idsw"]
            a["n_gt"] += r["n_gt"]
    out = {}
    for c in centers:
        a = acc[c]
        if a["matches"] == 0:
            continue
        out[c] = {
            "speed": c,
            "frames": a["frames"],
            "matches": a["matches"],
            "gt": a["n_gt"],
            "mean_iou": a["iou_sum"] / a["matches"],
            "idsw": a["idsw"],
            "idsw_rate": a["idsw"] / a["matches"],
        }
    return out


def buckets_to_csv(buckets):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["speed", "frames", "matches", "gt", "mean_iou", "idsw", "idsw_rate"])
    for c in sorted(buckets):
        b = buckets[c]
        w.writerow([f"{b['speed']:g}", b["frames"], b["matches"], b["gt"], f"{b['mean_iou']:.6f}",
                    b["idsw"], f"{b['idsw_rate']:.6f}"])
    return buf.getvalue()


def frames_from_bundle(bundle, rows, classes: Optional[Sequence[str]] = None):
    """Pair a bundle's ground truth with result rows, frame by frame.

    GT entries flagged ``ignore`` are dropped.  With ``classes`` given only
    those class names are kept on both sides.
    """
    by_frame = {}
    for r in rows:
        if classes is None or r.cls in classes:
            by_frame.setdefault(r.frame, []).append(r)
    frames = []
    for t in range(bundle.n_frames):
        gts = [g for g in bundle.gt_frame(t) if not g.ignore and (classes is None or g.cls in classes)]
        preds = by_frame.get(t, [])
        speed = float(bundle.speeds[t]) if t < len(bundle.speeds) else 0.0
        frames.append(EvalFrame(
            t,
            [g.track_id for g in gts],
            np.array([g.box for g in gts]).reshape(len(gts), bundle.box_dim),
            [p.track_id for p in preds],
            np.array([p.box for p in preds]).reshape(len(preds), bundle.box_dim),
            speed,
        ))
    return frames
