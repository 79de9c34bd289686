"""End-to-end training of the noise network through teacher-forced filter rollouts.

During training the discrete association step is replaced by ground truth:
each ground-truth object is a trajectory, its measurement at a frame is the
detection assigned to it by a gated IoU matching, and the filter runs along
that trajectory.  The whole predict/update recursion is recorded on an
:mod:`~sglkf.autodiff` tape, so gradients reach the network through Q, R, the
learned posterior P and through the network's own size inputs.
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
import json
import logging
import math
import os
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import kf_core, msnet
from .association import solve_assignment, iou_matrix
from .errors import ConfigurationError
from .losses import LossWeights, TrajectoryBatch, inverse_softplus, total_loss

log = logging.getLogger(__name__)

_BG_SCALE = 1e-6  # background embedding keeps pooled embeddings nonzero


@dataclass
class TrainConfig:
    lr0: float = 5e-3
    weight_decay: float = 1e-2
    warmup_epochs: int = 5
    total_epochs: int = 100
    batch: int = 4
    seed: int = 0
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window: int = 10
    overlap: int = 2
    teacher_iou: float = 0.3
    center_scale: Optional[float] = None  # default image diagonal (2D) / 10 m (3D)
    rate_var_factor: float = 10.0
    weight_reg: bool = True  # -log(alpha) - log(beta) keeps learnable weights away from 0

    def __post_init__(self):
        if not self.warmup_epochs < self.total_epochs:
            raise ConfigurationError("warmup_epochs must be smaller than total_epochs")
        if self.lr0 < 0:
            raise ConfigurationError("lr0 must be nonnegative")
        if self.window < 2 or not 0 <= self.overlap < self.window:
            raise ConfigurationError("need window >= 2 and 0 <= overlap < window")
        if self.batch < 1:
            raise ConfigurationError("batch must be at least 1")


def lr_schedule(epoch, cfg: TrainConfig):
    """Linear warm-up, then cosine decay to zero at ``total_epochs``."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    frac = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class StepInfo:
    skipped: bool
    grad_norm: float
    decayed: List[str]
    exempt: List[str]


def optimizer_step(params, grads, state: OptimizerState, lr, cfg: TrainConfig, exempt=msnet.is_decay_exempt):
    """One AdamW step, in place on the arrays of ``params`` (a name -> array map).

    Weight decay is decoupled from the adaptive step and skipped for names
    where ``exempt(name)`` holds.  Non-finite gradients skip the step
    entirely (moments and counter untouched).
    """
    norm2 = 0.0
    for name, g in grads.items():
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise ConfigurationError(f"gradient {name!r} does not match its parameter")
        norm2 += float(np.sum(np.square(g)))
    if not math.isfinite(norm2):
        log.warning("non-finite gradient, optimizer step skipped")
        return StepInfo(True, float("nan"), [], [])
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    decayed, skipped = [], []
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        if exempt(name):
            skipped.append(name)
        else:
            p *= 1.0 - lr * cfg.weight_decay
            decayed.append(name)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return StepInfo(False, math.sqrt(norm2), decayed, skipped)


def clip_grads(grads, max_norm):
    """Scale ``grads`` in place so their global norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if max_norm and norm > max_norm and math.isfinite(norm):
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# -- teacher-forced data -------------------------------------------------------

@dataclass
class TeacherSequence:
    """Ground-truth trajectories of one sequence with their assigned detections."""

    sequence_id: str
    box_dim: int
    gt: np.ndarray  # (n, T, bd)
    gt_mask: np.ndarray  # (n, T)
    det: np.ndarray  # (n, T, bd)
    det_mask: np.ndarray  # (n, T)
    emb: Optional[np.ndarray]  # (n, T, d)
    speeds: np.ndarray  # (T,)
    center_scale: float = 1.0

    @property
    def n(self):
        return self.gt.shape[0]

    @property
    def T(self):
        return self.gt.shape[1]


def prepare_sequence(bundle, teacher_iou=0.3):
    """Build trajectories from a bundle, assigning detections by gated IoU matching."""
    if bundle.gt is None:
        raise ConfigurationError(f"sequence {bundle.sequence_id} has no ground truth")
    ids = sorted({g.track_id for frame in bundle.gt.values() for g in frame if not g.ignore})
    row = {tid: k for k, tid in enumerate(ids)}
    n, T, bd = len(ids), bundle.n_frames, bundle.box_dim
    gt = np.zeros((n, T, bd))
    gt_mask = np.zeros((n, T), dtype=bool)
    det = np.zeros((n, T, bd))
    det_mask = np.zeros((n, T), dtype=bool)
    emb = None
    if bundle.embeddings:
        d = len(next(iter(bundle.embeddings.values())))
        emb = np.zeros((n, T, d))
    for t in range(T):
        gts = [g for g in bundle.gt_frame(t) if not g.ignore]
        if not gts:
            continue
        rows = [row[g.track_id] for g in gts]
        boxes = np.array([g.box for g in gts])
        gt[rows, t] = boxes
        gt_mask[rows, t] = True
        if emb is not None:
            for g, r in zip(gts, rows):
                e = bundle.embeddings.get((t, g.track_id))
                if e is None:
                    raise ConfigurationError(f"missing embedding for frame {t}, track {g.track_id}")
                emb[r, t] = e
        dets = bundle.detections.get(t, [])
        if dets:
            cost = 1.0 - iou_matrix(boxes, np.array([d_.box for d_ in dets]))
            for i, j in solve_assignment(cost, 1.0 - teacher_iou).matches:
                det[rows[i], t] = dets[j].box
                det_mask[rows[i], t] = True
    speeds = np.maximum(np.asarray(bundle.speeds, dtype=np.float64)[:T], 0.0)
    if len(speeds) < T:
        speeds = np.concatenate([speeds, np.full(T - len(speeds), speeds[-1] if len(speeds) else 0.0)])
    return TeacherSequence(bundle.sequence_id, bd, gt, gt_mask, det, det_mask, emb, speeds,
                           _default_center_scale(bundle))


@dataclass
class _Batch:
    box_dim: int
    gt: np.ndarray
    gt_mask: np.ndarray
    det: np.ndarray
    det_mask: np.ndarray
    emb: Optional[np.ndarray]
    speeds: np.ndarray  # (n, T)
    group: np.ndarray  # (n,) sequence index
    center_scale: float
    birth: np.ndarray  # (n,) first frame with a detection (T if none)
    end: np.ndarray  # (n,) last ground-truth frame


def _stack(seqs):
    T = max(s.T for s in seqs)
    bd = seqs[0].box_dim
    if any(s.box_dim != bd for s in seqs):
        raise ConfigurationError("sequences in one batch mix 2D and 3D boxes")
    use_emb = all(s.emb is not None for s in seqs)

    def pad(a, fill=0.0):
        if a.shape[1] == T:
            return a
        shape = (a.shape[0], T - a.shape[1]) + a.shape[2:]
        return np.concatenate([a, np.full(shape, fill, dtype=a.dtype)], axis=1)

    gt = np.concatenate([pad(s.gt) for s in seqs])
    gt_mask = np.concatenate([pad(s.gt_mask, False) for s in seqs])
    det = np.concatenate([pad(s.det) for s in seqs])
    det_mask = np.concatenate([pad(s.det_mask, False) for s in seqs])
    emb = np.concatenate([pad(s.emb) for s in seqs]) if use_emb else None
    speeds = np.concatenate([
        np.repeat(np.concatenate([s.speeds, np.full(T - s.T, s.speeds[-1])])[None], s.n, axis=0) for s in seqs])
    group = np.concatenate([np.full(s.n, k) for k, s in enumerate(seqs)])
    birth = np.where(det_mask.any(1), det_mask.argmax(1), T)
    end = np.where(gt_mask.any(1), T - 1 - gt_mask[:, ::-1].argmax(1), -1)
    return _Batch(bd, gt, gt_mask, det, det_mask, emb, speeds, group, max(s.center_scale for s in seqs), birth, end)


# -- differentiable rollout ----------------------------------------------------

def msnet_op(params, pvar, inputs, heads):
    """Network evaluation as a tape op with parents ``(pvar, inputs)``.

    Returns one Var holding the requested heads concatenated on the last axis.
    """
    x = ad.value(inputs)
    out, ftape = msnet.record(params, x, heads)
    dims = [out[h].shape[-1] for h in heads]
    val = np.concatenate([out[h] for h in heads], axis=-1)
    cuts = np.cumsum(dims)[:-1]

    def vjp(g):
        parts = np.split(g, cuts, axis=-1)
        gp, gi = msnet.backward(ftape, dict(zip(heads, parts)))
        return msnet.flatten_grads(gp), gi

    return ad.custom((pvar, inputs), val, vjp), dims


def _box_iou_var(boxes, gt):
    """IoU between Var boxes (N, bd) and constant boxes (M, bd); (N, M) Var."""
    k = gt.shape[-1] // 2
    b = ad.reshape(boxes, (-1, 1, 2 * k))
    g = gt[None]
    bc, bs = b[..., :k], b[..., k:]
    lo = ad.maximum(bc - 0.5 * bs, g[..., :k] - 0.5 * g[..., k:])
    hi = ad.minimum(bc + 0.5 * bs, g[..., :k] + 0.5 * g[..., k:])
    side = ad.maximum(hi - lo, 0.0)
    inter = side[..., 0]
    vb = bs[..., 0]
    vg = g[..., k]
    for i in range(1, k):
        inter = inter * side[..., i]
        vb = vb * bs[..., i]
        vg = vg * g[..., k + i]
    return inter / (vb + vg - inter)


def pooled_embedding(boxes, gt_boxes, gt_emb, cand_mask, background):
    """Embedding of predicted boxes: normalized IoU-weighted sum of ground-truth embeddings.

    Unit length like an appearance feature, so a box cannot lower the
    trajectory term by drifting off every object.

    Args:
        boxes: (N, bd) Var or array of predicted boxes.
        gt_boxes: (M, bd) ground-truth boxes present at this frame.
        gt_emb: (M, d) their embeddings.
        cand_mask: (N, M) which ground truths each box may pool from.
        background: (d,) small constant vector added to every result.
    """
    iou = _box_iou_var(boxes, np.where(cand_mask.any(0)[:, None], gt_boxes, 1.0))
    w = ad.where(cand_mask, iou, 0.0)
    f = w @ gt_emb + background
    return f / ad.sqrt(ad.vsum(ad.square(f), axis=-1, keepdims=True))


def _floor_sizes(x, bd):
    k = bd // 2
    return ad.concatenate([x[:, :k], ad.maximum(x[:, k:bd], kf_core.SIZE_FLOOR), x[:, bd:]], axis=1)


def _window_loss(params, pvar, araw, braw, bt: _Batch, rows, start, stop, carry, weights, cfg, center_scale,
                 snap_at=None):
    """Record frames ``[start, stop)`` on ``pvar``'s tape.

    ``carry`` holds the (detached) filter state of every row after frame
    ``start - 1``.  The state after frame ``snap_at`` is copied into a new
    carry for the next window.

    Returns:
        ``(loss, breakdown, new_carry)``.
    """
    tape = pvar.tape
    bd = bt.box_dim
    D = 2 * bd
    n = len(rows)
    F = kf_core.make_transition(D)
    rate_scale = np.concatenate([np.ones(bd), np.full(bd, cfg.rate_var_factor)])
    X = tape.leaf(carry["X"][rows])
    P = tape.leaf(carry["P"][rows])
    born = carry["born"][rows].copy()
    birth, end = bt.birth[rows], bt.end[rows]
    speeds = bt.speeds[rows]
    background = None
    if bt.emb is not None:
        u = np.ones(bt.emb.shape[-1])
        background = _BG_SCALE * u / np.linalg.norm(u)
    same = bt.group[rows][:, None] == bt.group[rows][None, :]

    boxes_t, emb_t, valid_t = [], [], []
    snap = None
    for t in range(start, stop):
        alive = born & (t - 1 <= end)
        v_prev = speeds[:, t - 1] if t > 0 else speeds[:, t]
        v_cur = speeds[:, t]
        # predict: Q from the previous speed and the posterior sizes
        sizes = ad.maximum(X[:, bd // 2:bd], kf_core.SIZE_FLOOR)
        q, _ = msnet_op(params, pvar, ad.concatenate([v_prev[:, None], sizes], axis=1), ("q",))
        Xp = X @ F.T
        Pp = F @ P @ F.T + ad.diag_embed(q)
        # update: R and P from the current speed and the measurement sizes
        upd = alive & bt.det_mask[rows, t]
        new = (~born) & (birth == t)
        z = np.where(bt.det_mask[rows, t][:, None], bt.det[rows, t], ad.value(Xp)[:, :bd])
        z_sizes = np.maximum(z[:, bd // 2:], kf_core.SIZE_FLOOR)
        rp, _ = msnet_op(params, pvar, np.column_stack([v_cur, z_sizes]), ("r", "p"))
        r, p = rp[:, :bd], rp[:, bd:]
        S = Pp[:, :bd, :bd] + ad.diag_embed(r)
        Kt = ad.solve(S, Pp[:, :bd, :])  # (n, bd, D); S is symmetric
        innov = z - Xp[:, :bd]
        Xu = Xp + ad.reshape(ad.reshape(innov, (n, 1, bd)) @ Kt, (n, D))
        Xu = _floor_sizes(Xu, bd)
        Pu = ad.diag_embed(p)
        Xb = np.concatenate([z, np.zeros((n, bd))], axis=1)
        Pb = ad.diag_embed(p * rate_scale)
        keep = ~(alive | new)
        X = ad.where(upd[:, None], Xu, ad.where(new[:, None], Xb, ad.where(keep[:, None], X, Xp)))
        P = ad.where(upd[:, None, None], Pu, ad.where(new[:, None, None], Pb, ad.where(keep[:, None, None], P, Pp)))
        born = born | new
        valid = born & bt.gt_mask[rows, t] & (t <= end)
        box = _floor_sizes(X, bd)[:, :bd]
        if t == snap_at:
            snap = {"X": ad.value(X).copy(), "P": ad.value(P).copy(), "born": born.copy()}
        boxes_t.append(box)
        valid_t.append(valid)
        if bt.emb is not None:
            cand = same & bt.gt_mask[rows, t][None, :]
            emb_t.append(pooled_embedding(box, bt.gt[rows, t], bt.emb[rows, t], cand, background))

    valid = np.stack(valid_t, axis=1)
    pred = ad.stack(boxes_t, axis=1)
    gt = bt.gt[rows, start:stop]
    if bt.emb is not None:
        emb = ad.stack(emb_t, axis=1)
        gt_emb = bt.emb[rows, start:stop]
    else:
        emb = ad.mul(pred[..., :1], 0.0) + 1.0  # constant stand-in, SCL/TCL-embedding vanish
        gt_emb = np.ones(gt.shape[:-1] + (1,))
    batch = TrajectoryBatch(pred[..., : bd // 2], emb, pred, gt, gt_emb, valid)
    alpha = ad.softplus(araw) if weights.trainable else weights.alpha
    beta = ad.softplus(braw) if weights.trainable else weights.beta
    loss, parts = total_loss(batch, weights, center_scale, alpha, beta)
    if weights.trainable and cfg.weight_reg:
        reg = -(ad.log(alpha) + ad.log(beta))
        loss = loss + reg
        parts["reg"] = reg
    new_carry = {k: v.copy() for k, v in carry.items()}
    if snap is not None:
        for k in new_carry:
            new_carry[k][rows] = snap[k]
    return loss, parts, new_carry


def _windows(T, cfg):
    step = cfg.window - cfg.overlap
    out = []
    s = 0
    while True:
        e = min(s + cfg.window, T)
        out.append((s, e))
        if e >= T:
            return out
        s += step


def _default_center_scale(bundle):
    """Image diagonal for 2D boxes (1242x375 when unknown), 10 m for 3D."""
    if bundle.box_dim == 6:
        return 10.0
    w, h = bundle.image_size or (1242.0, 375.0)
    return math.hypot(w, h)


def _initial_carry(bt):
    n = bt.gt.shape[0]
    D = 2 * bt.box_dim
    return {"X": np.zeros((n, D)), "P": np.tile(np.eye(D), (n, 1, 1)), "born": np.zeros(n, dtype=bool)}


def iter_window_grads(seqs, params, weights, cfg, araw=None, braw=None):
    """Yield ``(loss, grad_flat, grad_araw, grad_braw, breakdown)`` per window.

    Windows of ``cfg.window`` frames overlap by ``cfg.overlap``; each starts
    from the detached state the previous window reached just before it.
    """
    bt = _stack(seqs)
    center_scale = cfg.center_scale or bt.center_scale
    if araw is None:
        araw = inverse_softplus(weights.alpha)
    if braw is None:
        braw = inverse_softplus(weights.beta)
    carry = _initial_carry(bt)
    T = bt.gt.shape[1]
    flat = params.flat()
    for start, stop in _windows(T, cfg):
        snap_at = stop - cfg.overlap - 1
        rows = np.nonzero((bt.birth < stop) & (bt.end >= start))[0]
        if len(rows) == 0:
            continue
        tape = ad.Tape()
        pvar = tape.leaf(flat)
        a_var = tape.leaf(np.array(araw, dtype=np.float64))
        b_var = tape.leaf(np.array(braw, dtype=np.float64))
        loss, parts, carry = _window_loss(params, pvar, a_var, b_var, bt, rows, start, stop, carry,
                                          weights, cfg, center_scale, snap_at)
        breakdown = {k: float(ad.value(v)) for k, v in parts.items()}
        if isinstance(loss, ad.Var):
            grads = tape.backward(loss)
            yield float(loss.value), grads[pvar], float(grads[a_var]), float(grads[b_var]), breakdown
        else:
            yield float(loss), np.zeros_like(flat), 0.0, 0.0, breakdown


def rollout_and_grad(sequence, params, weights: LossWeights = LossWeights(), cfg: TrainConfig = TrainConfig()):
    """Loss of one (or a list of) teacher-forced sequence(s) and its exact gradients.

    Args:
        sequence: :class:`TeacherSequence`, a bundle, or a list of them.
        params: :class:`~sglkf.msnet.MSNetParams`.
        weights: loss weights; with ``trainable`` the returned weight
            gradients are with respect to ``softplus^-1(alpha)`` and
            ``softplus^-1(beta)``.
        cfg: window length and other rollout settings.

    Returns:
        ``(loss, grad_params, grad_weights)``; the loss is summed over windows.
    """
    seqs = sequence if isinstance(sequence, (list, tuple)) else [sequence]
    seqs = [s if isinstance(s, TeacherSequence) else prepare_sequence(s, cfg.teacher_iou) for s in seqs]
    total, g_flat, ga, gb = 0.0, np.zeros(params.count()), 0.0, 0.0
    any_valid = False
    for loss, gp, a, b, parts in iter_window_grads(seqs, params, weights, cfg):
        total += loss
        g_flat += gp
        ga += a
        gb += b
        any_valid = True
    if not any_valid or not np.any(g_flat):
        log.warning("rollout produced no matched pairs; gradient is zero")
    grad_params = _unflatten(params, g_flat)
    return total, grad_params, {"alpha_raw": ga, "beta_raw": gb}


def _unflatten(params, vec):
    out = OrderedDict()
    k = 0
    for name, arr in params.arrays.items():
        out[name] = vec[k:k + arr.size].reshape(arr.shape)
        k += arr.size
    return out


@dataclass
class TrainResult:
    params: msnet.MSNetParams
    weights: LossWeights
    curve: List[dict]
    eval_report: Optional[dict] = None


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def train(dataset, cfg: TrainConfig = TrainConfig(), weights: LossWeights = LossWeights(),
          params: Optional[msnet.MSNetParams] = None, out_dir=None, epochs=None, progress=None):
    """Fit the noise network on a list of bundles (or teacher sequences).

    Every window of every batch is one optimizer step; the learning rate is
    constant within an epoch and follows :func:`lr_schedule`.  With
    ``out_dir`` the checkpoint, loss weights and one JSON line of metrics per
    epoch are written there.

    Args:
        dataset: nonempty list of bundles or :class:`TeacherSequence`.
        cfg: optimization settings.
        weights: initial loss weights (alpha/beta learned when ``trainable``).
        params: starting parameters; default is a fresh init from ``cfg.seed``.
        out_dir: optional output directory.
        epochs: stop after this many epochs (the schedule still spans
            ``cfg.total_epochs``); default ``cfg.total_epochs``.
        progress: optional callable receiving each epoch's metrics dict.
    """
    if not dataset:
        raise ConfigurationError("training needs at least one sequence")
    seqs = [s if isinstance(s, TeacherSequence) else prepare_sequence(s, cfg.teacher_iou) for s in dataset]
    box_dim = seqs[0].box_dim
    if params is None:
        params = msnet.init_params(msnet.MSNetConfig.for_state_dim(2 * box_dim), seed=cfg.seed)
    params = params.copy()
    store = OrderedDict(params.arrays)
    store["loss.alpha_raw"] = np.array([inverse_softplus(weights.alpha)])
    store["loss.beta_raw"] = np.array([inverse_softplus(weights.beta)])
    state = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    n_epochs = cfg.total_epochs if epochs is None else min(epochs, cfg.total_epochs)
    curve = []
    metrics_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def exempt(name):
        return name.startswith("loss.") or msnet.is_decay_exempt(name)

    try:
        for epoch in range(n_epochs):
            lr = lr_schedule(epoch, cfg)
            sums = {}
            n_win = 0
            for idx in _batches(len(seqs), cfg.batch, rng):
                batch = [seqs[i] for i in idx]
                # windows are stepped one after another; later windows of the
                # same batch see the parameters updated by earlier ones
                gen = _window_steps(batch, params, store, weights, cfg)
                for loss, parts in gen(lambda grads: _apply(grads, store, state, lr, cfg, exempt)):
                    n_win += 1
                    sums["loss"] = sums.get("loss", 0.0) + loss
                    for k, v in parts.items():
                        sums[k] = sums.get(k, 0.0) + v
            alpha = float(np.logaddexp(0.0, store["loss.alpha_raw"][0]))
            beta = float(np.logaddexp(0.0, store["loss.beta_raw"][0]))
            row = {"epoch": epoch, "lr": lr, "loss": sums.get("loss", 0.0) / max(n_win, 1)}
            for k in ("tcl", "scl", "pcl"):
                row[k] = sums.get(k, 0.0) / max(n_win, 1)
            row["alpha"], row["beta"] = alpha, beta
            row["windows"] = n_win
            curve.append(row)
            if metrics_fh:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_fh.flush()
            if progress:
                progress(row)
            log.info("epoch %d lr %.2e loss %.5f", epoch, lr, row["loss"])
    finally:
        if metrics_fh:
            metrics_fh.close()
    final_weights = LossWeights(weights.lam, weights.gamma,
                                float(np.logaddexp(0.0, store["loss.alpha_raw"][0])),
                                float(np.logaddexp(0.0, store["loss.beta_raw"][0])),
                                weights.rho, weights.trainable)
    if out_dir:
        msnet.save(params, os.path.join(out_dir, "msnet.ckpt"))
        with open(os.path.join(out_dir, "loss_weights.json"), "w") as fh:
            json.dump(asdict(final_weights), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "curve.json"), "w") as fh:
            json.dump(curve, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return TrainResult(params, final_weights, curve)


def _apply(grads, store, state, lr, cfg, exempt):
    clip_grads(grads, cfg.grad_clip)
    return optimizer_step(store, grads, state, lr, cfg, exempt)


def _window_steps(batch, params, store, weights, cfg):
    """Generator factory: run each window with the current parameters, hand
    its gradients to ``apply`` and yield ``(loss, breakdown)``."""

    def run(apply):
        bt = _stack(batch)
        center_scale = cfg.center_scale or bt.center_scale
        carry = _initial_carry(bt)
        T = bt.gt.shape[1]
        for start, stop in _windows(T, cfg):
            rows = np.nonzero((bt.birth < stop) & (bt.end >= start))[0]
            if len(rows) == 0:
                continue
            tape = ad.Tape()
            pvar = tape.leaf(params.flat())
            a_var = tape.leaf(store["loss.alpha_raw"][0].copy())
            b_var = tape.leaf(store["loss.beta_raw"][0].copy())
            loss, parts, carry = _window_loss(params, pvar, a_var, b_var, bt, rows, start, stop, carry,
                                              weights, cfg, center_scale, stop - cfg.overlap - 1)
            breakdown = {k: float(ad.value(v)) for k, v in parts.items()}
            if isinstance(loss, ad.Var):
                g = tape.backward(loss)
                grads = _unflatten(params, g[pvar])
                if weights.trainable:
                    grads["loss.alpha_raw"] = np.atleast_1d(g[a_var])
                    grads["loss.beta_raw"] = np.atleast_1d(g[b_var])
                apply(grads)
            yield float(ad.value(loss)), breakdown

    return run
