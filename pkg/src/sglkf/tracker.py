"""Per-frame tracking loop: speed-conditioned predict, two-stage association,
speed-conditioned update and a track lifecycle with speed-scaled lifetime."""
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from . import kf_core, msnet
from .association import AssociationConfig, Detection, two_stage_associate
from .errors import ConfigurationError, SequencingError
from .io_formats import ResultRow, class_name


class Stage(str, Enum):
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"
    LOST = "Lost"
    REMOVED = "Removed"


_ALLOWED = {
    Stage.TENTATIVE: {Stage.CONFIRMED, Stage.REMOVED},
    Stage.CONFIRMED: {Stage.LOST},
    Stage.LOST: {Stage.CONFIRMED, Stage.REMOVED},
    Stage.REMOVED: set(),
}


@dataclass
class Track:
    id: int
    state: np.ndarray
    cov: np.ndarray
    class_id: int = 0
    stage: Stage = Stage.TENTATIVE
    hits: int = 1
    misses: int = 0
    score: float = 1.0
    history: deque = field(default_factory=lambda: deque(maxlen=64))

    def box(self):
        half = len(self.state) // 2
        return self.state[:half].copy()

    def transition(self, stage):
        if stage == self.stage:
            return
        if stage not in _ALLOWED[self.stage]:
            raise SequencingError(f"illegal track transition {self.stage.value} -> {stage.value}")
        self.stage = stage

    def snapshot(self):
        return Track(self.id, self.state.copy(), self.cov.copy(), self.class_id, self.stage,
                     self.hits, self.misses, self.score, deque(maxlen=0))


@dataclass
class TrackerConfig:
    association: AssociationConfig = AssociationConfig()
    base_age: int = 30
    v_ref: float = 120.0
    min_age_frac: float = 0.2
    confirm_hits: int = 2
    rate_var_factor: float = 10.0
    history_len: int = 64
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.base_age < 1:
            raise ConfigurationError("base_age must be at least 1")
        if not 0.0 < self.min_age_frac <= 1.0:
            raise ConfigurationError("min_age_frac must lie in (0, 1]")
        if self.v_ref <= 0:
            raise ConfigurationError("v_ref must be positive")
        if self.confirm_hits < 1:
            raise ConfigurationError("confirm_hits must be at least 1")


def max_age(v, cfg: TrackerConfig):
    """Frames a lost track survives at ego speed ``v`` (km/h)."""
    if v < 0:
        raise ValueError("speed must be nonnegative")
    return int(round(cfg.base_age * max(1.0 - v / cfg.v_ref, cfg.min_age_frac)))


def _sizes(boxes):
    half = boxes.shape[-1] // 2
    return np.maximum(boxes[..., half:], kf_core.SIZE_FLOOR)


class MSNetNoise:
    """Noise from a trained network: Q at the previous speed and posterior
    sizes, R and the posterior P at the current speed and detection sizes."""

    def __init__(self, params: msnet.MSNetParams, rate_var_factor=10.0):
        self.params = params
        self.rate_var_factor = rate_var_factor

    def _inputs(self, v, sizes):
        sizes = np.atleast_2d(sizes)
        return np.column_stack([np.full(len(sizes), float(v)), sizes])

    def process(self, v_prev, states):
        dim = states.shape[-1]
        sizes = np.maximum(states[:, kf_core.size_slice(dim)], kf_core.SIZE_FLOOR)
        return msnet.forward(self.params, self._inputs(v_prev, sizes), heads=("q",))["q"]

    def measurement(self, v_cur, det_boxes):
        out = msnet.forward(self.params, self._inputs(v_cur, _sizes(det_boxes)), heads=("r", "p"))
        p = out["p"]
        cov = np.zeros(p.shape + (p.shape[-1],))
        idx = np.arange(p.shape[-1])
        cov[:, idx, idx] = p
        return out["r"], cov

    def initial(self, v_cur, det_boxes):
        p = msnet.forward(self.params, self._inputs(v_cur, _sizes(det_boxes)), heads=("p",))["p"].copy()
        half = p.shape[-1] // 2
        p[:, half:] *= self.rate_var_factor
        cov = np.zeros(p.shape + (p.shape[-1],))
        idx = np.arange(p.shape[-1])
        cov[:, idx, idx] = p
        return cov


class FixedNoise:
    """Constant-parameter baseline: standard deviations proportional to box
    size (weights 1/20 for position, 1/160 for velocity), independent of
    ego speed.  Position components are paired with the size component of
    the same axis, so 3D boxes use (x,w), (y,h), (z,l)."""

    def __init__(self, std_pos=1.0 / 20, std_vel=1.0 / 160):
        self.std_pos = std_pos
        self.std_vel = std_vel

    def process(self, v_prev, states):
        dim = states.shape[-1]
        s = np.maximum(states[:, kf_core.size_slice(dim)], kf_core.SIZE_FLOOR)
        std = np.concatenate([self.std_pos * s, self.std_pos * s, self.std_vel * s, self.std_vel * s], axis=1)
        return std**2

    def measurement(self, v_cur, det_boxes):
        s = _sizes(det_boxes)
        r = np.concatenate([self.std_pos * s, self.std_pos * s], axis=1) ** 2
        return r, None

    def initial(self, v_cur, det_boxes):
        s = _sizes(det_boxes)
        std = np.concatenate([2 * self.std_pos * s, 2 * self.std_pos * s,
                              10 * self.std_vel * s, 10 * self.std_vel * s], axis=1)
        var = std**2
        cov = np.zeros(var.shape + (var.shape[-1],))
        idx = np.arange(var.shape[-1])
        cov[:, idx, idx] = var
        return cov


def initial_covariance(det: Detection, v, params, rate_var_factor=10.0):
    """Diagonal birth covariance from the network's P head at ``(v, sizes)``."""
    return MSNetNoise(params, rate_var_factor).initial(max(float(v), 0.0), det.box[None])[0]


class Tracker:
    """Single-sequence tracker; not thread-safe, one instance per sequence."""

    def __init__(self, noise, cfg: TrackerConfig = TrackerConfig(), box_dim=4):
        if box_dim not in (4, 6):
            raise ConfigurationError("box_dim must be 4 or 6")
        self.noise = noise
        self.cfg = cfg
        self.box_dim = box_dim
        self.dim = 2 * box_dim
        self.tracks: List[Track] = []
        self.removed: List[Track] = []
        self.next_id = 0
        self.last_frame = None

    def live(self):
        return [t for t in self.tracks if t.stage != Stage.REMOVED]

    def step(self, frame, dets, v_prev, v_cur):
        """Advance one frame.

        Args:
            frame: frame index, strictly increasing between calls.
            dets: list of :class:`Detection`.
            v_prev: ego speed at the previous frame (km/h); negatives clamp to 0.
            v_cur: ego speed at this frame.

        Returns:
            Snapshots of confirmed tracks that were matched at this frame.
        """
        if self.last_frame is not None and frame <= self.last_frame:
            raise SequencingError(f"frame {frame} does not follow {self.last_frame}")
        self.last_frame = frame
        v_prev = max(float(v_prev), 0.0)
        v_cur = max(float(v_cur), 0.0)
        for d in dets:
            if len(d.box) != self.box_dim:
                raise ConfigurationError(f"detection box has {len(d.box)} values, expected {self.box_dim}")

        tracks = self.tracks
        if tracks:
            states = np.stack([t.state for t in tracks])
            covs = np.stack([t.cov for t in tracks])
            q = self.noise.process(v_prev, states)
            states, covs = kf_core.predict(states, covs, q)
            for t, s, c in zip(tracks, states, covs):
                t.state, t.cov = s, c
            pred_boxes = states[:, : self.box_dim].copy()
            pred_boxes[:, self.box_dim // 2:] = np.maximum(pred_boxes[:, self.box_dim // 2:], kf_core.SIZE_FLOOR)
        else:
            pred_boxes = np.zeros((0, self.box_dim))

        stage1, stage2, fresh = two_stage_associate(
            pred_boxes, dets, self.cfg.association, [t.class_id for t in tracks])
        matches = stage1.matches + stage2.matches

        if matches:
            ti = [i for i, _ in matches]
            di = [j for _, j in matches]
            z = np.stack([dets[j].box for j in di])
            r, p_cov = self.noise.measurement(v_cur, z)
            st, cv, _ = kf_core.update(np.stack([tracks[i].state for i in ti]),
                                       np.stack([tracks[i].cov for i in ti]), z, r, p_cov)
            for k, (i, j) in enumerate(matches):
                t = tracks[i]
                t.state, t.cov = st[k], cv[k]
                t.hits += 1
                t.misses = 0
                t.score = dets[j].score
                if t.stage == Stage.TENTATIVE and t.hits >= self.cfg.confirm_hits:
                    t.transition(Stage.CONFIRMED)
                elif t.stage == Stage.LOST:
                    t.transition(Stage.CONFIRMED)
                t.history.append((frame, t.state.copy(), dets[j].embedding))

        matched = {i for i, _ in matches}
        limit = max_age(v_cur, self.cfg)
        for i, t in enumerate(tracks):
            if i in matched:
                continue
            t.misses += 1
            if t.stage == Stage.TENTATIVE:
                t.transition(Stage.REMOVED)
            elif t.stage == Stage.CONFIRMED:
                t.transition(Stage.LOST)
            if t.stage == Stage.LOST and t.misses > limit:
                t.transition(Stage.REMOVED)

        if fresh:
            boxes = np.stack([dets[j].box for j in fresh])
            covs = self.noise.initial(v_cur, boxes)
            for j, c in zip(fresh, covs):
                d = dets[j]
                state = np.concatenate([d.box, np.zeros(self.box_dim)])
                t = Track(self.next_id, state, c, d.class_id, Stage.TENTATIVE, score=d.score,
                          history=deque(maxlen=self.cfg.history_len))
                t.history.append((frame, state.copy(), d.embedding))
                self.next_id += 1
                tracks.append(t)
                if self.cfg.confirm_hits <= 1:
                    t.transition(Stage.CONFIRMED)

        self.removed.extend(t for t in tracks if t.stage == Stage.REMOVED)
        self.tracks = [t for t in tracks if t.stage != Stage.REMOVED]
        out = [t.snapshot() for i, t in enumerate(tracks)
               if t.stage == Stage.CONFIRMED and (i in matched or t.hits == 1)]
        return out


def make_noise(params=None, fixed=False, rate_var_factor=10.0):
    if fixed or params is None:
        return FixedNoise()
    return MSNetNoise(params, rate_var_factor)


def run_sequence(bundle, noise, cfg: TrackerConfig = TrackerConfig()):
    """Track a whole :class:`~sglkf.io_formats.SequenceBundle`; returns result rows."""
    tracker = Tracker(noise, cfg, bundle.box_dim)
    rows = []
    speeds = np.maximum(bundle.speeds, 0.0)
    for frame in range(bundle.n_frames):
        v_cur = speeds[frame] if frame < len(speeds) else speeds[-1]
        v_prev = speeds[frame - 1] if 0 < frame <= len(speeds) else v_cur
        for t in tracker.step(frame, bundle.detections.get(frame, []), v_prev, v_cur):
            half = bundle.box_dim // 2
            box = t.box()
            box[half:] = np.maximum(box[half:], kf_core.SIZE_FLOOR)
            rows.append(ResultRow(frame, t.id, class_name(t.class_id), box, float(t.score)))
    return rows
