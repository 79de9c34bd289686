import numpy as np
import pytest

from sglkf import metrics, msnet, synth, tracker
from sglkf.association import Detection
from sglkf.errors import ConfigurationError, SequencingError
from sglkf.tracker import Stage, Tracker, TrackerConfig, max_age


def _det(box, score=0.9):
    return Detection(np.asarray(box, dtype=float), score)


def test_max_age_rule():
    cfg = TrackerConfig()
    assert max_age(0, cfg) == 30
    assert max_age(60, cfg) == 15
    assert max_age(120, cfg) == max_age(500, cfg) == round(30 * 0.2)
    ages = [max_age(v, cfg) for v in range(0, 200, 5)]
    assert all(a >= b for a, b in zip(ages, ages[1:]))
    with pytest.raises(ValueError):
        max_age(-1, cfg)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrackerConfig(base_age=0)
    with pytest.raises(ConfigurationError):
        TrackerConfig(min_age_frac=0.0)
    with pytest.raises(ConfigurationError):
        TrackerConfig(v_ref=0.0)


def test_lifecycle_transitions():
    t = tracker.Track(0, np.zeros(8), np.eye(8))
    with pytest.raises(SequencingError):
        t.transition(Stage.LOST)
    t.transition(Stage.CONFIRMED)
    t.transition(Stage.LOST)
    t.transition(Stage.REMOVED)
    with pytest.raises(SequencingError):
        t.transition(Stage.CONFIRMED)


def test_birth_and_confirmation():
    tr = Tracker(tracker.FixedNoise())
    out = tr.step(0, [_det([50, 50, 20, 20])], 0, 0)
    assert out == [] and len(tr.tracks) == 1
    t = tr.tracks[0]
    assert t.id == 0 and t.stage == Stage.TENTATIVE and np.all(t.state[4:] == 0)
    out = tr.step(1, [_det([51, 50, 20, 20])], 0, 0)
    assert [s.id for s in out] == [0] and tr.tracks[0].stage == Stage.CONFIRMED


def test_removal_after_max_age():
    cfg = TrackerConfig(base_age=4)
    tr = Tracker(tracker.FixedNoise(), cfg)
    tr.step(0, [_det([50, 50, 20, 20])], 0, 0)
    tr.step(1, [_det([50, 50, 20, 20])], 0, 0)
    for f in range(2, 2 + max_age(0, cfg)):
        tr.step(f, [], 0, 0)
        assert tr.tracks and tr.tracks[0].stage == Stage.LOST
    tr.step(2 + max_age(0, cfg), [], 0, 0)
    assert tr.tracks == [] and tr.removed[0].id == 0


def test_lost_track_recovers_and_resets_misses():
    tr = Tracker(tracker.FixedNoise())
    for f in range(3):
        tr.step(f, [_det([50, 50, 20, 20])], 0, 0)
    tr.step(3, [], 0, 0)
    assert tr.tracks[0].stage == Stage.LOST and tr.tracks[0].misses == 1
    out = tr.step(4, [_det([50, 50, 20, 20])], 0, 0)
    assert out[0].id == 0 and tr.tracks[0].misses == 0 and tr.tracks[0].stage == Stage.CONFIRMED


def test_frames_must_increase():
    tr = Tracker(tracker.FixedNoise())
    tr.step(3, [], 0, 0)
    with pytest.raises(SequencingError):
        tr.step(3, [], 0, 0)


def test_box_dim_checked():
    tr = Tracker(tracker.FixedNoise())
    with pytest.raises(ConfigurationError):
        tr.step(0, [Detection(np.array([0, 0, 0, 1, 1, 1.0]), 0.9)], 0, 0)


def test_constant_velocity_perfect_detections():
    boxes = [np.array([100 + 4.0 * t, 80 + 1.0 * t, 40, 30]) for t in range(20)]
    tr = Tracker(tracker.FixedNoise())
    frames = []
    for t, b in enumerate(boxes):
        out = tr.step(t, [_det(b)], 0, 0)
        frames.append(metrics.EvalFrame(t, [1], b[None], [s.id for s in out],
                                        np.array([s.box() for s in out]).reshape(len(out), 4)))
    ids = {i for f in frames for i in f.pred_ids}
    rep = metrics.evaluate(frames)
    assert ids == {0} and rep.IDSW == 0
    matched = metrics.speed_bucket_analysis([frames], (0.0,))[0.0]
    assert matched["mean_iou"] > 0.95


def test_ids_unique_and_deterministic(small_bundle):
    a = tracker.run_sequence(small_bundle, tracker.FixedNoise())
    b = tracker.run_sequence(small_bundle, tracker.FixedNoise())
    assert a == b
    for f in {r.frame for r in a}:
        ids = [r.track_id for r in a if r.frame == f]
        assert len(ids) == len(set(ids))


def test_initial_covariance():
    p = msnet.init_params(msnet.MSNetConfig())
    rng = np.random.default_rng(0)
    for _ in range(100):
        det = _det(np.r_[rng.uniform(0, 1000, 2), rng.uniform(5, 200, 2)])
        v = rng.uniform(0, 80)
        c = tracker.initial_covariance(det, v, p)
        assert np.all(np.diag(c) > 0) and np.count_nonzero(c - np.diag(np.diag(c))) == 0
        np.testing.assert_array_equal(c, tracker.initial_covariance(det, v, p))
        noise = tracker.MSNetNoise(p)
        pred = np.r_[det.box + rng.normal(0, 3, 4), np.zeros(4)]
        from sglkf import kf_core
        r, pc = noise.measurement(v, det.box[None])
        s, cov, _ = kf_core.update(pred[None], c[None], det.box[None], r, pc)
        assert np.all(np.isfinite(s)) and np.all(np.isfinite(cov))


def test_msnet_tracker_runs(small_bundle):
    p = msnet.init_params(msnet.MSNetConfig())
    rows = tracker.run_sequence(small_bundle, tracker.MSNetNoise(p))
    assert rows and all(np.all(np.isfinite(r.box)) for r in rows)


def test_3d_tracking():
    b = synth.generate(synth.ScenarioConfig(n_frames=20, n_objects=5, box_dim=6, speed_profile=(0.0, 30.0), seed=8))
    rows = tracker.run_sequence(b, tracker.FixedNoise())
    assert rows and all(len(r.box) == 6 for r in rows)
    p = msnet.init_params(msnet.MSNetConfig.for_state_dim(12))
    assert tracker.run_sequence(b, tracker.MSNetNoise(p))
