import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sglkf import metrics
from sglkf.io_formats import ResultRow
from sglkf.metrics import EvalFrame, evaluate
from hota_oracle import brute_force_hota


def _frames(gt_tracks, pred_tracks, T, speeds=None):
    """``*_tracks``: {id: {frame: box}}."""
    out = []
    for t in range(T):
        g = [(i, b[t]) for i, b in sorted(gt_tracks.items()) if t in b]
        p = [(i, b[t]) for i, b in sorted(pred_tracks.items()) if t in b]
        out.append(EvalFrame(t, [i for i, _ in g], np.array([b for _, b in g]).reshape(len(g), 4),
                             [i for i, _ in p], np.array([b for _, b in p]).reshape(len(p), 4),
                             0.0 if speeds is None else speeds[t]))
    return out


def _random_toy(rng):
    T = int(rng.integers(1, 7))
    n_gt = int(rng.integers(0, 4))
    gt = {}
    for g in range(n_gt):
        start = rng.uniform(0, 30, 2)
        vel = rng.uniform(-3, 3, 2)
        size = rng.uniform(4, 10, 2)
        gt[g] = {t: np.r_[start + vel * t, size] for t in range(T) if rng.random() < 0.85}
    pred = {}
    for g, boxes in gt.items():
        for t, b in boxes.items():
            if rng.random() < 0.8:
                pid = 10 + g if rng.random() < 0.8 else int(rng.integers(10, 14))
                pred.setdefault(pid, {})
                if t not in pred[pid]:
                    pred[pid][t] = b + np.r_[rng.normal(0, 1.5, 2), rng.normal(0, 0.5, 2)]
    if rng.random() < 0.5:
        pred[20] = {t: np.r_[rng.uniform(0, 30, 2), 6.0, 6.0] for t in range(T) if rng.random() < 0.5}
    return _frames(gt, pred, T)


def test_perfect_tracking_scores_100():
    gt = {1: {t: np.array([10 + 3 * t, 20, 8, 6.0]) for t in range(5)},
          2: {t: np.array([40, 20 + t, 5, 5.0]) for t in range(1, 5)}}
    rep = evaluate(_frames(gt, gt, 5))
    assert rep.HOTA == pytest.approx(100) and rep.DetA == pytest.approx(100) and rep.AssA == pytest.approx(100)
    assert rep.MOTA == 100 and rep.IDSW == 0 and rep.LocA == pytest.approx(100)


def test_no_predictions_scores_zero():
    gt = {1: {t: np.array([10, 20, 8, 6.0]) for t in range(3)}}
    rep = evaluate(_frames(gt, {}, 3))
    assert rep.HOTA == 0 and rep.DetRe == 0 and rep.CLR_FN == 3


def test_vacuous_empty():
    rep = evaluate(_frames({}, {}, 3))
    assert rep.vacuous and rep.HOTA == 100


def test_id_split_toy():
    box = np.array([10, 10, 5, 5.0])
    gt = {1: {0: box, 1: box, 2: box}}
    pred = {7: {0: box}, 8: {1: box, 2: box}}
    frames = _frames(gt, pred, 3)
    rep = evaluate(frames)
    assert rep.IDSW == 1
    # every alpha: DetA 1, AssA = (1/3 + 2 * 2/3) / 3 = 5/9
    assert rep.HOTA == pytest.approx(100 * np.sqrt(5 / 9), abs=1e-9)
    assert rep.HOTA == pytest.approx(brute_force_hota(frames, metrics.ALPHAS), abs=1e-9)


def test_hota_matches_brute_force_oracle(rng):
    for _ in range(300):
        frames = _random_toy(rng)
        assert evaluate(frames).HOTA == pytest.approx(brute_force_hota(frames, metrics.ALPHAS), abs=1e-9)


def test_percentages_in_range(rng):
    for _ in range(50):
        rep = evaluate(_random_toy(rng))
        for k in ("HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA", "MOTP"):
            assert 0 <= getattr(rep, k) <= 100 + 1e-9


def test_mota_can_be_negative():
    gt = {1: {0: np.array([10, 10, 5, 5.0])}}
    pred = {k: {0: np.array([50 + 10 * k, 50, 5, 5.0])} for k in range(3)}
    assert evaluate(_frames(gt, pred, 1)).MOTA == -300.0


def test_id_permutation_invariance(rng):
    for _ in range(20):
        frames = _random_toy(rng)
        remapped = [EvalFrame(f.frame, f.gt_ids * 7 + 3, f.gt_boxes, 100 - f.pred_ids, f.pred_boxes) for f in frames]
        a, b = evaluate(frames), evaluate(remapped)
        assert a.HOTA == pytest.approx(b.HOTA, abs=1e-9) and a.IDSW == b.IDSW


def test_deleting_correct_prediction_never_raises_detre(rng):
    gt = {g: {t: np.array([10 + 20 * g, 10 + t, 6, 6.0]) for t in range(5)} for g in range(3)}
    full = evaluate(_frames(gt, gt, 5))
    fewer = {g: dict(b) for g, b in gt.items()}
    del fewer[1][2]
    assert evaluate(_frames(gt, fewer, 5)).DetRe <= full.DetRe


def test_duplicate_predictions_do_not_raise_detpr():
    gt = {g: {t: np.array([10 + 20 * g, 10 + t, 6, 6.0]) for t in range(4)} for g in range(2)}
    base = evaluate(_frames(gt, gt, 4))
    dup = dict(gt)
    dup.update({g + 50: b for g, b in gt.items()})
    assert evaluate(_frames(gt, dup, 4)).DetPr <= base.DetPr


def test_evaluate_many_pools_sequences(rng):
    seqs = [_random_toy(rng) for _ in range(4)]
    many = metrics.evaluate_many(seqs)
    assert many.n_gt == sum(evaluate(s).n_gt for s in seqs)
    assert many.IDSW == sum(evaluate(s).IDSW for s in seqs)
    single = metrics.evaluate_many([seqs[0]])
    assert single.HOTA == pytest.approx(evaluate(seqs[0]).HOTA, abs=1e-12)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        EvalFrame(0, [1, 1], np.zeros((2, 4)) + 1, [], np.zeros((0, 4)))


def test_report_serialization():
    box = np.array([10, 10, 5, 5.0])
    rep = evaluate(_frames({1: {0: box}}, {1: {0: box}}, 1))
    d = rep.to_dict()
    assert d["HOTA"] == pytest.approx(100)
    assert rep.to_json().startswith("{")
    assert rep.to_text().splitlines()[0].split()[0] == "HOTA"


def test_speed_buckets_single_and_identical():
    box = np.array([10, 10, 5, 5.0])
    gt = {1: {t: box + [t, 0, 0, 0] for t in range(8)}}
    pred = {1: {t: box + [t + 0.5, 0, 0, 0] for t in range(8)}}
    b0 = metrics.speed_bucket_analysis([_frames(gt, pred, 8, speeds=[0.0] * 8)])
    assert list(b0) == [0.0]
    mixed = metrics.speed_bucket_analysis([_frames(gt, pred, 8, speeds=[0, 0, 20, 20, 40, 40, 60, 60])])
    ious = {round(v["mean_iou"], 12) for v in mixed.values()}
    assert len(mixed) == 4 and len(ious) == 1
    csv_text = metrics.buckets_to_csv(mixed)
    assert csv_text.splitlines()[0] == "speed,frames,matches,gt,mean_iou,idsw,idsw_rate"
    assert len(csv_text.splitlines()) == 5


def test_bucket_of():
    assert metrics.bucket_of(23.0, metrics.BUCKETS_2D) == 20.0
    assert metrics.bucket_of(30.0, metrics.BUCKETS_2D) is None
    assert metrics.bucket_of(36.0, metrics.BUCKETS_3D) == 35.0


def test_frames_from_bundle_perfect_rows(small_bundle):
    rows = [ResultRow(t, g.track_id, g.cls, g.box, 1.0) for t, gs in small_bundle.gt.items() for g in gs]
    rep = metrics.evaluate(metrics.frames_from_bundle(small_bundle, rows))
    assert rep.HOTA == pytest.approx(100)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_property(seed):
    frames = _random_toy(np.random.default_rng(seed))
    assert evaluate(frames).HOTA == pytest.approx(brute_force_hota(frames, metrics.ALPHAS), abs=1e-9)
