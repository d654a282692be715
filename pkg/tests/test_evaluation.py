import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidinsert import evaluation as ev
from vidinsert import trajectory as tj
from vidinsert.dataio import ReferenceObject
from vidinsert.inference import SamplerConfig
from vidinsert.synthgen import PairOptions
from vidinsert.training import TrainConfig


def test_psnr_cap_and_known_value(rng):
    src = rng.random((3, 16, 16, 3))
    boxes = tj.linear_box_sequence([2, 2, 6, 6], [8, 8, 12, 12], 3)
    assert ev.psnr_unedited(src, src, boxes) == 100.0
    shifted = np.clip(src, 0, 0.9) + 0.1
    edited = np.where(boxes.masks(16, 16)[..., None], rng.random(src.shape), shifted)
    base = np.clip(src, 0, 0.9)
    assert ev.psnr_unedited(edited, base, boxes) == pytest.approx(20.0)
    with pytest.raises(ValueError, match="no unedited"):
        ev.psnr_unedited(src, src, np.ones((3, 16, 16), bool))


def test_psnr_matches_loop(rng):
    src, out = rng.random((2, 4, 12, 12, 3))
    masks = rng.random((4, 12, 12)) > 0.5
    total, count = 0.0, 0
    for f in range(4):
        for y in range(12):
            for x in range(12):
                if not masks[f, y, x]:
                    total += ((out[f, y, x] - src[f, y, x]) ** 2).sum()
                    count += 3
    assert ev.psnr_unedited(out, src, masks) == pytest.approx(-10 * math.log10(total / count), abs=1e-9)


def score_loop(pred, pvis, gt, gvis, thr):
    jac, delta = [], []
    for t in thr:
        tp = fp = fn = hit = n_vis = 0
        for p in range(gt.shape[0]):
            for f in range(gt.shape[1]):
                d = math.hypot(*(pred[p, f] - gt[p, f]))
                w = d < t
                if gvis[p, f]:
                    n_vis += 1
                    hit += w
                    if pvis[p, f] and w:
                        tp += 1
                    else:
                        fn += 1
                if pvis[p, f] and not (gvis[p, f] and w):
                    fp += 1
        jac.append(tp / (tp + fp + fn))
        delta.append(hit / n_vis)
    return np.mean(jac), np.mean(delta), np.mean(pvis == gvis), jac, delta


def test_score_tracks_matches_loop(rng):
    thr = ev.default_thresholds(64, 64)
    for _ in range(20):
        gt = rng.uniform(0, 64, (6, 8, 2))
        pred = gt + rng.normal(0, 1.0, gt.shape)
        gvis, pvis = rng.random((2, 6, 8)) > 0.3
        gvis[0, 0] = True
        rep = ev.score_tracks(pred, pvis, gt, gvis, thr)
        aj, d, oa, jac, delta = score_loop(pred, pvis, gt, gvis, thr)
        assert rep.aj == pytest.approx(aj, abs=1e-9)
        assert rep.delta_avg_vis == pytest.approx(d, abs=1e-9)
        assert rep.oa == pytest.approx(oa, abs=1e-9)
        assert np.allclose(rep.jaccard, jac, atol=1e-9) and np.allclose(rep.delta, delta, atol=1e-9)


def test_three_pixel_shift_at_256():
    gt = np.zeros((4, 5, 2)) + 100
    vis = np.ones((4, 5), bool)
    rep = ev.score_tracks(gt + [3.0, 0.0], vis, gt, vis, ev.default_thresholds(256, 256))
    assert rep.delta_avg_vis == pytest.approx(0.6)
    assert rep.aj == pytest.approx(0.6)
    assert rep.oa == 1.0


def test_thresholds_at_64():
    assert ev.default_thresholds(64, 64) == [0.25, 0.5, 1.0, 2.0, 4.0]
    assert ev.default_thresholds(64, 96) == [0.25, 0.5, 1.0, 2.0, 4.0]


def test_score_tracks_errors():
    vis = np.ones((1, 3), bool)
    xy = np.zeros((1, 3, 2))
    with pytest.raises(ValueError, match="no tracks"):
        ev.score_tracks(np.zeros((0, 3, 2)), np.zeros((0, 3), bool), np.zeros((0, 3, 2)), np.zeros((0, 3), bool), [1])
    with pytest.raises(ValueError, match="visible"):
        ev.score_tracks(xy, vis, xy, ~vis, [1])
    with pytest.raises(ValueError, match="ascending"):
        ev.score_tracks(xy, vis, xy, vis, [2, 1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_delta_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 64, (5, 6, 2))
    vis = rng.random((5, 6)) > 0.2
    vis[0, 0] = True
    rep = ev.score_tracks(gt + rng.normal(0, 2, gt.shape), rng.random((5, 6)) > 0.2, gt, vis, [0.5, 1, 2, 4, 8, 16])
    assert all(b >= a for a, b in zip(rep.delta, rep.delta[1:]))
    assert 0 <= rep.aj <= 1 and 0 <= rep.oa <= 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.floats(0, 4), ds=st.floats(0, 4))
def test_larger_corruption_never_scores_higher(seed, s, ds):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 64, (5, 6, 2))
    d = rng.normal(0, 1, gt.shape)
    vis = np.ones((5, 6), bool)
    thr = ev.default_thresholds(64, 64)
    a = ev.score_tracks(gt + s * d, vis, gt, vis, thr)
    b = ev.score_tracks(gt + (s + ds) * d, vis, gt, vis, thr)
    assert b.aj <= a.aj and b.delta_avg_vis <= a.delta_avg_vis


def test_self_tracking_is_perfect(rng):
    base = rng.random((64, 64, 3))
    frames = np.stack([np.roll(base, (f, f), axis=(0, 1)) for f in range(5)])
    gt = np.array([[[x + f, y + f] for f in range(5)] for x, y in ((10, 12), (30.5, 20), (44, 41.25))])
    vis = np.ones((3, 5), bool)
    rep = ev.tracking_metrics(frames, frames, gt, vis)
    assert rep.aj == 1.0 and rep.delta_avg_vis == 1.0 and rep.oa == 1.0
    with pytest.raises(ValueError, match="frames"):
        ev.tracking_metrics(frames[:4], frames[:4], gt, vis)


def test_id_similarity_self_and_warning(tiny_model, rng):
    img = np.zeros((32, 32, 3), np.float32)
    alpha = np.zeros((32, 32), bool)
    alpha[6:26, 8:24] = True
    img[alpha] = rng.random((alpha.sum(), 3))
    ref = ReferenceObject(img, alpha)
    frames = rng.random((3, 64, 64, 3)).astype(np.float32)
    frames[:, 10:42, 20:52] = img
    boxes = tj.BoxSequence(np.array([[20, 10, 52, 42]] * 3), False)
    assert ev.id_similarity(frames, boxes, ref, tiny_model) == pytest.approx(1.0, abs=1e-5)
    frames[:, 10:42, 20:52] = 0
    with pytest.warns(UserWarning, match="all-black"):
        ev.id_similarity(frames, boxes, ref, tiny_model)


def test_square_crop_pads_centered():
    frame = np.ones((20, 20, 3), np.float32)
    out = ev.square_crop(frame, (0, 5, 20, 15), 20)
    assert out.shape == (20, 20, 3)
    assert np.allclose(out[5:15], 1) and np.allclose(out[:4], 0) and np.allclose(out[16:], 0)


def test_locate_object_recovers_centroid(rng):
    frames = np.full((4, 64, 64, 3), 0.3, np.float32)
    masks = np.zeros((4, 64, 64), bool)
    yy, xx = np.mgrid[0:9, 0:9]
    disk = (yy - 4) ** 2 + (xx - 4) ** 2 <= 16
    tex = rng.random((9, 9, 3)).astype(np.float32)
    for f, (x, y) in enumerate([(10, 12), (20, 18), (30, 25), (40, 30)]):
        frames[f, y: y + 9, x: x + 9][disk] = tex[disk]
        masks[f, y: y + 9, x: x + 9] = disk
    tmpl = ev.object_template(frames[0], masks[0])
    boxes = tj.box_sequence_from_masks(masks, 0.1, 0.0)
    found = ev.locate_object(frames, tmpl, boxes)
    assert np.allclose(found, ev.mask_centroids(masks), atol=1e-9)
    with pytest.raises(ValueError):
        ev.object_template(frames[0], np.zeros((64, 64), bool))


def test_heldout_evaluation_end_to_end(tiny_model, tmp_path):
    cfg = TrainConfig(model=tiny_model.cfg, pairs=PairOptions(ref_size=32))
    results = ev.evaluate_heldout(tiny_model, cfg, SamplerConfig(steps=1, guidance=2.0), n_scenes=2)
    assert [r.scene for r in results] == [0, 1]
    for r in results:
        assert r.psnr == 100.0  # outside-box pixels are copied verbatim
        assert -1 <= r.id_sim <= 1 and 0 <= r.aj <= 1 and r.center_dev >= 0
    summary = ev.write_report(results, tmp_path, plot=True)
    assert summary["n_scenes"] == 2
    assert (tmp_path / "thresholds.png").exists() and (tmp_path / "summary.csv").exists()
    data = json.loads((tmp_path / "report.json").read_text())
    assert len(data["scenes"]) == 2 and data["mean"]["psnr"] == 100.0
