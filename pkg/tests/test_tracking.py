import numpy as np
import pytest

from vidinsert import tracking as tr


def ncc_loop(image, template, alpha=None):
    th, tw = template.shape[:2]
    a = np.ones((th, tw)) if alpha is None else alpha.astype(float)
    out = np.zeros((image.shape[0] - th + 1, image.shape[1] - tw + 1))
    sel = a > 0
    t = template[sel]  # (K, C)
    t = t - t.mean(axis=0)
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            w = image[y: y + th, x: x + tw][sel]
            w = w - w.mean(axis=0)
            den = np.sqrt((w * w).sum() * (t * t).sum())
            out[y, x] = (w * t).sum() / den if den > 1e-12 else 0.0
    return out


def test_ncc_matches_loop(rng):
    for _ in range(5):
        img = rng.random((20, 23, 3))
        tmpl = rng.random((5, 7, 3))
        assert np.allclose(tr.ncc_map(img, tmpl), ncc_loop(img, tmpl), atol=1e-10)


def test_masked_ncc_matches_loop(rng):
    img = rng.random((18, 18, 3))
    tmpl = rng.random((7, 7, 3))
    alpha = rng.random((7, 7)) > 0.4
    assert np.allclose(tr.masked_ncc_map(img, tmpl, alpha), ncc_loop(img, tmpl, alpha), atol=1e-10)
    full = np.ones((7, 7), bool)
    assert np.allclose(tr.masked_ncc_map(img, tmpl, full), tr.ncc_map(img, tmpl), atol=1e-10)
    with pytest.raises(ValueError):
        tr.masked_ncc_map(img, tmpl, np.zeros((7, 7)))


def test_ncc_finds_exact_copy(rng):
    img = rng.random((30, 30, 3))
    s = tr.ncc_map(img, img[9:20, 4:15])
    assert np.unravel_index(np.argmax(s), s.shape) == (9, 4)
    assert s.max() == pytest.approx(1.0)
    assert not tr.ncc_map(np.ones((12, 12, 3)), img[:5, :5]).any()


def test_extract_patch_pads_with_zeros(rng):
    img = rng.random((10, 10, 3))
    p = tr.extract_patch(img, (0, 0), 2)
    assert p.shape == (5, 5, 3)
    assert not p[:2].any() and np.array_equal(p[2:, 2:], img[:3, :3])


def test_track_points_follows_shift(rng):
    base = rng.random((60, 60, 3))
    frames = np.stack([np.roll(base, (2 * f, 3 * f), axis=(0, 1)) for f in range(4)])
    xy, vis = tr.track_points(frames, np.array([[20.0, 25.0], [30.4, 30.0]]))
    for f in range(4):
        assert np.allclose(xy[0, f], [20 + 3 * f, 25 + 2 * f])
        assert np.allclose(xy[1, f], [30.4 + 3 * f, 30 + 2 * f])
    assert vis.all()


def test_relocate_identity_is_exact(rng):
    base = rng.random((48, 48, 3))
    frames = np.stack([np.roll(base, (f, 2 * f), axis=(0, 1)) for f in range(5)])
    gt = np.array([[[10.3 + 2 * f, 14.0 + f] for f in range(5)], [[30.0 + 2 * f, 20.6 + f] for f in range(5)]])
    vis = np.ones((2, 5), bool)
    vis[1, 2] = False
    pred, pvis, scores = tr.relocate_points(frames, frames, gt, vis)
    assert np.allclose(pred[vis], gt[vis], atol=1e-9)
    assert pvis[vis].all() and np.allclose(scores[vis], 1.0)
