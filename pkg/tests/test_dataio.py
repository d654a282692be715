import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidinsert.dataio import (
    BundleParseError,
    BundleValidationError,
    ReferenceObject,
    SceneBundle,
    Track,
    load_scene_bundle,
    save_scene_bundle,
)
from vidinsert.synthgen import crop_reference, generate_scene


def random_bundle(rng, n=8, h=64, w=64, with_ref=True):
    frames = rng.random((n, h, w, 3)).astype(np.float32)
    masks = rng.random((n, h, w)) > 0.7
    tracks = [Track(rng.uniform(0, [w - 1, h - 1], (n, 2)), rng.random(n) > 0.3, obj) for obj in (0, 0, 2)]
    ref = None
    if with_ref:
        m = np.zeros((h, w), bool)
        m[20:40, 22:42] = True
        ref = crop_reference(frames[0], m, np.array([[25.0, 25.0], [30.5, 31.25]]), 32)
    return SceneBundle(frames, masks, tracks, ref, {"fps": 8.0, "source": "synthetic-video", "seed": 3})


def test_save_writes_one_file_per_frame(tmp_path, rng):
    b = random_bundle(rng)
    save_scene_bundle(b, tmp_path / "s")
    assert len(list((tmp_path / "s" / "frames").glob("*.png"))) == 8
    assert len(list((tmp_path / "s" / "masks").glob("*.png"))) == 8
    for name in ("ref.png", "ref_alpha.png", "tracks.json", "meta.json"):
        assert (tmp_path / "s" / name).exists()


def test_round_trip_within_quantization(tmp_path, rng):
    b = random_bundle(rng)
    save_scene_bundle(b, tmp_path / "s")
    c = load_scene_bundle(tmp_path / "s")
    assert c.n_frames == b.n_frames
    assert np.abs(c.frames - b.frames).max() <= 1 / 255 + 1e-6
    assert np.array_equal(c.masks, b.masks)
    for t0, t1 in zip(b.tracks, c.tracks):
        assert np.abs(t0.xy - t1.xy).max() <= 5e-4
        assert np.array_equal(t0.vis, t1.vis)
        assert t0.obj == t1.obj
    assert np.allclose(c.reference.keypoints, b.reference.keypoints, atol=5e-4)
    assert np.array_equal(c.reference.alpha, b.reference.alpha)


def test_save_load_save_is_byte_identical(tmp_path, rng):
    b = random_bundle(rng)
    save_scene_bundle(b, tmp_path / "a")
    save_scene_bundle(load_scene_bundle(tmp_path / "a"), tmp_path / "b")
    for name in ("tracks.json", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generated_scene_round_trips(tmp_path):
    b = generate_scene(5, 8, 64, 64, n_sprites=2)
    save_scene_bundle(b, tmp_path / "s")
    c = load_scene_bundle(tmp_path / "s")
    assert len(c.tracks) == len(b.tracks)
    assert c.meta["seed"] == 5


def test_out_of_range_visible_track_rejected(rng):
    b = random_bundle(rng, with_ref=False)
    b.tracks[0].xy[2] = (70.0, 3.0)
    b.tracks[0].vis[2] = True
    with pytest.raises(BundleValidationError, match="outside"):
        b.validate()
    # the same coordinate is fine when the point is not visible
    b.tracks[0].vis[2] = False
    b.validate()


def test_missing_meta_is_fatal(tmp_path, rng):
    save_scene_bundle(random_bundle(rng), tmp_path / "s")
    (tmp_path / "s" / "meta.json").unlink()
    with pytest.raises(FileNotFoundError, match="missing meta.json"):
        load_scene_bundle(tmp_path / "s")


def test_malformed_tracks_reports_line(tmp_path, rng):
    save_scene_bundle(random_bundle(rng), tmp_path / "s")
    (tmp_path / "s" / "tracks.json").write_text('[\n{"xy": [[1, 2]],\n "vis": [1,, 0]}\n]\n')
    with pytest.raises(BundleParseError) as err:
        load_scene_bundle(tmp_path / "s")
    assert err.value.lineno == 3
    assert "line 3" in str(err.value)


def test_short_track_rejected(tmp_path, rng):
    save_scene_bundle(random_bundle(rng), tmp_path / "s")
    p = tmp_path / "s" / "tracks.json"
    data = json.loads(p.read_text())
    data[0]["xy"] = data[0]["xy"][:-1]
    data[0]["vis"] = data[0]["vis"][:-1]
    p.write_text(json.dumps(data))
    with pytest.raises(BundleValidationError, match="track 0"):
        load_scene_bundle(tmp_path / "s")


def test_reference_invariants():
    img = np.zeros((16, 16, 3), np.float32)
    alpha = np.zeros((16, 16), bool)
    alpha[5:11, 5:11] = True
    img[alpha] = 0.7
    ReferenceObject(img, alpha).validate()
    bad = img.copy()
    bad[0, 0] = 0.2
    with pytest.raises(BundleValidationError, match="background"):
        ReferenceObject(bad, alpha).validate()
    off = np.zeros_like(alpha)
    off[0:4, 0:4] = True
    with pytest.raises(BundleValidationError, match="centroid"):
        ReferenceObject(img * off[..., None], off).validate()


violations = st.sampled_from(["one-frame", "value-range", "mask-value", "track-length", "source", "fps", "size-mismatch"])


@settings(max_examples=40, deadline=None)
@given(kind=violations, seed=st.integers(0, 10_000))
def test_random_violations_rejected(kind, seed):
    rng = np.random.default_rng(seed)
    n, h, w = 4, 16, 16
    frames = rng.random((n, h, w, 3)).astype(np.float32)
    masks = rng.random((n, h, w)) > 0.5
    tracks = [Track(rng.uniform(0, 15, (n, 2)), np.ones(n, bool))]
    meta = {"fps": 8.0, "source": "synthetic-video"}
    if kind == "one-frame":
        frames, masks, tracks = frames[:1], masks[:1], [Track(tracks[0].xy[:1], tracks[0].vis[:1])]
    elif kind == "value-range":
        frames[rng.integers(n), 0, 0, 0] = 1.0 + rng.uniform(0.01, 1)
    elif kind == "mask-value":
        masks = masks.astype(np.float32)
        masks[0, 0, 0] = rng.uniform(0.1, 0.9)
    elif kind == "track-length":
        tracks = [Track(tracks[0].xy[:-1], tracks[0].vis[:-1])]
    elif kind == "source":
        meta["source"] = "webcam"
    elif kind == "fps":
        meta["fps"] = -float(rng.uniform(0, 5))
    elif kind == "size-mismatch":
        masks = masks[:, :-1]
    with pytest.raises(BundleValidationError):
        SceneBundle(frames, masks, tracks, None, meta).validate()
