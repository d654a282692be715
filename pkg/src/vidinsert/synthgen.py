"""Procedural sprite videos, image-to-video simulation and training-pair assembly."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import map_coordinates

from . import trajectory as tj
from .dataio import ReferenceObject, SceneBundle, Track, TrainingSample

log = logging.getLogger(__name__)

SHAPES = ("ellipse", "polygon-3", "polygon-4", "polygon-5", "polygon-6")
TEXTURES = ("stripes", "dots", "solid", "two-tone")
PATHS = ("linear", "sine", "arc")
ERASE_FILL = 0.5
SIZE_RANGE = (0.15, 0.45)
MAX_ATTEMPTS = 100
SUPERSAMPLE = 2


@dataclass
class SpriteSpec:
    shape: str
    color: np.ndarray  # RGB in [0, 1]
    size: float  # diameter as a fraction of min(H, W)
    texture: str
    path: str
    start: np.ndarray  # (x, y)
    end: np.ndarray
    amplitude: float = 0.0
    rotation_rate: float = 0.0  # radians / frame
    rotation0: float = 0.0
    aspect: float = 1.0  # ellipse minor/major
    occluder: bool = False
    secondary: Optional[np.ndarray] = None

    def radius(self, h: int, w: int) -> float:
        return self.size * min(h, w) / 2.0

    def position(self, f: int, n_frames: int) -> np.ndarray:
        u = f / max(n_frames - 1, 1)
        p = (1 - u) * self.start + u * self.end
        d = self.end - self.start
        nrm = np.linalg.norm(d)
        normal = np.array([-d[1], d[0]]) / nrm if nrm > 0 else np.array([0.0, 1.0])
        if self.path == "sine":
            p = p + normal * self.amplitude * math.sin(2 * math.pi * u)
        elif self.path == "arc":
            p = p + normal * self.amplitude * 4 * u * (1 - u)
        return p

    def angle(self, f: int) -> float:
        return self.rotation0 + self.rotation_rate * f

    def local_keypoints(self, h: int, w: int) -> np.ndarray:
        r = self.radius(h, w)
        if self.shape == "ellipse":
            a, b = 0.85 * r, 0.85 * r * self.aspect
            boundary = [(a, 0), (0, b), (-a, 0), (0, -b)]
        else:
            k = int(self.shape.split("-")[1])
            boundary = [(0.85 * r * math.cos(2 * math.pi * j / k), 0.85 * r * math.sin(2 * math.pi * j / k)) for j in range(k)]
        g = 0.3 * r
        grid = [(gx, gy) for gy in (-g, 0.0, g) for gx in (-g, 0.0, g)]
        return np.array(boundary + grid, dtype=np.float64)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def sprite_keypoints(spec: SpriteSpec, f: int, n_frames: int, h: int, w: int) -> np.ndarray:
    return spec.position(f, n_frames) + spec.local_keypoints(h, w) @ _rot(spec.angle(f)).T


def _local_coords(spec: SpriteSpec, f, n_frames, xs, ys, h, w):
    c = spec.position(f, n_frames)
    th = spec.angle(f)
    dx, dy = xs - c[0], ys - c[1]
    ct, st = math.cos(th), math.sin(th)
    return ct * dx + st * dy, -st * dx + ct * dy


def _inside(spec: SpriteSpec, u, v, r):
    if spec.shape == "ellipse":
        return (u / r) ** 2 + (v / (r * spec.aspect)) ** 2 <= 1.0
    k = int(spec.shape.split("-")[1])
    inside = np.ones(u.shape, dtype=bool)
    apothem = r * math.cos(math.pi / k)
    for j in range(k):
        # edge between vertices j and j+1 has outward normal at angle (2j+1)pi/k
        a = (2 * j + 1) * math.pi / k
        inside &= u * math.cos(a) + v * math.sin(a) <= apothem
    return inside


def _texture(spec: SpriteSpec, u, v, r):
    base = np.broadcast_to(spec.color, u.shape + (3,)).astype(np.float64)
    dark = spec.color * 0.4
    period = max(3.0, 0.6 * r)
    if spec.texture == "stripes":
        sel = (np.floor(u / period) % 2).astype(bool)
        return np.where(sel[..., None], dark, base)
    if spec.texture == "dots":
        gu = u - period * np.round(u / period)
        gv = v - period * np.round(v / period)
        sel = gu ** 2 + gv ** 2 <= (0.3 * period) ** 2
        return np.where(sel[..., None], dark, base)
    if spec.texture == "two-tone":
        sec = spec.secondary if spec.secondary is not None else 1.0 - spec.color
        return np.where((v > 0)[..., None], sec, base)
    return base


def _sample_grid(h, w, ss):
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    return np.meshgrid(xs, ys)


def _downsample(img, ss):
    hh, ww = img.shape[:2]
    return img.reshape(hh // ss, ss, ww // ss, ss, *img.shape[2:]).mean(axis=(1, 3))


def render_sprite(spec: SpriteSpec, f: int, n_frames: int, h: int, w: int):
    """Returns (rgb (H,W,3), coverage (H,W) in [0,1], silhouette mask (H,W) at pixel centers)."""
    r = spec.radius(h, w)
    xs, ys = _sample_grid(h, w, SUPERSAMPLE)
    u, v = _local_coords(spec, f, n_frames, xs, ys, h, w)
    ins = _inside(spec, u, v, r)
    rgb = _texture(spec, u, v, r) * ins[..., None]
    cov = _downsample(ins.astype(np.float64), SUPERSAMPLE)
    col = _downsample(rgb, SUPERSAMPLE)
    col = np.where(cov[..., None] > 0, col / np.maximum(cov[..., None], 1e-9), 0.0)
    pys, pxs = np.mgrid[0:h, 0:w].astype(np.float64)
    pu, pv = _local_coords(spec, f, n_frames, pxs, pys, h, w)
    mask = _inside(spec, pu, pv, r)
    return col, cov, mask


def render_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    ang = rng.uniform(0, 2 * math.pi)
    t = ((xs / w - 0.5) * math.cos(ang) + (ys / h - 0.5) * math.sin(ang)) + 0.5
    bg = (1 - t[..., None]) * c0 + t[..., None] * c1
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        s = rng.uniform(0.15, 0.35) * min(h, w)
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
        bg = bg + g[..., None] * rng.uniform(-0.25, 0.25, 3)
    return np.clip(bg, 0.0, 1.0)


def random_sprite(rng: np.random.Generator, h: int, w: int, n_frames: int, occluder: bool = False, static: bool = False) -> SpriteSpec:
    m = min(h, w)
    for _ in range(MAX_ATTEMPTS):
        spec = SpriteSpec(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=rng.uniform(0.1, 1.0, 3),
            size=float(rng.uniform(*SIZE_RANGE)),
            texture=TEXTURES[rng.integers(len(TEXTURES))],
            path=PATHS[rng.integers(len(PATHS))],
            start=np.zeros(2),
            end=np.zeros(2),
            rotation_rate=float(rng.uniform(-0.1, 0.1)),
            rotation0=float(rng.uniform(0, 2 * math.pi)),
            aspect=float(rng.uniform(0.6, 1.0)),
            occluder=occluder,
            secondary=rng.uniform(0.1, 1.0, 3),
        )
        r = spec.radius(h, w)
        spec.start = np.array([rng.uniform(r, w - 1 - r), rng.uniform(r, h - 1 - r)])
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.1, 0.6) * m
        spec.end = spec.start + dist * np.array([math.cos(ang), math.sin(ang)])
        spec.amplitude = float(rng.uniform(0, 0.12) * m) if spec.path != "linear" else 0.0
        if static:
            spec.end, spec.amplitude, spec.rotation_rate = spec.start.copy(), 0.0, 0.0
        if path_fits(spec, n_frames, h, w):
            return spec
    raise RuntimeError(f"could not place a sprite inside a {h}x{w} frame after {MAX_ATTEMPTS} attempts")


def path_fits(spec: SpriteSpec, n_frames: int, h: int, w: int) -> bool:
    r = spec.radius(h, w)
    pos = np.array([spec.position(f, n_frames) for f in range(n_frames)])
    if (pos[:, 0] < r).any() or (pos[:, 0] > w - 1 - r).any() or (pos[:, 1] < r).any() or (pos[:, 1] > h - 1 - r).any():
        return False
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return bool(len(steps) == 0 or steps.max() <= 0.5 * r)


@dataclass
class Occluder:
    vertical: bool
    center: float
    half_width: float
    color: np.ndarray

    def covers(self, pts: np.ndarray) -> np.ndarray:
        coord = pts[:, 0] if self.vertical else pts[:, 1]
        return np.abs(coord - self.center) <= self.half_width

    def coverage(self, h, w):
        xs, ys = _sample_grid(h, w, SUPERSAMPLE)
        coord = xs if self.vertical else ys
        return _downsample((np.abs(coord - self.center) <= self.half_width).astype(np.float64), SUPERSAMPLE)


def render_scene(specs, n_frames: int, h: int, w: int, background: np.ndarray, occluder: Optional[Occluder] = None, fps: float = 8.0):
    """Compose sprites over a static background; ``specs[0]`` is the edit target and is drawn on top."""
    frames = np.zeros((n_frames, h, w, 3), dtype=np.float32)
    masks = np.zeros((n_frames, h, w), dtype=bool)
    occ_cov = occluder.coverage(h, w) if occluder is not None else None
    for f in range(n_frames):
        img = background.copy()
        for k in list(range(1, len(specs))) + [0]:
            col, cov, mask = render_sprite(specs[k], f, n_frames, h, w)
            img = img * (1 - cov[..., None]) + col * cov[..., None]
            if k == 0:
                masks[f] = mask
        if occ_cov is not None:
            img = img * (1 - occ_cov[..., None]) + occluder.color * occ_cov[..., None]
        frames[f] = np.clip(img, 0, 1)
    tracks = []
    for k, spec in enumerate(specs):
        kps = np.stack([sprite_keypoints(spec, f, n_frames, h, w) for f in range(n_frames)], axis=1)  # (P, N, 2)
        for p in range(kps.shape[0]):
            vis = np.ones(n_frames, dtype=bool)
            if occluder is not None:
                vis &= ~occluder.covers(kps[p])
            if k != 0:
                # hidden under the target sprite
                for f in range(n_frames):
                    x, y = int(round(kps[p, f, 0])), int(round(kps[p, f, 1]))
                    if 0 <= x < w and 0 <= y < h and masks[f, y, x]:
                        vis[f] = False
            tracks.append(Track(kps[p], vis, obj=k))
    return SceneBundle(frames, masks, tracks, None, {"fps": float(fps), "source": "synthetic-video"})


def generate_scene(seed: int, n_frames: int = 12, h: int = 64, w: int = 64, n_sprites: int = 1, p_occluder: float = 0.3) -> SceneBundle:
    if n_frames < 2:
        raise ValueError("a scene needs at least 2 frames")
    if h < 32 or w < 32:
        raise ValueError("scene must be at least 32x32")
    if not 1 <= n_sprites <= 3:
        raise ValueError("n_sprites must be in 1..3")
    rng = np.random.default_rng(seed)
    background = render_background(rng, h, w)
    with_occluder = bool(rng.random() < p_occluder)
    specs = [random_sprite(rng, h, w, n_frames, occluder=with_occluder)]
    specs += [random_sprite(rng, h, w, n_frames) for _ in range(n_sprites - 1)]
    occluder = None
    if with_occluder:
        f_cross = int(rng.integers(n_frames))
        c = specs[0].position(f_cross, n_frames)
        vertical = bool(rng.random() < 0.5)
        occluder = Occluder(vertical, float(c[0] if vertical else c[1]), float(rng.uniform(1.5, 2.5)), rng.uniform(0.0, 0.3, 3))
    bundle = render_scene(specs, n_frames, h, w, background, occluder)
    bundle.meta["seed"] = int(seed)
    return bundle.validate()


def generate_still(seed: int, h: int = 96, w: int = 96):
    """A single high-resolution frame with one target sprite: (image, mask, keypoints)."""
    rng = np.random.default_rng(seed)
    background = render_background(rng, h, w)
    spec = random_sprite(rng, h, w, 2, static=True)
    spec.size = float(np.clip(spec.size * 2 / 3, SIZE_RANGE[0] * 2 / 3, SIZE_RANGE[1]))
    col, cov, mask = render_sprite(spec, 0, 2, h, w)
    image = np.clip(background * (1 - cov[..., None]) + col * cov[..., None], 0, 1).astype(np.float32)
    return image, mask, sprite_keypoints(spec, 0, 2, h, w)


def _bilinear(image: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return map_coordinates(image, [Y, X], order=1, mode="nearest")
    return np.stack([map_coordinates(image[..., c], [Y, X], order=1, mode="nearest") for c in range(image.shape[2])], axis=-1)


def _default_out_size(hi: int, wi: int):
    return max(8, int(hi / 1.5) // 8 * 8), max(8, int(wi / 1.5) // 8 * 8)


def simulate_video_from_image(
    image: np.ndarray,
    mode: str = "translate",
    n_frames: int = 9,
    seed: int = 0,
    out_size: Optional[tuple] = None,
    mask: Optional[np.ndarray] = None,
    points: Optional[np.ndarray] = None,
    scale_end: Optional[float] = None,
    fps: float = 8.0,
) -> SceneBundle:
    """Turn a still image into a clip by moving a sampling window at equal intervals.

    ``translate`` slides an output-sized window; ``zoom-crop`` shrinks a window
    from the full image down to ``scale_end`` of it. Each window is resampled
    bilinearly to the output size. Tracks of ``points`` (image coordinates)
    are their exact images under the window transforms.
    """
    if n_frames < 2:
        raise ValueError("a video needs at least 2 frames")
    if mode not in ("translate", "zoom-crop"):
        raise ValueError(f"unknown mode {mode!r}")
    image = np.asarray(image, dtype=np.float64)
    hi, wi = image.shape[:2]
    h, w = out_size or _default_out_size(hi, wi)
    if hi < 1.5 * h or wi < 1.5 * w:
        raise ValueError(f"image is {hi}x{wi}; at least {math.ceil(1.5 * h)}x{math.ceil(1.5 * w)} is required for a {h}x{w} output")
    rng = np.random.default_rng(seed)
    if points is None:
        points = tj.grid_points(hi, wi, mask=mask) if mask is not None else tj.grid_points(hi, wi)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)

    lo, hi_off = np.zeros(2), np.array([wi - w, hi - h], dtype=np.float64)
    if mask is not None and mask.any():
        # translate offsets that keep the whole object in view
        ys, xs = np.nonzero(mask)
        lo = np.maximum(lo, np.array([xs.max() + 2 - w, ys.max() + 2 - h], dtype=np.float64))
        hi_off = np.minimum(hi_off, np.array([xs.min() - 1, ys.min() - 1], dtype=np.float64))
    for _ in range(MAX_ATTEMPTS):
        windows = _sample_windows(rng, mode, n_frames, hi, wi, h, w, scale_end, (lo, hi_off))
        if windows is not None and (mask is None or _object_inside(mask, windows, h, w)):
            break
    else:
        raise RuntimeError(f"no {mode} window path keeps the object in view")
    idx = np.arange(h, dtype=np.float64)
    frames, masks, xy = [], [], []
    for x0, y0, x1, y1 in windows:
        sx, sy = (x1 - x0) / w, (y1 - y0) / h
        X = x0 + (np.arange(w) + 0.5) * sx - 0.5
        Y = y0 + (idx + 0.5) * sy - 0.5
        XX, YY = np.meshgrid(X, Y)
        frames.append(np.clip(_bilinear(image, XX, YY), 0, 1))
        if mask is not None:
            masks.append(_bilinear(mask.astype(np.float64), XX, YY) >= 0.5)
        else:
            masks.append(np.zeros((h, w), dtype=bool))
        xy.append(np.stack([(points[:, 0] + 0.5 - x0) / sx - 0.5, (points[:, 1] + 0.5 - y0) / sy - 0.5], axis=1))
    xy = np.stack(xy, axis=1)  # (P, N, 2)
    tracks = []
    for p in range(len(points)):
        vis = (xy[p, :, 0] >= 0) & (xy[p, :, 0] < w) & (xy[p, :, 1] >= 0) & (xy[p, :, 1] < h)
        tracks.append(Track(xy[p], vis))
    meta = {"fps": float(fps), "source": "image-simulated", "mode": mode, "windows": [[round(float(v), 6) for v in win] for win in windows]}
    return SceneBundle(np.stack(frames).astype(np.float32), np.stack(masks), tracks, None, meta).validate()


def _sample_windows(rng, mode, n, hi, wi, h, w, scale_end, bounds):
    a = np.linspace(0.0, 1.0, n)[:, None]
    if mode == "translate":
        lo, up = bounds
        if (up < lo).any() or np.linalg.norm(up - lo) < n - 1:
            return None
        while True:
            start = lo + rng.uniform(0, 1, 2) * (up - lo)
            end = lo + rng.uniform(0, 1, 2) * (up - lo)
            if np.linalg.norm(end - start) >= n - 1:  # at least 1 px per frame
                break
        off = (1 - a) * start + a * end
        return np.concatenate([off, off + np.array([w, h])], axis=1)
    s_end = scale_end if scale_end is not None else float(rng.uniform(0.6, 0.85))
    scales = (1 - a[:, 0]) * 1.0 + a[:, 0] * s_end
    anchor = np.array([rng.uniform(0.25, 0.75) * wi, rng.uniform(0.25, 0.75) * hi])
    x0 = (1 - scales) * anchor[0]
    y0 = (1 - scales) * anchor[1]
    return np.stack([x0, y0, x0 + scales * wi, y0 + scales * hi], axis=1)


def _object_inside(mask, windows, h, w) -> bool:
    ys, xs = np.nonzero(mask)
    if not len(xs):
        return True
    for x0, y0, x1, y1 in windows:
        if xs.min() < x0 + 1 or xs.max() > x1 - 2 or ys.min() < y0 + 1 or ys.max() > y1 - 2:
            return False
    return True


def window_scales(bundle: SceneBundle) -> np.ndarray:
    win = np.asarray(bundle.meta["windows"], dtype=np.float64)
    return (win[:, 2] - win[:, 0]) / (win[0, 2] - win[0, 0])


def simulated_scene(seed: int, n_frames: int, h: int = 64, w: int = 64) -> SceneBundle:
    """Image-simulated clip of a freshly rendered still with one sprite."""
    rng = np.random.default_rng(seed + 7919)
    hi, wi = int(math.ceil(1.5 * h)), int(math.ceil(1.5 * w))
    for attempt in range(MAX_ATTEMPTS):
        image, mask, kps = generate_still(seed + 7_000_000 * attempt, hi, wi)
        mode = "translate" if rng.random() < 0.5 else "zoom-crop"
        try:
            bundle = simulate_video_from_image(image, mode, n_frames, int(rng.integers(2**31)), (h, w), mask, kps)
        except RuntimeError:
            continue
        bundle.meta["seed"] = int(seed)
        return bundle
    raise RuntimeError(f"could not simulate a clip for seed {seed}")


# ---------------------------------------------------------------------------
# training pairs


@dataclass
class PairOptions:
    """Knobs of training-pair assembly (several ablation presets change these)."""

    expand: float = 0.1
    union_threshold: float = 0.1
    n_sel: int = 8
    nms_radius: Optional[float] = None
    points: str = "nms"  # nms | no-nms | grid | random
    dilation_radius: float = 4.0
    lam: float = tj.LOSS_LAMBDA
    ref_size: int = 64
    keypoint_marks: bool = True


def reference_frame_index(n_frames: int, clip_start: int, clip_len: int) -> int:
    """Frame farthest from the clip; ties go to the later frame."""
    clip_end = clip_start + clip_len - 1
    best, best_d = None, -1
    for f in range(n_frames):
        if clip_start <= f <= clip_end:
            continue
        d = clip_start - f if f < clip_start else f - clip_end
        if d >= best_d:
            best, best_d = f, d
    if best is None:
        raise ValueError("no frame outside the clip to take the reference from")
    return best


def crop_reference(frame: np.ndarray, mask: np.ndarray, points: Optional[np.ndarray] = None, size: int = 64) -> ReferenceObject:
    """Background-free square crop centered on the mask centroid."""
    ys, xs = np.nonzero(mask)
    if not len(xs):
        raise ValueError("cannot crop a reference from an empty mask")
    cx, cy = xs.mean(), ys.mean()
    half = max(np.abs(xs - cx).max(), np.abs(ys - cy).max()) + 1.0
    k = 2 * half / (size - 1)
    c = (size - 1) / 2.0
    u = np.arange(size, dtype=np.float64)
    XX, YY = np.meshgrid(cx + (u - c) * k, cy + (u - c) * k)
    alpha = map_coordinates(mask.astype(np.float64), [YY, XX], order=1, mode="constant", cval=0.0) >= 0.5
    img = np.stack([map_coordinates(frame[..., ch].astype(np.float64), [YY, XX], order=1, mode="constant") for ch in range(3)], axis=-1)
    img = np.clip(img, 0, 1) * alpha[..., None]
    kps = []
    if points is not None:
        for x, y in np.asarray(points, dtype=np.float64):
            kps.append((float(np.clip(c + (x - cx) / k, 0, size - 1)), float(np.clip(c + (y - cy) / k, 0, size - 1))))
    return ReferenceObject(img.astype(np.float32), alpha, kps)


def _bidirectional_tracks(frames: np.ndarray, start: int, pts: np.ndarray):
    from .tracking import track_points

    fwd_xy, fwd_vis = track_points(frames[start:], pts)
    bwd_xy, bwd_vis = track_points(frames[: start + 1][::-1], pts)
    xy = np.concatenate([bwd_xy[:, ::-1][:, :-1], fwd_xy], axis=1)
    vis = np.concatenate([bwd_vis[:, ::-1][:, :-1], fwd_vis], axis=1)
    return [Track(xy[i], vis[i]) for i in range(len(pts))]


def make_training_sample(scene: SceneBundle, clip_len: int = 8, seed: int = 0, opts: Optional[PairOptions] = None) -> TrainingSample:
    opts = opts or PairOptions()
    n = scene.n_frames
    if n < clip_len + 1:
        raise ValueError(f"scene has {n} frames; need at least clip_len + 1 = {clip_len + 1}")
    rng = np.random.default_rng(seed)
    h, w = scene.hw
    start = int(rng.integers(0, n - clip_len + 1))
    ref_idx = reference_frame_index(n, start, clip_len)
    sl = slice(start, start + clip_len)

    if opts.points == "grid":
        pts = tj.grid_points(h, w, mask=scene.masks[start])
        if not len(pts):
            ys, xs = np.nonzero(scene.masks[start])
            pts = np.array([[xs.mean(), ys.mean()]])
        tracks = _bidirectional_tracks(scene.frames, start, pts)
        source = "grid"
    else:
        tracks = scene.target_tracks()
        source = "detected-keypoint"
    ref_pts = np.array([t.xy[ref_idx] for t in tracks]) if tracks else None
    reference = crop_reference(scene.frames[ref_idx], scene.masks[ref_idx], ref_pts, opts.ref_size)

    clip = scene.frames[sl].copy()
    clip_tracks = [Track(t.xy[sl], t.vis[sl], t.obj) for t in tracks]
    boxes = tj.box_sequence_from_masks(scene.masks[sl], opts.expand, opts.union_threshold)
    erase = boxes.masks(h, w)
    conditioned = np.where(erase[..., None], np.float32(ERASE_FILL), clip).astype(np.float32)

    cands = tj.candidates_from_tracks(clip_tracks, source)
    radius = opts.nms_radius or tj.default_nms_radius(h, w)
    if opts.points in ("nms", "grid"):
        cands = tj.nms_filter(cands, radius)
    elif opts.points == "random":
        order = rng.permutation(len(cands))
        cands = [cands[i] for i in order]
        for rank, c in enumerate(cands):
            c.path_length = float(len(cands) - rank)  # selection follows the random order
    ts = tj.select_trajectories(cands, opts.n_sel)
    traj_map = tj.rasterize_trajectory_map(ts, clip_len, h, w)
    kp_img = tj.render_keypoint_image(reference, ts, marks=opts.keypoint_marks)
    weights = tj.trajectory_weight_masks(ts, h, w, opts.dilation_radius, opts.lam, n_frames=clip_len)
    sid = f"{scene.meta.get('source', '?')}:{scene.meta.get('seed', '?')}:{seed}"
    return TrainingSample(
        clip=clip,
        conditioned=conditioned,
        masks=erase,
        reference=reference,
        boxes=boxes,
        trajectories=ts,
        traj_map=traj_map,
        keypoint_image=kp_img,
        weights=weights,
        tracks=clip_tracks,
        source=scene.meta.get("source", "synthetic-video"),
        sample_id=sid,
        clip_start=start,
    )
