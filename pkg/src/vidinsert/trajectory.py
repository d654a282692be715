"""Training-trajectory sampling, condition rendering, boxes and loss-weight masks.

Coordinates follow the pixel-center convention: pixel (row i, col j) sits at
(x, y) = (j, i).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataio import ReferenceObject, SceneBundle, Track

log = logging.getLogger(__name__)

DISK_RADIUS = 2.0
LINE_HALF_WIDTH = 0.75
T_TAIL = 4
# calibrated so the mean trajectory-region loss weight is ~2x the background weight
LOSS_LAMBDA = 13.0
LATENT_FACTOR = 8

# 16 well-separated colors (Kelly's contrast set, minus white/black).
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    ],
    dtype=np.float32,
) / 255.0


@dataclass
class TrajectoryCandidate:
    xy: np.ndarray  # (N, 2)
    vis: np.ndarray  # (N,) bool
    path_length: float
    source: str = "detected-keypoint"  # or "grid"
    index: int = -1  # position in the originating track list

    @property
    def start(self) -> np.ndarray:
        return self.xy[0]


@dataclass
class TrajectorySet:
    candidates: list = field(default_factory=list)
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))

    def __len__(self):
        return len(self.candidates)


@dataclass
class BoxSequence:
    boxes: np.ndarray  # (N, 4) int (x0, y0, x1, y1), half-open pixel ranges
    expand: float = 0.0
    unioned: bool = False

    def __len__(self):
        return len(self.boxes)

    def masks(self, h: int, w: int) -> np.ndarray:
        out = np.zeros((len(self.boxes), h, w), dtype=bool)
        for f, (x0, y0, x1, y1) in enumerate(self.boxes):
            out[f, y0:y1, x0:x1] = True
        return out

    def coverage(self, h: int, w: int, factor: int = LATENT_FACTOR) -> np.ndarray:
        """Fraction of each factor x factor cell covered by the box, per frame."""
        m = self.masks(h, w).astype(np.float32)
        n = m.shape[0]
        return m.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


@dataclass
class LossWeightSpec:
    regions: np.ndarray  # (n_traj, N, h/8, w/8) in {0, 1}
    ratios: np.ndarray  # (n_traj,)
    lam: float

    def __len__(self):
        return len(self.ratios)


def path_length(xy: np.ndarray, vis: np.ndarray) -> float:
    """Sum of segment lengths over consecutive frames where both ends are visible."""
    xy = np.asarray(xy, dtype=np.float64)
    vis = np.asarray(vis, dtype=bool)
    if len(xy) < 2:
        return 0.0
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    both = vis[1:] & vis[:-1]
    return float(seg[both].sum())


def candidates_from_tracks(tracks: Sequence[Track], source: str = "detected-keypoint") -> list:
    return [TrajectoryCandidate(t.xy.copy(), t.vis.copy(), path_length(t.xy, t.vis), source, i) for i, t in enumerate(tracks)]


def grid_points(h: int, w: int, stride: Optional[int] = None, mask: Optional[np.ndarray] = None) -> np.ndarray:
    stride = stride or max(1, h // 8)
    ys = np.arange(stride / 2.0, h, stride)
    xs = np.arange(stride / 2.0, w, stride)
    pts = np.array([(x, y) for y in ys for x in xs], dtype=np.float64)
    if mask is not None and len(pts):
        keep = mask[np.clip(np.round(pts[:, 1]).astype(int), 0, h - 1), np.clip(np.round(pts[:, 0]).astype(int), 0, w - 1)]
        pts = pts[keep]
    return pts


def init_keypoints(bundle: SceneBundle, use_grid: bool = False, within_mask: bool = False) -> list:
    """Initial trajectory candidates for a scene.

    Detected keypoints are the bundle's target tracks. Without them (or when
    ``use_grid`` is set) a regular grid of stride H/8 is laid over the first
    frame and followed with the template tracker.
    """
    tracks = bundle.target_tracks()
    if tracks and not use_grid:
        return candidates_from_tracks(tracks, "detected-keypoint")

    from .tracking import track_points

    h, w = bundle.hw
    mask = bundle.masks[0] if within_mask else None
    if within_mask and not mask.any():
        raise ValueError("bundle has no tracks and an empty first-frame mask: nothing to sample")
    pts = grid_points(h, w, mask=mask)
    if not len(pts):
        raise ValueError("bundle has no tracks and no grid points fall in the sampling region")
    xy, vis = track_points(bundle.frames, pts)
    return [
        TrajectoryCandidate(xy[i], vis[i], path_length(xy[i], vis[i]), "grid", -1)
        for i in range(len(pts))
    ]


def _order_by_length(cands: list) -> list:
    # stable: equal lengths keep input order
    return sorted(cands, key=lambda c: -c.path_length)


def nms_filter(cands: list, radius: float) -> list:
    """Greedy radius suppression keyed on path length (longest first)."""
    if radius <= 0:
        raise ValueError("NMS radius must be positive")
    if not cands:
        return []
    order = _order_by_length(cands)
    starts = np.array([c.start for c in order], dtype=np.float64)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        d = np.linalg.norm(starts - starts[i], axis=1)
        alive &= d >= radius
    return kept


def select_trajectories(cands: list, n_sel: int, palette: np.ndarray = PALETTE) -> TrajectorySet:
    if n_sel < 0:
        raise ValueError("n_sel must be non-negative")
    if len(cands) < n_sel:
        log.warning("only %d candidates available, %d requested; keeping all", len(cands), n_sel)
    chosen = _order_by_length(cands)[:n_sel]
    colors = palette[np.arange(len(chosen)) % len(palette)].astype(np.float32)
    return TrajectorySet(chosen, colors)


def default_nms_radius(h: int, w: int) -> float:
    return min(h, w) / 16.0


def _pixel_grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _disk(xs, ys, c, r):
    return (xs - c[0]) ** 2 + (ys - c[1]) ** 2 <= r * r


def _segment_dist(xs, ys, a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    L2 = float(d @ d)
    if L2 == 0.0:
        return np.hypot(xs - a[0], ys - a[1])
    t = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(xs - (a[0] + t * d[0]), ys - (a[1] + t * d[1]))


def _trajectory_intensity(cand: TrajectoryCandidate, f: int, xs, ys, t_tail: int) -> np.ndarray:
    inten = np.zeros(xs.shape, dtype=np.float32)
    xy, vis = cand.xy, cand.vis
    for k in range(1, t_tail + 1):
        g = f - k
        if g < 0:
            break
        if vis[g] and vis[g + 1]:
            level = 1.0 - k / (t_tail + 1.0)
            seg = _segment_dist(xs, ys, xy[g], xy[g + 1]) <= LINE_HALF_WIDTH
            inten = np.where(seg, np.maximum(inten, level), inten)
    if vis[f]:
        inten = np.where(_disk(xs, ys, xy[f], DISK_RADIUS), 1.0, inten)
    return inten


def rasterize_trajectory_map(ts: TrajectorySet, n_frames: int, h: int, w: int, t_tail: int = T_TAIL) -> np.ndarray:
    """Per-frame colored disks with fading tails, (N, 3, H, W), black background."""
    out = np.zeros((n_frames, 3, h, w), dtype=np.float32)
    if not len(ts):
        return out
    for c in ts.candidates:
        if len(c.xy) != n_frames:
            raise ValueError(f"track has {len(c.xy)} entries, expected {n_frames}")
    xs, ys = _pixel_grid(h, w)
    for f in range(n_frames):
        best = np.zeros((h, w), dtype=np.float32)
        for cand, color in zip(ts.candidates, ts.colors):
            inten = _trajectory_intensity(cand, f, xs, ys, t_tail)
            upd = inten >= best
            upd &= inten > 0
            best = np.where(upd, inten, best)
            out[f] = np.where(upd[None], color[:, None, None] * inten[None], out[f])
    return out


def render_keypoint_image(ref: ReferenceObject, ts: TrajectorySet, marks: bool = True) -> np.ndarray:
    """Reference crop with each trajectory's start point marked in its color, (3, S, S)."""
    img = np.array(ref.image, dtype=np.float32).transpose(2, 0, 1).copy()
    if not marks or not len(ts):
        return img
    missing = [
        i for i, c in enumerate(ts.candidates)
        if c.index < 0 or c.index >= len(ref.keypoints) or ref.keypoints[c.index] is None
    ]
    if missing:
        raise ValueError(f"no reference keypoint correspondence for trajectories {missing}")
    s = img.shape[1]
    xs, ys = _pixel_grid(s, s)
    for cand, color in zip(ts.candidates, ts.colors):
        m = _disk(xs, ys, ref.keypoints[cand.index], DISK_RADIUS)
        img[:, m] = color[:, None]
    return img


def _tight_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1


def box_sequence_from_masks(masks: np.ndarray, expand: float = 0.1, union_threshold: float = 0.1) -> BoxSequence:
    """Per-frame expanded boxes; boxes of a near-static object are merged into their union.

    ``union_threshold`` is a fraction of min(H, W); the merge test uses the
    tight-box centers so it does not depend on ``expand``.
    """
    masks = np.asarray(masks, dtype=bool)
    if expand < 0:
        raise ValueError("expand must be >= 0")
    n, h, w = masks.shape
    tight = []
    for f in range(n):
        if not masks[f].any():
            raise ValueError(f"mask of frame {f} is empty")
        tight.append(_tight_box(masks[f]))
    tight = np.array(tight, dtype=np.float64)
    bw = tight[:, 2] - tight[:, 0]
    bh = tight[:, 3] - tight[:, 1]
    boxes = np.stack(
        [
            np.floor(tight[:, 0] - expand * bw),
            np.floor(tight[:, 1] - expand * bh),
            np.ceil(tight[:, 2] + expand * bw),
            np.ceil(tight[:, 3] + expand * bh),
        ],
        axis=1,
    )
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    boxes = boxes.astype(np.int64)

    centers = np.stack([(tight[:, 0] + tight[:, 2]) / 2, (tight[:, 1] + tight[:, 3]) / 2], axis=1)
    spread = np.linalg.norm(centers[:, None] - centers[None], axis=-1).max()
    unioned = bool(spread < union_threshold * min(h, w))
    if unioned:
        u = np.array([boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max()])
        boxes = np.tile(u, (n, 1))
    return BoxSequence(boxes, expand, unioned)


def linear_box_sequence(start, end, n_frames: int) -> BoxSequence:
    """Boxes interpolated linearly from a start box to an end box."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    a = np.linspace(0.0, 1.0, n_frames)[:, None]
    boxes = (1 - a) * start + a * end
    boxes = np.concatenate([np.floor(boxes[:, :2]), np.ceil(boxes[:, 2:])], axis=1).astype(np.int64)
    return BoxSequence(boxes, 0.0, False)


def track_region(cand: TrajectoryCandidate, h: int, w: int, radius: float) -> np.ndarray:
    """Full-resolution region within ``radius`` of the visible part of a track."""
    xs, ys = _pixel_grid(h, w)
    d = np.full((h, w), np.inf)
    xy, vis = cand.xy, cand.vis
    for f in range(len(xy)):
        if vis[f]:
            d = np.minimum(d, np.hypot(xs - xy[f, 0], ys - xy[f, 1]))
        if f + 1 < len(xy) and vis[f] and vis[f + 1]:
            d = np.minimum(d, _segment_dist(xs, ys, xy[f], xy[f + 1]))
    return d <= radius


def trajectory_weight_masks(
    ts: TrajectorySet, h: int, w: int, dilation_radius: float = 4.0, lambda_: float = LOSS_LAMBDA, n_frames: Optional[int] = None
) -> LossWeightSpec:
    if dilation_radius <= 0 or lambda_ < 0:
        raise ValueError("dilation_radius must be > 0 and lambda_ >= 0")
    if n_frames is None:
        n_frames = len(ts.candidates[0].xy) if len(ts) else 0
    hl, wl = h // LATENT_FACTOR, w // LATENT_FACTOR
    regions = np.zeros((len(ts), n_frames, hl, wl), dtype=np.float32)
    ratios = np.zeros(len(ts), dtype=np.float64)
    for i, cand in enumerate(ts.candidates):
        full = track_region(cand, h, w, dilation_radius)
        per_frame = np.repeat(full[None], n_frames, axis=0)
        ratios[i] = per_frame.reshape(n_frames, -1).mean(axis=1).mean()
        pooled = full[: hl * LATENT_FACTOR, : wl * LATENT_FACTOR].reshape(hl, LATENT_FACTOR, wl, LATENT_FACTOR).any(axis=(1, 3))
        regions[i] = pooled[None]
    return LossWeightSpec(regions, ratios, float(lambda_))


def correspond_by_box(points: np.ndarray, box, ref_size: int, object_extent: Optional[float] = None) -> list:
    """Map frame points into reference-crop coordinates through the first-frame box.

    The crop is assumed to hold the object centered with its larger box side
    spanning ``object_extent`` pixels (default: the whole crop).
    """
    x0, y0, x1, y1 = [float(v) for v in box]
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    side = max(x1 - x0, y1 - y0, 1.0)
    extent = object_extent or ref_size
    scale = extent / side
    c = (ref_size - 1) / 2.0
    out = []
    for x, y in np.asarray(points, dtype=np.float64):
        out.append((float(np.clip(c + (x - cx) * scale, 0, ref_size - 1)), float(np.clip(c + (y - cy) * scale, 0, ref_size - 1))))
    return out
