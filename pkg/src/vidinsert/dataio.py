"""Scene-bundle containers and their on-disk format.

A scene bundle is a directory::

    frames/0000.png ...   RGB frames, 8-bit
    masks/0000.png ...    edit-region masks, 0/255
    ref.png               reference crop (optional)
    ref_alpha.png         reference foreground mask (optional)
    tracks.json           [{"xy": [[x, y], ...], "vis": [0|1, ...]}, ...]
    meta.json             {"fps": ..., "source": ..., ...}

Track coordinates are written with 3 decimals so that save -> load -> save
reproduces ``tracks.json`` and ``meta.json`` byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from PIL import Image

SOURCES = ("synthetic-video", "image-simulated")
CENTER_TOLERANCE = 0.05


class BundleValidationError(ValueError):
    """A bundle violates one of its invariants."""


class BundleParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}: line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Track:
    xy: np.ndarray  # (N, 2) float, pixel coords (x, y)
    vis: np.ndarray  # (N,) bool
    obj: int = 0  # sprite id; 0 is the edit target

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.vis = np.asarray(self.vis).astype(bool).reshape(-1)

    def __len__(self):
        return len(self.xy)


@dataclass
class ReferenceObject:
    image: np.ndarray  # (S, S, 3) float in [0, 1]
    alpha: np.ndarray  # (S, S) bool
    keypoints: list = field(default_factory=list)  # crop-space (x, y), indexed like the target tracks

    def validate(self):
        img, alpha = self.image, self.alpha
        if img.ndim != 3 or img.shape[0] != img.shape[1] or img.shape[2] != 3:
            raise BundleValidationError(f"reference image must be square RGB, got {img.shape}")
        if alpha.shape != img.shape[:2]:
            raise BundleValidationError("reference alpha shape does not match image")
        if np.any(img[~alpha] != 0):
            raise BundleValidationError("reference background pixels (alpha=0) must be zero")
        if alpha.any():
            ys, xs = np.nonzero(alpha)
            s = img.shape[0]
            c = (s - 1) / 2.0
            off = max(abs(xs.mean() - c), abs(ys.mean() - c))
            if off > CENTER_TOLERANCE * s:
                raise BundleValidationError(
                    f"reference foreground centroid is {off:.2f}px from the crop center "
                    f"(limit {CENTER_TOLERANCE * s:.2f})"
                )


@dataclass
class SceneBundle:
    frames: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (N, H, W) bool
    tracks: list
    reference: Optional[ReferenceObject] = None
    meta: dict = field(default_factory=lambda: {"fps": 8.0, "source": "synthetic-video"})

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def hw(self) -> tuple:
        return self.frames.shape[1], self.frames.shape[2]

    def target_tracks(self) -> list:
        return [t for t in self.tracks if t.obj == 0]

    def validate(self):
        frames, masks = self.frames, self.masks
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise BundleValidationError(f"frames must be (N, H, W, 3), got {frames.shape}")
        n, h, w = frames.shape[:3]
        if n < 2:
            raise BundleValidationError(f"a bundle needs N >= 2 frames, got {n}")
        if frames.min() < 0 or frames.max() > 1:
            raise BundleValidationError("frame values must lie in [0, 1]")
        if masks.shape != (n, h, w):
            raise BundleValidationError(f"masks must be {(n, h, w)}, got {masks.shape}")
        if masks.dtype != bool and not np.isin(masks, (0, 1)).all():
            raise BundleValidationError("mask pixels must be exactly 0 or 1")
        for i, tr in enumerate(self.tracks):
            if len(tr.xy) != n or len(tr.vis) != n:
                raise BundleValidationError(
                    f"track {i} has {len(tr.xy)} positions / {len(tr.vis)} visibility flags, expected {n}"
                )
            pts = tr.xy[tr.vis]
            if len(pts) and (
                (pts[:, 0] < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= h).any()
            ):
                raise BundleValidationError(f"track {i} has a visible coordinate outside [0,{w})x[0,{h})")
        if self.meta.get("source") not in SOURCES:
            raise BundleValidationError(f"meta.source must be one of {SOURCES}, got {self.meta.get('source')!r}")
        if not isinstance(self.meta.get("fps"), (int, float)) or self.meta["fps"] <= 0:
            raise BundleValidationError("meta.fps must be a positive number")
        if self.reference is not None:
            self.reference.validate()
        return self


@dataclass
class TrainingSample:
    """One prepared training example; every sequence shares the clip length N."""

    clip: np.ndarray  # (N, H, W, 3) ground-truth frames
    conditioned: np.ndarray  # (N, H, W, 3) frames with the box region erased
    masks: np.ndarray  # (N, H, W) erased region
    reference: ReferenceObject
    boxes: Any  # trajectory.BoxSequence
    trajectories: Any  # trajectory.TrajectorySet
    traj_map: np.ndarray  # (N, 3, H, W)
    keypoint_image: np.ndarray  # (3, S, S)
    weights: Any  # trajectory.LossWeightSpec
    tracks: list  # target tracks restricted to the clip
    source: str = "synthetic-video"
    sample_id: str = ""
    clip_start: int = 0  # first clip frame within its scene


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _round_xy(xy):
    return [[round(float(x), 3), round(float(y), 3)] for x, y in xy]


def _tracks_payload(tracks) -> list:
    out = []
    for tr in tracks:
        item = {"xy": _round_xy(tr.xy), "vis": [int(v) for v in tr.vis]}
        if tr.obj != 0:
            item["obj"] = int(tr.obj)
        out.append(item)
    return out


def _meta_payload(bundle: SceneBundle) -> dict:
    meta = dict(bundle.meta)
    if bundle.reference is not None:
        meta["ref_keypoints"] = _round_xy(bundle.reference.keypoints)
    return meta


def save_scene_bundle(bundle: SceneBundle, path) -> None:
    bundle.validate()
    path = Path(path)
    try:
        (path / "frames").mkdir(parents=True, exist_ok=True)
        (path / "masks").mkdir(parents=True, exist_ok=True)
        for i, (fr, m) in enumerate(zip(bundle.frames, bundle.masks)):
            Image.fromarray(_to_u8(fr)).save(path / "frames" / f"{i:04d}.png")
            Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(path / "masks" / f"{i:04d}.png")
        if bundle.reference is not None:
            Image.fromarray(_to_u8(bundle.reference.image)).save(path / "ref.png")
            Image.fromarray(np.where(bundle.reference.alpha, 255, 0).astype(np.uint8)).save(path / "ref_alpha.png")
        (path / "tracks.json").write_text(_dump_json(_tracks_payload(bundle.tracks)))
        (path / "meta.json").write_text(_dump_json(_meta_payload(bundle)))
    except OSError as exc:
        raise OSError(f"failed to write scene bundle at {path}: {exc}") from exc


def _read_json(p: Path):
    if not p.exists():
        raise FileNotFoundError(f"missing {p.name} in {p.parent}")
    text = p.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleParseError(p, exc.lineno, exc.msg) from exc


def _read_png(p: Path, mode: str) -> np.ndarray:
    with Image.open(p) as im:
        return np.asarray(im.convert(mode))


def load_scene_bundle(path) -> SceneBundle:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"scene bundle directory not found: {path}")
    meta = _read_json(path / "meta.json")
    raw_tracks = _read_json(path / "tracks.json")
    frame_files = sorted((path / "frames").glob("*.png"))
    mask_files = sorted((path / "masks").glob("*.png"))
    if not frame_files:
        raise FileNotFoundError(f"missing frames/ in {path}")
    if len(mask_files) != len(frame_files):
        raise FileNotFoundError(f"{path}: found {len(frame_files)} frames but {len(mask_files)} masks")
    frames = np.stack([_read_png(f, "RGB") for f in frame_files]).astype(np.float32) / 255.0
    masks = np.stack([_read_png(f, "L") for f in mask_files]) >= 128

    if not isinstance(raw_tracks, list):
        raise BundleParseError(path / "tracks.json", 1, "expected a list of tracks")
    tracks = []
    for i, item in enumerate(raw_tracks):
        try:
            tracks.append(Track(np.asarray(item["xy"], dtype=np.float64), np.asarray(item["vis"]), int(item.get("obj", 0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleValidationError(f"tracks.json entry {i} is malformed: {exc}") from exc

    reference = None
    ref_kp = meta.pop("ref_keypoints", None)
    if (path / "ref.png").exists():
        if not (path / "ref_alpha.png").exists():
            raise FileNotFoundError(f"missing ref_alpha.png in {path}")
        alpha = _read_png(path / "ref_alpha.png", "L") >= 128
        image = _read_png(path / "ref.png", "RGB").astype(np.float32) / 255.0
        reference = ReferenceObject(image, alpha, [tuple(p) for p in (ref_kp or [])])
    bundle = SceneBundle(frames, masks, tracks, reference, meta)
    return bundle.validate()
