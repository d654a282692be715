"""DDIM inversion, classifier-free-guided DDIM sampling and the object insertion pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import trajectory as tj
from .dataio import ReferenceObject, SceneBundle, Track
from .model import DenoiserAssembly
from .synthgen import ERASE_FILL


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance: float = 10.0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 1:
            raise ValueError(f"guidance scale must be >= 1, got {self.guidance}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")


class NonFiniteLatentError(RuntimeError):
    pass


def ddim_timesteps(train_steps: int, steps: int) -> np.ndarray:
    """Ascending timesteps, evenly spaced and ending at train_steps - 1."""
    if steps < 1 or steps > train_steps:
        raise ValueError(f"steps must be in [1, {train_steps}], got {steps}")
    return np.round(np.arange(1, steps + 1) * train_steps / steps).astype(np.int64) - 1


def _alpha(model: DenoiserAssembly, t: int) -> torch.Tensor:
    if t < 0:
        return torch.tensor(1.0, dtype=torch.float64)
    return model.alphas_cumprod[t].double()


def _ddim_move(x, eps, a_from, a_to):
    """Deterministic DDIM update between two noise levels (either direction)."""
    x0 = (x - (1 - a_from).sqrt() * eps) / a_from.sqrt()
    return a_to.sqrt() * x0 + (1 - a_to).sqrt() * eps


def unconditional_inputs(z0: torch.Tensor) -> dict:
    """Conditions for a clip with nothing masked: zero mask, the clip itself as z_mask."""
    zeros = torch.zeros(*z0.shape[:2], 1, *z0.shape[3:], dtype=z0.dtype)
    return {"mask_lat": zeros, "z_mask": z0, "box_cov": zeros}


def _uncond_eps(model, x, t, cond):
    b = x.shape[0]
    id_tokens = torch.zeros(b, model.cfg.n_tokens, model.cfg.width, dtype=x.dtype)
    t = torch.full((b,), int(t), dtype=torch.long)
    return model.denoise_step(x, t, id_tokens, None, cond.get("box_cov"), cond["mask_lat"], cond["z_mask"]).double()


@torch.no_grad()
def ddim_invert(z0: torch.Tensor, model: DenoiserAssembly, steps: int = 50, cond: Optional[dict] = None) -> torch.Tensor:
    """Map a clean latent video (B, N, 4, h, w) to z_T with the unconditional branch."""
    cond = cond or unconditional_inputs(z0)
    ts = ddim_timesteps(model.cfg.train_steps, steps)
    x = z0.double()
    prev = -1
    for t in ts:
        eps = _uncond_eps(model, x.float(), t, cond)
        x = _ddim_move(x, eps, _alpha(model, prev), _alpha(model, t))
        prev = t
    return x.float()


@torch.no_grad()
def ddim_sample(z_T: torch.Tensor, cond: dict, cfg: SamplerConfig, model: DenoiserAssembly) -> torch.Tensor:
    """Guided DDIM from z_T; ``cond`` holds predict_noise conditions (without drop).

    A guidance scale of exactly 1 evaluates only the conditional branch.
    """
    ts = ddim_timesteps(model.cfg.train_steps, cfg.steps)[::-1]
    gen = torch.Generator().manual_seed(cfg.seed)
    b = z_T.shape[0]
    cond = dict(cond)
    if "id_tokens" not in cond:
        cond["id_tokens"] = model.extract_id_tokens(cond["ref"])
    if model.control is not None and cond.get("use_control", True) and "fused" not in cond:
        cond["fused"] = model.fuse_content_motion(cond["kp_img"], cond["traj_map"], z_T.shape[1])
    x = z_T.double()
    for k, t in enumerate(ts):
        t_vec = torch.full((b,), int(t), dtype=torch.long)
        eps_c = model.predict_noise(x.float(), t_vec, cond).double()
        if cfg.guidance == 1.0:
            eps = eps_c
        else:
            eps_u = model.predict_noise(x.float(), t_vec, cond, drop=torch.ones(b, dtype=torch.bool)).double()
            eps = eps_u + cfg.guidance * (eps_c - eps_u)
        a_t = _alpha(model, t)
        a_prev = _alpha(model, ts[k + 1] if k + 1 < len(ts) else -1)
        if cfg.eta > 0:
            sigma = cfg.eta * ((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)).sqrt()
            x0 = (x - (1 - a_t).sqrt() * eps) / a_t.sqrt()
            noise = torch.randn(x.shape, generator=gen, dtype=torch.float64)
            x = a_prev.sqrt() * x0 + (1 - a_prev - sigma**2).clamp_min(0).sqrt() * eps + sigma * noise
        else:
            x = _ddim_move(x, eps, a_t, a_prev)
        if not torch.isfinite(x).all():
            raise NonFiniteLatentError(f"non-finite latent at sampling step {k} (t={int(t)})")
    return x.float()


# ---------------------------------------------------------------------------
# insertion pipeline


def resize_reference(ref: ReferenceObject, size: int) -> ReferenceObject:
    s = ref.image.shape[0]
    if s == size:
        return ref
    img = Image.fromarray(np.round(ref.image * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR)
    alpha = np.asarray(Image.fromarray(ref.alpha.astype(np.uint8) * 255).resize((size, size), Image.BILINEAR)) >= 128
    image = np.asarray(img, dtype=np.float32) / 255.0 * alpha[..., None]
    kps = [(x * (size - 1) / (s - 1), y * (size - 1) / (s - 1)) for x, y in ref.keypoints]
    return ReferenceObject(image.astype(np.float32), alpha, kps)


def box_trajectories(boxes: tj.BoxSequence, ref_size: int) -> tuple:
    """Straight-line center and corner trajectories through a box sequence.

    Returns the TrajectorySet and the matching reference-crop keypoints.
    """
    b = boxes.boxes.astype(np.float64)
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 2] - 1, b[:, 3] - 1
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    paths = [(cx, cy), (x0, y0), (x1, y0), (x0, y1), (x1, y1)]
    cands = []
    for i, (px, py) in enumerate(paths):
        xy = np.stack([px, py], axis=1)
        vis = np.ones(len(xy), dtype=bool)
        cands.append(tj.TrajectoryCandidate(xy, vis, tj.path_length(xy, vis), "box", i))
    ts = tj.select_trajectories(cands, len(cands))
    # corner points sit on the crop border; pull them in so the marks stay on the object
    kps = tj.correspond_by_box([c.xy[0] for c in ts.candidates], b[0], ref_size, object_extent=0.7 * ref_size)
    return ts, kps


def _frames_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float()


def build_conditions(model: DenoiserAssembly, frames, boxes: tj.BoxSequence, ref: ReferenceObject, ts: tj.TrajectorySet, keypoint_marks: bool = True) -> dict:
    """Erase the boxes and assemble every model condition for one clip."""
    n, h, w = frames.shape[:3]
    erase = boxes.masks(h, w)
    conditioned = np.where(erase[..., None], np.float32(ERASE_FILL), frames).astype(np.float32)
    cov = boxes.coverage(h, w).astype(np.float32)[:, None]
    z_mask = model.encode_latent(_frames_tensor(conditioned))[None]
    traj = tj.rasterize_trajectory_map(ts, n, h, w) if len(ts) else np.zeros((n, 3, h, w), np.float32)
    kp = tj.render_keypoint_image(ref, ts, marks=keypoint_marks and len(ts) > 0)
    return {
        "ref": torch.from_numpy(ref.image).permute(2, 0, 1)[None].float(),
        "kp_img": torch.from_numpy(kp)[None].float(),
        "traj_map": torch.from_numpy(traj)[None].float(),
        "mask_lat": torch.from_numpy((cov > 0).astype(np.float32))[None],
        "box_cov": torch.from_numpy(cov)[None],
        "z_mask": z_mask,
        "use_control": model.control is not None,
    }


@torch.no_grad()
def insert_object(
    scene: SceneBundle,
    ref: ReferenceObject,
    trajectories: Optional[tj.TrajectorySet],
    cfg: SamplerConfig,
    model: DenoiserAssembly,
    boxes: Optional[tj.BoxSequence] = None,
    start_end: Optional[tuple] = None,
    expand: float = 0.1,
    keypoint_marks: bool = True,
) -> SceneBundle:
    """Insert ``ref`` into ``scene`` along the requested motion.

    Motion comes from ``trajectories`` plus either an explicit box sequence,
    the scene masks (expanded by ``expand``) or a (start_box, end_box) pair.
    With ``start_end`` and no trajectories, straight-line box trajectories are
    synthesized. An empty TrajectorySet means box guidance only.
    """
    model.eval()
    frames = np.asarray(scene.frames, dtype=np.float32)
    n, h, w = frames.shape[:3]
    ref = resize_reference(ref, model.cfg.ref_size)
    if boxes is None:
        if start_end is not None:
            boxes = tj.linear_box_sequence(start_end[0], start_end[1], n)
        else:
            boxes = tj.box_sequence_from_masks(scene.masks, expand)
    if len(boxes) != n:
        raise ValueError(f"box sequence has {len(boxes)} frames, scene has {n}")
    if trajectories is None:
        if start_end is None:
            raise ValueError("trajectories are required unless start and end boxes are given")
        trajectories, kps = box_trajectories(boxes, ref.image.shape[0])
        ref = ReferenceObject(ref.image, ref.alpha, kps)
    cond = build_conditions(model, frames, boxes, ref, trajectories, keypoint_marks)

    inv_cond = {k: cond[k] for k in ("mask_lat", "z_mask", "box_cov")}
    z_T = ddim_invert(cond["z_mask"], model, cfg.steps, inv_cond)
    z0 = ddim_sample(z_T, cond, cfg, model)
    decoded = model.decode_latent(z0[0]).permute(0, 2, 3, 1).numpy()
    region = boxes.masks(h, w)
    out = np.where(region[..., None], decoded, frames).astype(np.float32)
    tracks = [Track(c.xy.copy(), c.vis.copy()) for c in trajectories.candidates]
    meta = dict(scene.meta)
    meta.update({"seed": cfg.seed, "steps": cfg.steps, "guidance": cfg.guidance, "edited": True})
    return SceneBundle(out, region, tracks, ref, meta)
