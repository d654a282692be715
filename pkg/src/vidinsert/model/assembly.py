"""The full denoiser: autoencoder, ID extractor, pixel warper, U-Net and control branch."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import FrameAutoencoder
from .idextractor import IdExtractor
from .unet import ControlBranch, UNet3D
from .warper import PixelWarper

LATENT_CHANNELS = 4
FACTOR = 8


@dataclass
class ModelConfig:
    width: int = 128  # ID-token width d
    channels: tuple = (64, 128, 128)
    heads: int = 4
    n_tokens: int = 16
    ref_size: int = 64
    warp_width: int = 64
    ae_channels: tuple = (32, 64, 128)
    use_warper: bool = True
    train_steps: int = 1000  # T_train
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channels", "ae_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def linear_schedule(cfg: ModelConfig) -> torch.Tensor:
    """Cumulative alpha products of a linear variance schedule."""
    betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.train_steps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


class DenoiserAssembly(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.autoencoder = FrameAutoencoder(LATENT_CHANNELS, cfg.ae_channels)
        self.id_extractor = IdExtractor(cfg.width, 8, cfg.ref_size, n_tokens=cfg.n_tokens, heads=cfg.heads)
        self.unet = UNet3D(cfg.channels, cfg.width, cfg.heads, LATENT_CHANNELS)
        self.warper = PixelWarper(cfg.warp_width, cfg.heads) if cfg.use_warper else None
        self.control = ControlBranch(self.unet, cfg.warp_width) if cfg.use_warper else None
        self.register_buffer("alphas_cumprod", linear_schedule(cfg).float())
        self.autoencoder.requires_grad_(False)
        self._check_pyramid_shapes()

    # -- latents -------------------------------------------------------------

    def encode_latent(self, frames: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) in [0, 1] -> (..., 4, H/8, W/8)."""
        h, w = frames.shape[-2:]
        if h % FACTOR or w % FACTOR:
            raise ValueError(f"frame size {h}x{w} is not divisible by {FACTOR}")
        lead = frames.shape[:-3]
        z = self.autoencoder.encode(frames.reshape(-1, 3, h, w))
        return z.reshape(*lead, *z.shape[1:])

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-3]
        x = self.autoencoder.decode(z.reshape(-1, *z.shape[-3:]))
        return x.reshape(*lead, *x.shape[1:]).clamp(0, 1)

    # -- conditions ----------------------------------------------------------

    def extract_id_tokens(self, ref: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, M, d)."""
        return self.id_extractor(ref)

    def fuse_content_motion(self, kp_img: torch.Tensor, traj_map: torch.Tensor, n_frames: Optional[int] = None) -> torch.Tensor:
        """(B, 3, S, S), (B, N, 3, H, W) -> (B, N, C_w, H/8, W/8)."""
        if self.warper is None:
            raise RuntimeError("this model was built without a pixel warper")
        if n_frames is not None and traj_map.shape[1] != n_frames:
            raise ValueError(f"trajectory map has {traj_map.shape[1]} frames, latent video has {n_frames}")
        return self.warper(kp_img, traj_map)

    @staticmethod
    def unet_input(z_t, mask_lat, z_mask, box_cov=None):
        """9-channel input; the box coverage is added onto the mask channel."""
        for name, t in (("mask_lat", mask_lat), ("z_mask", z_mask)):
            if t.shape[:2] != z_t.shape[:2] or t.shape[-2:] != z_t.shape[-2:]:
                raise ValueError(f"{name} shape {tuple(t.shape)} is inconsistent with z_t {tuple(z_t.shape)}")
        m = mask_lat if box_cov is None else mask_lat + box_cov
        return torch.cat([z_t, m, z_mask], dim=2)

    @staticmethod
    def _tokens_per_frame(id_tokens, n):
        return id_tokens.repeat_interleave(n, dim=0)

    def control_features(self, fused, z_t, t, id_tokens, mask_lat, z_mask, box_cov=None, temporal=True):
        """Zero-projected control pyramid: one map per encoder level plus the middle block."""
        if self.control is None:
            return None
        b, n = z_t.shape[:2]
        x = self.unet_input(z_t, mask_lat, z_mask, box_cov).flatten(0, 1)
        ctx = self._tokens_per_frame(id_tokens, n)
        return self.control(x, t, ctx, n, fused.flatten(0, 1), temporal)

    def denoise_step(self, z_t, t, id_tokens, pyramid, box_cov, mask_lat, z_mask, temporal=True):
        """Predicted noise, shaped like ``z_t`` (B, N, 4, h, w)."""
        b, n = z_t.shape[:2]
        if id_tokens.shape[0] != b:
            raise ValueError(f"id_tokens batch {id_tokens.shape[0]} != latent batch {b}")
        if box_cov is not None and box_cov.shape != mask_lat.shape:
            raise ValueError(f"box coverage shape {tuple(box_cov.shape)} != mask shape {tuple(mask_lat.shape)}")
        t = torch.as_tensor(t, device=z_t.device).reshape(-1).expand(b)
        x = self.unet_input(z_t, mask_lat, z_mask, box_cov).flatten(0, 1)
        ctx = self._tokens_per_frame(id_tokens, n)
        out = self.unet(x, t, ctx, n, control=pyramid, temporal=temporal)
        return out.view(b, n, *out.shape[1:])

    def predict_noise(self, z_t, t, cond: dict, drop: Optional[torch.Tensor] = None, temporal=True):
        """Full conditional prediction; ``drop`` (B,) bool zeroes ID tokens and control for those samples."""
        b, n = z_t.shape[:2]
        t = torch.as_tensor(t, device=z_t.device).reshape(-1).expand(b)
        id_tokens = cond["id_tokens"] if "id_tokens" in cond else self.extract_id_tokens(cond["ref"])
        keep = None
        if drop is not None:
            keep = (~drop).to(z_t.dtype)
            id_tokens = id_tokens * keep[:, None, None]
        pyramid = None
        if self.control is not None and cond.get("use_control", True):
            fused = cond["fused"] if "fused" in cond else self.fuse_content_motion(cond["kp_img"], cond["traj_map"], n)
            pyramid = self.control_features(fused, z_t, t, id_tokens, cond["mask_lat"], cond["z_mask"], cond.get("box_cov"), temporal)
            if keep is not None:
                k = keep.repeat_interleave(n)[:, None, None, None]
                pyramid = [p * k for p in pyramid]
        return self.denoise_step(z_t, t, id_tokens, pyramid, cond.get("box_cov"), cond["mask_lat"], cond["z_mask"], temporal)

    # -- schedule --------------------------------------------------------------

    def add_noise(self, z0, noise, t):
        ab = self.alphas_cumprod[t].view(-1, *([1] * (z0.dim() - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise

    # -- checks ----------------------------------------------------------------

    @torch.no_grad()
    def _check_pyramid_shapes(self, h: int = 8, w: int = 8):
        if self.control is None:
            return
        x = torch.zeros(1, 9, h, w)
        t = torch.zeros(1, dtype=torch.long)
        ctx = torch.zeros(1, self.cfg.n_tokens, self.cfg.width)
        temb = self.unet.time_embed(t, 1)
        skips, mid = self.unet.encoder(x, temb, ctx, 1)
        pyr = self.control(x, t, ctx, 1, torch.zeros(1, self.cfg.warp_width, h, w))
        for lvl, (a, b) in enumerate(zip(skips + [mid], pyr)):
            if a.shape != b.shape:
                raise AssertionError(f"control level {lvl} shape {tuple(b.shape)} != U-Net level {tuple(a.shape)}")

    def trainable_parameters(self, freeze_id: bool = False):
        for name, p in self.named_parameters():
            if name.startswith("autoencoder."):
                continue
            if freeze_id and name.startswith("id_extractor."):
                continue
            yield p


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: DenoiserAssembly, path, extra: Optional[dict] = None) -> None:
    """Named tensors in a safetensors file with the JSON config in its header."""
    from safetensors.torch import save_file

    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {"config": model.cfg.to_json(), "format": "vidinsert-denoiser/1"}
    if extra:
        meta["extra"] = json.dumps(extra, sort_keys=True)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=meta)


def load_checkpoint(path) -> DenoiserAssembly:
    from safetensors import safe_open
    from safetensors.torch import load_file

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if "config" not in meta:
        raise ValueError(f"{path} has no config header")
    model = DenoiserAssembly(ModelConfig.from_dict(json.loads(meta["config"])))
    model.load_state_dict(load_file(str(path)))
    model.eval()
    return model


def checkpoint_extra(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    return json.loads(meta.get("extra", "{}"))
