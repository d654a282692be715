"""Weighted diffusion loss, adaptive timestep sampling, mixed batching and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import synthgen as sg
from . import trajectory as tj
from .dataio import TrainingSample
from .model import DenoiserAssembly, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)

VIDEO = "synthetic-video"
IMAGE = "image-simulated"


class NonFiniteLossError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


def loss_weight_map(spec: tj.LossWeightSpec, n_traj: Optional[int] = None, shape=None) -> np.ndarray:
    """Per-element weight  sum_i (lam R_i A_i + (1 - A_i) / n);  all ones when n = 0."""
    n = len(spec) if n_traj is None else n_traj
    if n == 0:
        return np.ones(shape if shape is not None else spec.regions.shape[1:], dtype=np.float64)
    A = spec.regions[:n].astype(np.float64)
    R = np.asarray(spec.ratios[:n], dtype=np.float64).reshape(-1, *([1] * (A.ndim - 1)))
    return (spec.lam * R * A + (1.0 - A) / n).sum(axis=0)


def weighted_loss(pred, target, spec: tj.LossWeightSpec, n_traj: Optional[int] = None):
    """Trajectory-weighted squared error.

    pred, target: (N, C, h, w) tensors or arrays; ``spec.regions`` is
    (n_traj, N, h, w) and broadcasts over channels. Each trajectory term is a
    mean over all latent elements; the terms are summed.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    n = len(spec) if n_traj is None else n_traj
    if n and spec.regions.shape[1:] != (pred.shape[0], *pred.shape[2:]):
        raise ValueError(f"weight regions {spec.regions.shape[1:]} do not match prediction {tuple(pred.shape)}")
    wmap = loss_weight_map(spec, n, shape=(pred.shape[0], *pred.shape[2:]))
    if torch.is_tensor(pred):
        w = torch.as_tensor(wmap, dtype=pred.dtype, device=pred.device).unsqueeze(1)
        return (w * (pred - target) ** 2).mean()
    return float((wmap[:, None] * (np.asarray(pred) - np.asarray(target)) ** 2).mean())


def box_weight_map(box_cov: np.ndarray, inside: float = 2.0) -> np.ndarray:
    """Box-loss alternative: a flat higher weight inside the box, normalized to mean 1."""
    w = 1.0 + (inside - 1.0) * (box_cov > 0)
    return w / w.mean()


def calibrate_lambda(specs, target_ratio: float = 2.0) -> float:
    """lambda making the mean trajectory-region weight ``target_ratio`` x the background weight.

    The element weight is affine in lambda, w = a + lam * b, and background
    elements always weigh 1.
    """
    a_sum = b_sum = count = 0.0
    for spec in specs:
        n = len(spec)
        if n == 0:
            continue
        A = spec.regions.astype(np.float64)
        region = A.max(axis=0) > 0
        a = ((1.0 - A) / n).sum(axis=0)
        b = (np.asarray(spec.ratios).reshape(-1, *([1] * (A.ndim - 1))) * A).sum(axis=0)
        a_sum += a[region].sum()
        b_sum += b[region].sum()
        count += region.sum()
    if count == 0 or b_sum == 0:
        raise ValueError("no trajectory coverage to calibrate against")
    return float((target_ratio - a_sum / count) / (b_sum / count))


# ---------------------------------------------------------------------------
# timesteps


class TimestepSampler:
    """Source-dependent timestep densities.

    Video clips favour large t (layout and motion), image-simulated clips
    favour small t (appearance). ``strength`` blends each ramp with uniform.
    """

    def __init__(self, train_steps: int = 1000, strength: float = 1.0):
        t = np.arange(train_steps, dtype=np.float64)
        uni = np.full(train_steps, 1.0 / train_steps)
        up = t / t.sum()
        down = (train_steps - t) / (train_steps - t).sum()
        self.train_steps = train_steps
        self.densities = {
            VIDEO: (1 - strength) * uni + strength * up,
            IMAGE: (1 - strength) * uni + strength * down,
        }
        self._cdf = {k: np.cumsum(v) for k, v in self.densities.items()}

    def sample(self, source: str, rng: np.random.Generator, size=None):
        u = rng.random(size)
        cdf = self._cdf[source]
        return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), self.train_steps - 1)


def sample_timestep(source: str, rng, sampler: Optional[TimestepSampler] = None) -> int:
    sampler = sampler or TimestepSampler()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return int(sampler.sample(source, rng))


# ---------------------------------------------------------------------------
# data


@dataclass
class CachedSample:
    z0: torch.Tensor  # (N, 4, h, w)
    z_mask: torch.Tensor
    mask_lat: torch.Tensor  # (N, 1, h, w)
    box_cov: torch.Tensor
    ref: torch.Tensor  # (3, S, S)
    kp_img: torch.Tensor
    traj_map: torch.Tensor  # (N, 3, H, W) uint8
    wmap: torch.Tensor  # (N, 1, h, w)
    box_wmap: torch.Tensor
    source: str
    sample_id: str


def latent_masks(sample: TrainingSample):
    h, w = sample.masks.shape[1:]
    cov = sample.boxes.coverage(h, w)
    return (cov > 0).astype(np.float32)[:, None], cov.astype(np.float32)[:, None]


@torch.no_grad()
def cache_sample(sample: TrainingSample, model: DenoiserAssembly) -> CachedSample:
    clip = torch.from_numpy(sample.clip).permute(0, 3, 1, 2).float()
    cond = torch.from_numpy(sample.conditioned).permute(0, 3, 1, 2).float()
    z = model.encode_latent(torch.cat([clip, cond]))
    n = clip.shape[0]
    mask_lat, box_cov = latent_masks(sample)
    wmap = loss_weight_map(sample.weights, shape=mask_lat[:, 0].shape)
    return CachedSample(
        z0=z[:n].clone(),
        z_mask=z[n:].clone(),
        mask_lat=torch.from_numpy(mask_lat),
        box_cov=torch.from_numpy(box_cov),
        ref=torch.from_numpy(sample.reference.image).permute(2, 0, 1).float(),
        kp_img=torch.from_numpy(sample.keypoint_image).float(),
        traj_map=torch.from_numpy(np.round(sample.traj_map * 255).astype(np.uint8)),
        wmap=torch.from_numpy(wmap.astype(np.float32))[:, None],
        box_wmap=torch.from_numpy(box_weight_map(box_cov[:, 0]).astype(np.float32))[:, None],
        source=sample.source,
        sample_id=sample.sample_id,
    )


def collate(samples) -> dict:
    return {
        "z0": torch.stack([s.z0 for s in samples]),
        "z_mask": torch.stack([s.z_mask for s in samples]),
        "mask_lat": torch.stack([s.mask_lat for s in samples]),
        "box_cov": torch.stack([s.box_cov for s in samples]),
        "ref": torch.stack([s.ref for s in samples]),
        "kp_img": torch.stack([s.kp_img for s in samples]),
        "traj_map": torch.stack([s.traj_map for s in samples]).float() / 255.0,
        "wmap": torch.stack([s.wmap for s in samples]),
        "box_wmap": torch.stack([s.box_wmap for s in samples]),
        "source": [s.source for s in samples],
        "sample_id": [s.sample_id for s in samples],
    }


class MixedBatcher:
    """Draws batches whose per-slot source is video with probability ``ratio``."""

    def __init__(self, video: list, image: list, batch_size: int, ratio: float = 0.7, seed: int = 0):
        if not video and not image:
            raise ValueError("empty corpus")
        self.video, self.image = video, image
        self.batch_size = batch_size
        self.ratio = ratio if image else 1.0
        if not video:
            self.ratio = 0.0
        self.rng = np.random.default_rng(seed)

    def sources(self) -> list:
        return [VIDEO if self.rng.random() < self.ratio else IMAGE for _ in range(self.batch_size)]

    def next(self) -> list:
        out = []
        for src in self.sources():
            pool = self.video if src == VIDEO else self.image
            out.append(pool[self.rng.integers(len(pool))])
        return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    steps: int = 10000
    batch_size: int = 4
    lr: float = 1e-5
    lr_min_frac: float = 0.1  # cosine decay floor
    warmup: int = 200
    grad_clip: float = 1.0
    p_uncond: float = 0.1
    mix_ratio: float = 0.7
    ramp_strength: float = 1.0
    loss: str = "weighted"  # weighted | mse | box
    freeze_id: bool = False
    # corpus
    n_scenes: int = 500
    samples_per_scene: int = 2
    n_images: int = 430
    scene_frames: int = 12
    clip_len: int = 8
    size: int = 64
    max_sprites: int = 3
    pairs: sg.PairOptions = field(default_factory=sg.PairOptions)
    # autoencoder
    ae_steps: int = 4000
    ae_batch: int = 16
    ae_lr: float = 1e-3
    ae_checkpoint: str = ""  # reuse a pretrained autoencoder when the file exists
    # bookkeeping
    checkpoint_every: int = 2000
    log_every: int = 50

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        pairs = sg.PairOptions(**d.pop("pairs", {}))
        return cls(model=model, pairs=pairs, **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _set(cfg: TrainConfig, **changes) -> TrainConfig:
    d = cfg.to_dict()
    for key, value in changes.items():
        node = d
        *path, leaf = key.split("__")
        for part in path:
            node = node[part]
        node[leaf] = value
    return TrainConfig.from_dict(d)


# ablation presets: name -> config overrides (nested keys joined by "__")
PRESETS = {
    "full": {},
    "only-video": {"mix_ratio": 1.0},
    "only-image": {"mix_ratio": 0.0},
    "frozen-id": {"freeze_id": True},
    "no-kp-marks": {"pairs__keypoint_marks": False},
    "no-pixel-warper": {"model__use_warper": False},
    "no-weighted-loss": {"loss": "mse"},
    "box-loss": {"loss": "box"},
    "random-points": {"pairs__points": "random"},
    "grid-points": {"pairs__points": "grid"},
    "no-nms": {"pairs__points": "no-nms"},
    "tight-box": {"pairs__expand": 0.0, "pairs__union_threshold": 0.0},
}


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return _set(cfg, **PRESETS[name])


def load_config(path) -> TrainConfig:
    """TrainConfig from a JSON or YAML key-value file (missing keys keep their defaults)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        d = yaml.safe_load(text) or {}
    else:
        d = json.loads(text)
    if not isinstance(d, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    unknown = set(d) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    return TrainConfig.from_dict(d)


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    p = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (cfg.lr_min_frac + (1 - cfg.lr_min_frac) * 0.5 * (1 + math.cos(math.pi * min(p, 1.0))))


def training_step(batch: list, model: DenoiserAssembly, opt, cfg: TrainConfig, sampler: TimestepSampler, rng: np.random.Generator, predictor=None):
    """One optimizer update on a list of CachedSample; returns the batch loss.

    ``predictor(z_t, t, cond, drop)`` overrides the model's noise prediction
    (used by tests with an oracle predictor).
    """
    b = collate(batch)
    n_b = len(batch)
    t = torch.as_tensor(np.array([sampler.sample(s, rng) for s in b["source"]]), dtype=torch.long)
    g = torch.Generator().manual_seed(int(rng.integers(2**62)))
    noise = torch.randn(b["z0"].shape, generator=g)
    z_t = model.add_noise(b["z0"], noise, t)
    drop = torch.as_tensor(rng.random(n_b) < cfg.p_uncond)
    cond = {k: b[k] for k in ("ref", "kp_img", "traj_map", "mask_lat", "z_mask", "box_cov")}
    cond["use_control"] = model.control is not None
    if predictor is not None:
        pred = predictor(z_t, t, cond, drop, noise)
    else:
        pred = model.predict_noise(z_t, t, cond, drop)
    if cfg.loss == "weighted":
        w = b["wmap"]
    elif cfg.loss == "box":
        w = b["box_wmap"]
    else:
        w = torch.ones_like(b["wmap"])
    per_sample = (w * (pred - noise) ** 2).flatten(1).mean(dim=1)
    loss = per_sample.mean()
    if not torch.isfinite(loss):
        bad = [sid for sid, v in zip(b["sample_id"], per_sample.detach()) if not torch.isfinite(v)]
        raise NonFiniteLossError(f"non-finite loss at timesteps {t.tolist()}; offending samples: {bad}")
    if opt is not None and loss.requires_grad:
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for grp in opt.param_groups for p in grp["params"]], cfg.grad_clip)
        opt.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# corpus


def scene_seed(i: int, split: str = "train") -> int:
    return {"train": 0, "heldout": 1_000_000, "ae": 2_000_000, "image": 3_000_000}[split] + i


def build_scene(i: int, cfg: TrainConfig, split: str = "train"):
    seed = scene_seed(i, split)
    n_sprites = 1 + int(np.random.default_rng(seed).integers(cfg.max_sprites))
    return sg.generate_scene(seed, cfg.scene_frames, cfg.size, cfg.size, n_sprites)


def build_samples(cfg: TrainConfig) -> tuple:
    video, image = [], []
    for i in range(cfg.n_scenes):
        scene = build_scene(i, cfg)
        for k in range(cfg.samples_per_scene):
            video.append(sg.make_training_sample(scene, cfg.clip_len, seed=1000 * i + k, opts=cfg.pairs))
    for i in range(cfg.n_images):
        scene = sg.simulated_scene(scene_seed(i, "image"), cfg.clip_len + 1, cfg.size, cfg.size)
        image.append(sg.make_training_sample(scene, cfg.clip_len, seed=i, opts=cfg.pairs))
    return video, image


def ae_frames(n_scenes: int, cfg: TrainConfig, split: str = "ae") -> torch.Tensor:
    frames = []
    for i in range(n_scenes):
        scene = build_scene(i, cfg, split)
        frames.append(scene.frames[:: 2])
        sim = sg.simulated_scene(scene_seed(i, split) + 500_000, 5, cfg.size, cfg.size)
        frames.append(sim.frames[::2])
    arr = np.concatenate(frames)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float().contiguous()


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return 100.0 if mse == 0 else -10.0 * math.log10(mse)


def train_autoencoder(model: DenoiserAssembly, cfg: TrainConfig, n_scenes: int = 400, log_fn=None) -> dict:
    """Fit the frame autoencoder on synthetic frames, then freeze it."""
    torch.manual_seed(cfg.seed)
    ae = model.autoencoder
    ae.requires_grad_(True)
    ae.train()
    frames = ae_frames(n_scenes, cfg)
    held = ae_frames(20, cfg, "heldout")
    opt = torch.optim.Adam(ae.parameters(), cfg.ae_lr)
    rng = np.random.default_rng(cfg.seed)
    for step in range(cfg.ae_steps):
        lr = cfg.ae_lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / cfg.ae_steps)))
        for grp in opt.param_groups:
            grp["lr"] = lr
        idx = rng.integers(len(frames), size=cfg.ae_batch)
        x = frames[idx]
        rec = ae.decode_raw(ae.encode_raw(x))
        loss = (rec - x).pow(2).mean() + 0.1 * (rec - x).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_fn and step % 200 == 0:
            log_fn(f"ae step {step} loss {loss.item():.5f}")
    ae.eval()
    ae.requires_grad_(False)
    with torch.no_grad():
        ae.fit_standardization(frames[: min(len(frames), 2048)])
        rec = torch.cat([ae.decode(ae.encode(held[i: i + 64])) for i in range(0, len(held), 64)])
    return {"ae_psnr_heldout": psnr(rec, held)}


def save_autoencoder(ae, path, info: dict) -> None:
    from safetensors.torch import save_file

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file({k: v.contiguous() for k, v in ae.state_dict().items()}, str(path), metadata={"info": json.dumps(info)})


def load_autoencoder(ae, path) -> dict:
    from safetensors import safe_open
    from safetensors.torch import load_file

    ae.load_state_dict(load_file(str(path)))
    with safe_open(str(path), framework="pt") as f:
        return json.loads((f.metadata() or {}).get("info", "{}"))


def prepare_autoencoder(model: DenoiserAssembly, cfg: TrainConfig, log_fn=print) -> dict:
    if cfg.ae_checkpoint and Path(cfg.ae_checkpoint).exists():
        info = load_autoencoder(model.autoencoder, cfg.ae_checkpoint)
        log_fn(f"loaded autoencoder from {cfg.ae_checkpoint}: {info}")
    else:
        t0 = time.time()
        info = train_autoencoder(model, cfg, log_fn=log_fn)
        log_fn(f"autoencoder trained in {time.time() - t0:.0f}s: {info}")
        if cfg.ae_checkpoint:
            save_autoencoder(model.autoencoder, cfg.ae_checkpoint, info)
    model.autoencoder.requires_grad_(False)
    return info


def train(cfg: TrainConfig, out_dir, model: Optional[DenoiserAssembly] = None, log_fn=print) -> DenoiserAssembly:
    """Full toy training run; writes loss.csv, config.json and model.safetensors to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    extra = {"seed": cfg.seed, "train_config": cfg.to_dict()}
    if model is None:
        model = DenoiserAssembly(cfg.model)
        extra.update(prepare_autoencoder(model, cfg, log_fn))
    model.autoencoder.requires_grad_(False)

    t0 = time.time()
    video, image = build_samples(cfg)
    cached_v = [cache_sample(s, model) for s in video]
    cached_i = [cache_sample(s, model) for s in image]
    del video, image
    log_fn(f"corpus: {len(cached_v)} video / {len(cached_i)} image samples in {time.time() - t0:.0f}s")
    if cfg.mix_ratio >= 1.0:
        cached_i = []
    elif cfg.mix_ratio <= 0.0:
        cached_v = []
    batcher = MixedBatcher(cached_v, cached_i, cfg.batch_size, cfg.mix_ratio, cfg.seed)
    sampler = TimestepSampler(cfg.model.train_steps, cfg.ramp_strength)
    params = list(model.trainable_parameters(freeze_id=cfg.freeze_id))
    if cfg.freeze_id:
        model.id_extractor.requires_grad_(False)
    opt = torch.optim.Adam(params, cfg.lr)
    model.train()
    model.autoencoder.eval()
    t0 = time.time()
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "elapsed_s"])
        for step in range(cfg.steps):
            lr = _lr_at(step, cfg)
            for grp in opt.param_groups:
                grp["lr"] = lr
            loss = training_step(batcher.next(), model, opt, cfg, sampler, rng)
            writer.writerow([step, f"{loss:.6f}", f"{lr:.3e}", f"{time.time() - t0:.1f}"])
            if step % cfg.log_every == 0:
                fh.flush()
                log_fn(f"step {step} loss {loss:.4f} lr {lr:.2e} ({time.time() - t0:.0f}s)")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / "model.safetensors", extra | {"step": step + 1})
    model.eval()
    save_checkpoint(model, out / "model.safetensors", extra | {"step": cfg.steps})
    return model
