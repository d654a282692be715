"""Unedited-region PSNR, identity similarity, point-tracking metrics and held-out evaluation."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import trajectory as tj
from .dataio import ReferenceObject, SceneBundle
from .tracking import masked_ncc_map, relocate_points

BASE_THRESHOLDS = (1, 2, 4, 8, 16)
PSNR_CAP = 100.0


def _region_masks(boxes, shape) -> np.ndarray:
    n, h, w = shape
    if isinstance(boxes, tj.BoxSequence):
        return boxes.masks(h, w)
    m = np.asarray(boxes, dtype=bool)
    if m.shape != (n, h, w):
        raise ValueError(f"box masks must be {(n, h, w)}, got {m.shape}")
    return m


def psnr_unedited(edited: np.ndarray, source: np.ndarray, boxes) -> float:
    """PSNR (peak 1) over pixels outside the per-frame boxes, capped at 100 dB."""
    edited = np.asarray(edited, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if edited.shape != source.shape:
        raise ValueError(f"edited {edited.shape} and source {source.shape} differ in shape")
    keep = ~_region_masks(boxes, edited.shape[:3])
    if not keep.any():
        raise ValueError("no unedited pixels")
    mse = ((edited - source) ** 2)[keep].mean()
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * math.log10(mse)))


# ---------------------------------------------------------------------------
# identity


def square_crop(frame: np.ndarray, box, size: int) -> np.ndarray:
    """Box crop zero-padded to a centered square and resized to size x size."""
    x0, y0, x1, y1 = [int(v) for v in box]
    crop = frame[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    side = max(ch, cw, 1)
    sq = np.zeros((side, side, 3), dtype=np.float32)
    oy, ox = (side - ch) // 2, (side - cw) // 2
    sq[oy: oy + ch, ox: ox + cw] = crop
    t = torch.from_numpy(sq).permute(2, 0, 1)[None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()


@torch.no_grad()
def identity_embedding(images: np.ndarray, model) -> torch.Tensor:
    """Mean ID token of each (K, S, S, 3) image."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return model.extract_id_tokens(x).mean(dim=1)


def id_similarity(edited: np.ndarray, boxes, ref: ReferenceObject, model) -> float:
    """Mean over frames of the cosine similarity between box-crop and reference embeddings."""
    edited = np.asarray(edited, dtype=np.float32)
    box_arr = boxes.boxes if isinstance(boxes, tj.BoxSequence) else np.asarray(boxes)
    size = model.cfg.ref_size
    crops = np.stack([square_crop(f, b, size) for f, b in zip(edited, box_arr)])
    if (crops.reshape(len(crops), -1).max(axis=1) == 0).any():
        warnings.warn("all-black crop in id_similarity; its similarity is computed anyway")
    ref_img = ref.image
    if ref_img.shape[0] != size:
        ref_img = square_crop(ref_img, (0, 0, ref_img.shape[1], ref_img.shape[0]), size)
    emb = identity_embedding(np.concatenate([crops, ref_img[None]]), model)
    sims = F.cosine_similarity(emb[:-1], emb[-1:].expand_as(emb[:-1]), dim=1)
    return float(sims.mean())


# ---------------------------------------------------------------------------
# tracking


@dataclass
class TrackingReport:
    aj: float
    delta_avg_vis: float
    oa: float
    thresholds: list
    jaccard: list = field(default_factory=list)  # per threshold
    delta: list = field(default_factory=list)  # per threshold

    def to_dict(self) -> dict:
        return asdict(self)


def default_thresholds(h: int, w: int) -> list:
    return [t * min(h, w) / 256.0 for t in BASE_THRESHOLDS]


def score_tracks(pred_xy, pred_vis, gt_xy, gt_vis, thresholds: Sequence[float]) -> TrackingReport:
    """Position/visibility scores of predicted tracks against ground truth.

    within = distance < threshold. delta: fraction of GT-visible points within
    threshold. Jaccard = TP / (TP + FP + FN) with TP = visible, predicted
    visible and within; FP = predicted visible but GT-occluded or not within;
    FN = GT-visible but predicted occluded or not within.
    """
    pred_xy = np.asarray(pred_xy, dtype=np.float64)
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    pred_vis = np.asarray(pred_vis, dtype=bool)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if gt_vis.size == 0:
        raise ValueError("no tracks to score")
    if not gt_vis.any():
        raise ValueError("no ground-truth-visible points to score")
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly ascending, got {thresholds}")
    dist = np.linalg.norm(pred_xy - gt_xy, axis=-1)
    deltas, jacs = [], []
    for thr in thresholds:
        within = dist < thr
        deltas.append(float(within[gt_vis].mean()))
        tp = (gt_vis & pred_vis & within).sum()
        fp = (pred_vis & ~(gt_vis & within)).sum()
        fn = (gt_vis & ~(pred_vis & within)).sum()
        jacs.append(float(tp / (tp + fp + fn)))
    oa = float((pred_vis == gt_vis).mean())
    return TrackingReport(float(np.mean(jacs)), float(np.mean(deltas)), oa, thresholds, jacs, deltas)


def tracking_metrics(edited: np.ndarray, source: np.ndarray, gt_xy, gt_vis, thresholds: Optional[Sequence[float]] = None) -> TrackingReport:
    """Re-find the source's ground-truth points in ``edited`` and score them."""
    edited = np.asarray(edited)
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if gt_vis.ndim != 2 or gt_vis.shape[0] == 0:
        raise ValueError("no tracks to score")
    if gt_vis.shape[1] != edited.shape[0]:
        raise ValueError(f"tracks have {gt_vis.shape[1]} frames, video has {edited.shape[0]}")
    if thresholds is None:
        thresholds = default_thresholds(*edited.shape[1:3])
    pred, pvis, _ = relocate_points(edited, source, gt_xy, gt_vis)
    return score_tracks(pred, pvis, gt_xy, gt_vis, thresholds)


# ---------------------------------------------------------------------------
# object center


def object_template(frame: np.ndarray, mask: np.ndarray):
    """Tight crop of a masked object: (patch, alpha, centroid offset inside the patch)."""
    ys, xs = np.nonzero(mask)
    if not len(xs):
        raise ValueError("object mask is empty")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    alpha = mask[y0:y1, x0:x1]
    patch = frame[y0:y1, x0:x1] * alpha[..., None]
    return patch, alpha, np.array([xs.mean() - x0, ys.mean() - y0])


def locate_object(frames: np.ndarray, template: tuple, boxes: tj.BoxSequence, margin: int = 0) -> np.ndarray:
    """Per-frame object centroid found by masked NCC inside the (padded) box."""
    patch, alpha, offset = template
    ph, pw = alpha.shape
    h, w = frames.shape[1:3]
    centers = np.zeros((len(frames), 2))
    for f, (x0, y0, x1, y1) in enumerate(boxes.boxes):
        ox, oy = max(0, x0 - margin - pw // 2), max(0, y0 - margin - ph // 2)
        region = frames[f, oy: min(h, y1 + margin + ph // 2), ox: min(w, x1 + margin + pw // 2)]
        if region.shape[0] < ph or region.shape[1] < pw:
            centers[f] = [(x0 + x1) / 2, (y0 + y1) / 2]
            continue
        score = masked_ncc_map(region, patch, alpha)
        iy, ix = np.unravel_index(np.argmax(score), score.shape)
        centers[f] = [ox + ix + offset[0], oy + iy + offset[1]]
    return centers


def mask_centroids(masks: np.ndarray) -> np.ndarray:
    out = []
    for m in masks:
        ys, xs = np.nonzero(m)
        out.append([xs.mean(), ys.mean()] if len(xs) else [np.nan, np.nan])
    return np.array(out)


# ---------------------------------------------------------------------------
# held-out corpus evaluation


@dataclass
class SceneResult:
    scene: int
    psnr: float
    id_sim: float
    id_sim_mismatch: float
    aj: float
    delta_avg_vis: float
    oa: float
    center_dev: float
    thresholds: list = field(default_factory=list)
    jaccard: list = field(default_factory=list)
    delta: list = field(default_factory=list)


SCALAR_FIELDS = ("psnr", "id_sim", "id_sim_mismatch", "aj", "delta_avg_vis", "oa", "center_dev")


def evaluate_heldout(model, train_cfg, sampler_cfg, n_scenes: int = 50, scorer=None, log_fn=None, start: int = 0) -> list:
    """Insert each held-out scene's own object back along its ground-truth motion and score it.

    ``scorer`` supplies the identity embedding (defaults to ``model``); the
    mismatched reference comes from the next held-out scene.
    """
    from . import synthgen as sg
    from .inference import insert_object
    from .training import build_scene

    scorer = scorer or model
    pairs = train_cfg.pairs
    samples = []
    for i in range(start, start + n_scenes + 1):
        scene = build_scene(i, train_cfg, "heldout")
        samples.append((scene, sg.make_training_sample(scene, train_cfg.clip_len, seed=i, opts=pairs)))
    results = []
    for k in range(n_scenes):
        scene, s = samples[k]
        other = samples[k + 1][1].reference
        masks = scene.masks[s.clip_start: s.clip_start + len(s.clip)]
        clip = SceneBundle(s.clip, masks, s.tracks, s.reference, dict(scene.meta))
        edited = insert_object(clip, s.reference, s.trajectories, sampler_cfg, model, boxes=s.boxes, keypoint_marks=pairs.keypoint_marks)
        gt_xy = np.stack([t.xy for t in s.tracks]) if s.tracks else np.zeros((0, len(s.clip), 2))
        gt_vis = np.stack([t.vis for t in s.tracks]) if s.tracks else np.zeros((0, len(s.clip)), bool)
        rep = tracking_metrics(edited.frames, s.clip, gt_xy, gt_vis)
        ref_f = int(np.argmax(masks.reshape(len(masks), -1).sum(axis=1)))
        tmpl = object_template(s.clip[ref_f], masks[ref_f])
        dev = np.linalg.norm(locate_object(edited.frames, tmpl, s.boxes) - mask_centroids(masks), axis=1)
        res = SceneResult(
            scene=start + k,
            psnr=psnr_unedited(edited.frames, s.clip, s.boxes),
            id_sim=id_similarity(edited.frames, s.boxes, s.reference, scorer),
            id_sim_mismatch=id_similarity(edited.frames, s.boxes, other, scorer),
            aj=rep.aj,
            delta_avg_vis=rep.delta_avg_vis,
            oa=rep.oa,
            center_dev=float(np.nanmean(dev)),
            thresholds=rep.thresholds,
            jaccard=rep.jaccard,
            delta=rep.delta,
        )
        results.append(res)
        if log_fn:
            log_fn(f"scene {res.scene}: " + ", ".join(f"{k}={getattr(res, k):.3f}" for k in SCALAR_FIELDS))
    return results


def evaluate_checkpoint(checkpoint, n_scenes: int, sampler_cfg, scorer_path=None, log_fn=None) -> tuple:
    """Held-out evaluation of a saved model; returns (results, setup).

    The training config stored in the checkpoint decides how held-out pairs
    are built, so ablations are scored on their own pair settings.
    """
    from .model import checkpoint_extra, load_checkpoint
    from .training import TrainConfig

    model = load_checkpoint(checkpoint)
    extra = checkpoint_extra(checkpoint)
    cfg = TrainConfig.from_dict(extra["train_config"]) if "train_config" in extra else TrainConfig(model=model.cfg)
    scorer = load_checkpoint(scorer_path) if scorer_path else model
    results = evaluate_heldout(model, cfg, sampler_cfg, n_scenes, scorer=scorer, log_fn=log_fn)
    setup = {
        "checkpoint_sha256": file_sha256(checkpoint),
        "scorer_sha256": file_sha256(scorer_path or checkpoint),
        "n_scenes": n_scenes,
        "sampler": asdict(sampler_cfg),
        "train_steps": extra.get("step"),
    }
    return results, setup


def summarize(results: list) -> dict:
    out = {k: float(np.mean([getattr(r, k) for r in results])) for k in SCALAR_FIELDS}
    out["id_margin_rate"] = float(np.mean([r.id_sim > r.id_sim_mismatch for r in results]))
    out["n_scenes"] = len(results)
    return out


def write_report(results: list, out_dir, plot: bool = False, setup: Optional[dict] = None) -> dict:
    """Per-scene JSON, corpus means as CSV, and optionally a per-threshold plot.

    ``setup`` (checkpoint hashes, sampler settings) is stored alongside so
    cached reports can be checked against the run that produced them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(results)
    payload = {"scenes": [asdict(r) for r in results], "mean": summary, "setup": setup or {}}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(summary))
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in summary.values()])
    if plot and results:
        mean = TrackingReport(
            summary["aj"],
            summary["delta_avg_vis"],
            summary["oa"],
            results[0].thresholds,
            list(np.mean([r.jaccard for r in results], axis=0)),
            list(np.mean([r.delta for r in results], axis=0)),
        )
        plot_threshold_curves({"mean": mean}, out / "thresholds.png")
    return summary


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def plot_threshold_curves(reports: dict, path) -> None:
    """Per-threshold delta and Jaccard curves, one line per named report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for name, rep in reports.items():
        axes[0].plot(rep.thresholds, rep.delta, marker="o", label=name)
        axes[1].plot(rep.thresholds, rep.jaccard, marker="o", label=name)
    for ax, title in zip(axes, ("delta (visible)", "Jaccard")):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("threshold [px]")
        ax.set_title(title)
        ax.set_ylim(0, 1.02)
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
