"""Command-line entry point: gen-data, traj, train, insert, eval, ablate.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Relative --out paths are placed under $VIDINSERT_OUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

OUT_ROOT_ENV = "VIDINSERT_OUT_ROOT"

log = logging.getLogger("vidinsert")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def _parse_box(text: str):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4 or vals[2] <= vals[0] or vals[3] <= vals[1]:
        raise ValueError(f"box {text!r} must be x0,y0,x1,y1 with x1 > x0 and y1 > y0")
    return vals


# ---------------------------------------------------------------------------
# subcommands


def _gen_one(args):
    from .dataio import save_scene_bundle
    from .synthgen import generate_scene

    seed, out, frames, size, sprites = args
    bundle = generate_scene(seed, frames, size, size, n_sprites=1 + seed % sprites)
    save_scene_bundle(bundle, out / f"scene_{seed:06d}")


def cmd_gen_data(a) -> int:
    out = out_path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(a.seed + i, out, a.frames, a.size, a.sprites) for i in range(a.n)]
    if a.workers > 1:
        with ProcessPoolExecutor(a.workers) as ex:
            list(ex.map(_gen_one, jobs))
    else:
        for job in jobs:
            _gen_one(job)
    (out / "corpus.json").write_text(json.dumps({"seed": a.seed, "n": a.n, "frames": a.frames, "size": a.size}, sort_keys=True) + "\n")
    print(f"wrote {a.n} scene bundles to {out}")
    return 0


def cmd_traj(a) -> int:
    from . import synthgen as sg
    from . import trajectory as tj
    from .dataio import load_scene_bundle

    scene = load_scene_bundle(a.scene)
    h, w = scene.hw
    use_grid = a.points == "grid"
    cands = tj.init_keypoints(scene, use_grid=use_grid, within_mask=use_grid)
    radius = a.nms_radius or tj.default_nms_radius(h, w)
    if a.points in ("nms", "grid"):
        cands = tj.nms_filter(cands, radius)
    elif a.points == "random":
        rng = np.random.default_rng(a.seed)
        cands = [cands[i] for i in rng.permutation(len(cands))]
        for rank, c in enumerate(cands):
            c.path_length = float(len(cands) - rank)
    ts = tj.select_trajectories(cands, a.n_sel)
    out = out_path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = [{"xy": np.round(c.xy, 3).tolist(), "vis": c.vis.astype(int).tolist(), "color": np.round(col, 4).tolist()} for c, col in zip(ts.candidates, ts.colors)]
    (out / "tracks.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    if a.dump_conditions:
        traj = tj.rasterize_trajectory_map(ts, scene.n_frames, h, w)
        for f in range(scene.n_frames):
            _write_png(out / "traj_map" / f"{f:04d}.png", traj[f].transpose(1, 2, 0))
        ref = scene.reference
        if ref is None or not ref.keypoints or any(c.index < 0 for c in ts.candidates):
            # crop the reference from the frame where the object is largest
            f0 = int(np.argmax(scene.masks.reshape(scene.n_frames, -1).sum(axis=1)))
            pts = np.array([c.xy[f0] for c in ts.candidates]) if len(ts) else None
            ref = sg.crop_reference(scene.frames[f0], scene.masks[f0], pts)
        else:
            ref = type(ref)(ref.image, ref.alpha, [ref.keypoints[c.index] for c in ts.candidates])
        for k, c in enumerate(ts.candidates):
            c.index = k
        _write_png(out / "keypoint_image.png", tj.render_keypoint_image(ref, ts).transpose(1, 2, 0))
    print(f"selected {len(ts)} trajectories -> {out / 'tracks.json'}")
    return 0


def _train_config(a):
    from .training import TrainConfig, apply_preset, load_config

    cfg = load_config(a.config) if a.config else TrainConfig()
    if getattr(a, "preset", None):
        cfg = apply_preset(cfg, a.preset)
    if a.seed is not None:
        cfg.seed = a.seed
    if a.steps is not None:
        cfg.steps = a.steps
    if getattr(a, "ae_checkpoint", None):
        cfg.ae_checkpoint = a.ae_checkpoint
    return cfg


def cmd_train(a) -> int:
    from .training import train

    cfg = _train_config(a)
    out = out_path(a.out)
    train(cfg, out, log_fn=print)
    print(f"checkpoint: {out / 'model.safetensors'}")
    return 0


def _load_tracks_file(path, n_frames: int):
    from . import trajectory as tj

    data = json.loads(Path(path).read_text())
    cands = []
    for i, t in enumerate(data):
        xy = np.asarray(t["xy"], dtype=np.float64).reshape(-1, 2)
        vis = np.asarray(t.get("vis", [1] * len(xy))).astype(bool)
        if len(xy) != n_frames or len(vis) != n_frames:
            raise ValueError(f"trajectory {i} has {len(xy)} positions, scene has {n_frames} frames")
        cands.append(tj.TrajectoryCandidate(xy, vis, tj.path_length(xy, vis), "user", i))
    return tj.select_trajectories(cands, len(cands)) if cands else tj.TrajectorySet()


def _load_reference(path, size: int):
    from .dataio import ReferenceObject

    img = np.asarray(Image.open(path).convert("RGBA").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    alpha = img[..., 3] >= 0.5
    if alpha.all():
        alpha = img[..., :3].max(axis=-1) > 0  # RGB image with black background
    return ReferenceObject((img[..., :3] * alpha[..., None]).astype(np.float32), alpha, [])


def cmd_insert(a) -> int:
    from . import trajectory as tj
    from .dataio import ReferenceObject, load_scene_bundle, save_scene_bundle
    from .inference import SamplerConfig, insert_object
    from .model import load_checkpoint

    if not a.traj and not a.boxes:
        raise UsageError("one of --traj or --boxes is required")
    scene = load_scene_bundle(a.scene)
    model = load_checkpoint(a.checkpoint)
    ref = _load_reference(a.ref, model.cfg.ref_size)
    start_end = None
    if a.boxes:
        parts = a.boxes.split(":")
        if len(parts) != 2:
            raise ValueError("--boxes takes START:END, each x0,y0,x1,y1")
        start_end = (_parse_box(parts[0]), _parse_box(parts[1]))
    ts = _load_tracks_file(a.traj, scene.n_frames) if a.traj else None
    if ts is not None and len(ts):
        box0 = start_end[0] if start_end else tj.box_sequence_from_masks(scene.masks).boxes[0]
        ref = ReferenceObject(ref.image, ref.alpha, tj.correspond_by_box([c.xy[0] for c in ts.candidates], box0, ref.image.shape[0]))
    cfg = SamplerConfig(a.steps, a.cfg, 0.0, a.seed)
    edited = insert_object(scene, ref, ts, cfg, model, start_end=start_end)
    out = out_path(a.out)
    save_scene_bundle(edited, out)
    print(f"edited scene written to {out}")
    return 0


def _evaluate(checkpoint, n, steps, guidance, seed, scorer_path=None):
    from .evaluation import evaluate_checkpoint
    from .inference import SamplerConfig

    return evaluate_checkpoint(checkpoint, n, SamplerConfig(steps, guidance, 0.0, seed), scorer_path, log_fn=print)


def cmd_eval(a) -> int:
    from .evaluation import write_report

    results, setup = _evaluate(a.checkpoint, a.n, a.steps, a.cfg, a.seed, a.scorer)
    summary = write_report(results, out_path(a.out), plot=a.plot, setup=setup)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_ablate(a) -> int:
    from .evaluation import write_report
    from .training import train

    out = out_path(a.out)
    rows = {}
    for name in ("full", a.preset):
        run_dir = out / name
        ckpt = run_dir / "model.safetensors"
        if not ckpt.exists():
            b = argparse.Namespace(**{**vars(a), "preset": name})
            train(_train_config(b), run_dir, log_fn=print)
        scorer = out / "full" / "model.safetensors"
        results, setup = _evaluate(ckpt, a.n, a.sample_steps, a.cfg, a.eval_seed, scorer)
        rows[name] = write_report(results, run_dir, setup=setup)
    keys = list(rows["full"])
    with open(out / f"compare_{a.preset}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset"] + keys)
        for name, summary in rows.items():
            writer.writerow([name] + [summary[k] for k in keys])
    print(f"comparison written to {out / f'compare_{a.preset}.csv'}")
    for name, summary in rows.items():
        print(f"{name:>18}: aj={summary['aj']:.4f} id_sim={summary['id_sim']:.4f} center_dev={summary['center_dev']:.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    from .training import PRESETS

    p = Parser(prog="vidinsert", description="Trajectory-controlled video object insertion (toy scale).")
    sub = p.add_subparsers(dest="command", parser_class=Parser, metavar="{gen-data,traj,train,insert,eval,ablate}")

    g = sub.add_parser("gen-data", help="generate synthetic scene bundles")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=50)
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--sprites", type=int, default=3, help="scenes hold 1..SPRITES sprites")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("traj", help="sample trajectories of a scene's target object")
    t.add_argument("--scene", required=True)
    t.add_argument("--n-sel", type=int, default=8)
    t.add_argument("--nms-radius", type=float, default=None)
    t.add_argument("--points", choices=("nms", "no-nms", "grid", "random"), default="nms")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dump-conditions", action="store_true", help="write trajectory-map and keypoint-image PNGs")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_traj)

    for name, func, help_ in (("train", cmd_train, "train a model"), ("ablate", cmd_ablate, "train and compare an ablation preset against full")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--config", default=None, help="JSON or YAML training config")
        r.add_argument("--preset", choices=sorted(PRESETS), default=None if name == "train" else "no-pixel-warper")
        r.add_argument("--seed", type=int, default=None)
        r.add_argument("--steps", type=int, default=None)
        r.add_argument("--ae-checkpoint", default=None, help="pretrained autoencoder to reuse (created if missing)")
        r.add_argument("--out", required=True)
        r.set_defaults(func=func)
    ab = sub.choices["ablate"]
    ab.add_argument("--n", type=int, default=50, help="held-out scenes to evaluate")
    ab.add_argument("--sample-steps", type=int, default=50)
    ab.add_argument("--cfg", type=float, default=10.0)
    ab.add_argument("--eval-seed", type=int, default=0)

    i = sub.add_parser("insert", help="insert a reference object into a scene")
    i.add_argument("--scene", required=True)
    i.add_argument("--ref", required=True, help="reference PNG (RGBA, or RGB on black)")
    i.add_argument("--traj", default=None, help="tracks.json with per-frame xy and vis")
    i.add_argument("--boxes", default=None, help="start and end boxes: x0,y0,x1,y1:x0,y0,x1,y1")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--steps", type=int, default=50)
    i.add_argument("--cfg", type=float, default=10.0)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_insert)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scorer", default=None, help="checkpoint whose ID extractor scores identity")
    e.add_argument("--n", type=int, default=50)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--cfg", type=float, default=10.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--plot", action="store_true", help="render per-threshold curves to PNG")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def run(argv=None) -> int:
    from .dataio import BundleParseError, BundleValidationError

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError, BundleParseError, BundleValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
