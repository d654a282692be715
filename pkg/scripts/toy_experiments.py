"""Train the toy full model and its ablations, then evaluate them on held-out scenes.

Writes artifacts/runs/<preset>/model.safetensors and artifacts/eval/<preset>/report.json.
Finished runs and up-to-date reports are skipped, so the script can be restarted.
"""

import argparse
import json
import logging
from pathlib import Path

from vidinsert.evaluation import evaluate_checkpoint, file_sha256, write_report
from vidinsert.inference import SamplerConfig
from vidinsert.model import checkpoint_extra
from vidinsert.training import apply_preset, load_config, train

PRESETS = ("full", "no-pixel-warper", "tight-box", "no-weighted-loss", "frozen-id")


def report_is_current(path: Path, ckpt: Path, scorer: Path, n: int, sampler: SamplerConfig) -> bool:
    if not path.exists():
        return False
    setup = json.loads(path.read_text()).get("setup", {})
    return (
        setup.get("checkpoint_sha256") == file_sha256(ckpt)
        and setup.get("scorer_sha256") == file_sha256(scorer)
        and setup.get("n_scenes") == n
        and setup.get("sampler") == vars(sampler)
    )


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"))
    p.add_argument("--artifacts", default=str(Path(__file__).resolve().parents[1] / "artifacts"))
    p.add_argument("--presets", nargs="+", default=list(PRESETS))
    p.add_argument("--steps", type=int, default=None, help="override the config's training steps")
    p.add_argument("--n", type=int, default=50, help="held-out scenes")
    p.add_argument("--sample-steps", type=int, default=50)
    p.add_argument("--cfg", type=float, default=10.0)
    p.add_argument("--skip-eval", action="store_true")
    a = p.parse_args()
    # sprites with few keypoints are common in the corpus; the per-sample warning is noise here
    logging.getLogger("vidinsert.trajectory").setLevel(logging.ERROR)

    root = Path(a.artifacts)
    base = load_config(a.config)
    base.ae_checkpoint = str(root / "ae.safetensors")
    if a.steps is not None:
        base.steps = a.steps
    for name in a.presets:
        ckpt = root / "runs" / name / "model.safetensors"
        if ckpt.exists() and checkpoint_extra(ckpt).get("step") == base.steps:
            print(f"[{name}] trained checkpoint found", flush=True)
            continue
        print(f"[{name}] training {base.steps} steps", flush=True)
        train(apply_preset(base, name), ckpt.parent, log_fn=lambda s, n=name: print(f"[{n}] {s}", flush=True))
    if a.skip_eval:
        return
    sampler = SamplerConfig(a.sample_steps, a.cfg, 0.0, 0)
    scorer = root / "runs" / "full" / "model.safetensors"
    for name in a.presets:
        ckpt = root / "runs" / name / "model.safetensors"
        out = root / "eval" / name
        if report_is_current(out / "report.json", ckpt, scorer, a.n, sampler):
            print(f"[{name}] report up to date", flush=True)
            continue
        results, setup = evaluate_checkpoint(ckpt, a.n, sampler, scorer, log_fn=lambda s, n=name: print(f"[{n}] {s}", flush=True))
        summary = write_report(results, out, plot=True, setup=setup)
        print(f"[{name}] " + json.dumps(summary, sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
