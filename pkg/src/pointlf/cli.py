"""Command-line entry point: ``pointlf {synth,detect,train,eval,render,harness}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .geometry import perturb_poses
from .harness import (
    FRAME_COLUMNS,
    NOISE_SEED_OFFSET,
    ExperimentPlan,
    eval_poses,
    evaluate_views,
    render_views,
    run_ablation,
    run_noise_sweep,
    write_table,
)
from .imageio import read_pgm, write_pgm, write_ppm
from .lightfield import COUNTERS
from .metrics import ate
from .motion import build_masks, vote_table
from .scene import PRESETS, SynthConfig, load_dataset, save_dataset, synthesize_scene
from .trainer import TrainConfig, load_checkpoint, train

log = logging.getLogger("pointlf")


def _mask_path(masks_dir: Path, i: int) -> Path:
    return masks_dir / f"{i:04d}.pgm"


def read_masks(masks_dir, dataset) -> list[np.ndarray]:
    """Per-frame PGM masks; a missing file means nothing is masked in that frame."""
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise FileNotFoundError(f"{masks_dir}: mask directory not found")
    out = []
    for f in dataset.frames:
        p = _mask_path(masks_dir, f.frame_index)
        grid = read_pgm(p) if p.exists() else np.zeros(dataset.intrinsics.shape, bool)
        if grid.shape != dataset.intrinsics.shape:
            raise ValueError(f"{p}: mask is {grid.shape}, images are {dataset.intrinsics.shape}")
        out.append(grid)
    return out


def cmd_synth(args) -> int:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    name = data.pop("preset", args.preset)
    cfg = SynthConfig.from_dict({**PRESETS[name], **data}) if name else SynthConfig.from_dict(data)
    ds = synthesize_scene(cfg, args.seed)
    if args.sigma > 0:
        ds = ds.with_poses(perturb_poses(ds.gt_poses, args.sigma, NOISE_SEED_OFFSET + args.seed))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames, {ds.num_points} points to {args.out}")
    return 0


def cmd_detect(args) -> int:
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = build_masks(ds.tracks, ds.intrinsics.shape, len(ds), args.threshold)
    for f, mk in zip(ds.frames, masks):
        write_pgm(_mask_path(out, f.frame_index), mk.grid)
    rows = vote_table(ds.tracks, args.threshold)
    with open(out / "votes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "votes_moving", "votes_static", "M"])
        w.writerows(rows)
    print(f"{'object_id':>9} {'votes_moving':>12} {'votes_static':>12} {'M':>2}")
    for r in rows:
        print(f"{r[0]:>9} {r[1]:>12} {r[2]:>12} {r[3]:>2}")
    return 0


def _train_config(args) -> TrainConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = TrainConfig.from_dict(data)
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if getattr(args, "freeze_poses", False):
        cfg = replace(cfg, refine_poses=False)
    return cfg


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _train_config(args)
    masks = None if args.no_mask or args.masks is None else read_masks(args.masks, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    result = train(ds, masks, cfg, gt_poses=ds.gt_poses, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(f"{len(result.history)} steps, final loss {last.get('loss', float('nan')):.6g}"
          + (f", ATE {last['ate_mean']:.6g} m" if "ate_mean" in last else ""))
    if result.diverged:
        print("training diverged; last good checkpoint kept", file=sys.stderr)
        return 2
    return 0


def _load_run(run_dir):
    run = Path(run_dir)
    cfg = TrainConfig.load(run / "config.json")
    return cfg, load_checkpoint(run / "checkpoint_final.bin")


def _ate_lines(label, est, gt) -> list[str]:
    lines = []
    for align in (True, False):
        r = ate(est, gt, align=align)
        tag = "aligned" if align else "raw"
        lines.append(f"{label} {tag} mean {r.mean:.9g} median {r.median:.9g} std {r.std:.9g}")
    return lines


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    cfg, store = _load_run(args.run)
    refined = store.refined_poses(ds.poses)
    renders = render_views(ds, store, cfg, eval_poses(ds, refined))
    regions = (read_masks(args.masks, ds) if args.masks
               else [np.zeros(ds.intrinsics.shape, bool) for _ in ds.frames])
    if args.reference == "static":
        if ds.static_images is None:
            raise SystemExit(f"{args.dataset}: no static reference images")
        refs = ds.static_images
    else:
        refs = [f.image for f in ds.frames]
    rows = evaluate_views(ds, renders, refs, regions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.csv", rows, FRAME_COLUMNS[:-1])
    lines = []
    if ds.gt_poses is not None:
        tr = ds.train_indices
        gt = [ds.gt_poses[i] for i in tr]
        lines += _ate_lines("before", [ds.poses[i] for i in tr], gt)
        lines += _ate_lines("after", [refined[i] for i in tr], gt)
    else:
        lines.append("no ground-truth poses in dataset; ATE not computed")
    (out / "ate.txt").write_text("\n".join(lines) + "\n")
    for split in ("seen", "held-out"):
        sel = [r for r in rows if r["split"] == split]
        if sel:
            print(f"{split:>8}: psnr_m {np.mean([r['psnr_m'] for r in sel]):.3f} "
                  f"ssim {np.mean([r['ssim'] for r in sel]):.4f} ({len(sel)} frames)")
    print("\n".join(lines))
    return 0


def cmd_render(args) -> int:
    ds = load_dataset(args.dataset)
    cfg, store = _load_run(args.run)
    refined = store.refined_poses(ds.poses)
    poses = ds.gt_poses if args.pose == "gt" and ds.gt_poses is not None else refined
    frames = args.frames or list(range(len(ds)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    COUNTERS.reset()
    for i, img in render_views(ds, store, cfg, poses, frames).items():
        write_ppm(out / f"{i:04d}.ppm", img)
    if args.counters:
        stats = COUNTERS.as_dict()
        (out / "counters.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_harness(args) -> int:
    plan = ExperimentPlan.load(args.plan)
    if args.jobs is not None:
        plan = replace(plan, jobs=args.jobs)
    report = (run_noise_sweep if args.mode == "sweep" else run_ablation)(plan, args.out)
    failed = [r for r in report.rows if r["status"] != "ok"]
    print(f"{len(report.rows)} cells, {len(failed)} failed; report in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointlf", description="Point light fields: synthesize scenes, detect movers, "
                                "train, evaluate, render and run experiment grids.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic street dataset")
    s.add_argument("--config", help="JSON scene config (SynthConfig fields, optional 'preset')")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sigma", type=float, default=0.0, help="multiplicative pose noise level")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("detect", help="vote tracks moving/static and write PGM masks")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("train", help="optimize features, network and poses")
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--masks")
    s.add_argument("--out", required=True)
    s.add_argument("--freeze-poses", action="store_true")
    s.add_argument("--no-mask", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-frame image metrics and trajectory error")
    s.add_argument("--dataset", required=True)
    s.add_argument("--run", required=True, help="output directory of 'train'")
    s.add_argument("--masks", help="PGM masks excluded by psnr_masked")
    s.add_argument("--reference", choices=("observed", "static"), default="observed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render frames to PPM")
    s.add_argument("--dataset", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, nargs="*")
    s.add_argument("--pose", choices=("refined", "gt"), default="refined")
    s.add_argument("--counters", action="store_true", help="dump ray and MLP-call counters")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("harness", help="noise sweep or ablation grid")
    s.add_argument("mode", choices=("sweep", "ablate"))
    s.add_argument("--plan", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_harness)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
