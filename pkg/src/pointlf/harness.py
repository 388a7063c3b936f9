"""Experiment runner: noise-tolerance sweeps and the masking/refinement ablation.

Every cell synthesizes its scene from the seed, perturbs the poses, trains and
evaluates against the analytic oracle.  Reports are plain CSV with no
timestamps, so two runs of the same plan produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import perturb_poses
from .imageio import write_ppm
from .lightfield import COUNTERS, render_image
from .metrics import ate, psnr, psnr_m, ssim
from .motion import build_masks
from .scene import PRESETS, SceneDataset, SynthConfig, merge_window, project_box, synthesize_scene
from .trainer import TrainConfig, train, write_history

log = logging.getLogger(__name__)

VARIANTS = {  # name -> (use motion masks, refine poses)
    "baseline": (False, False),
    "masking_only": (True, False),
    "refinement_only": (False, True),
    "full": (True, True),
}
STRIP_ORDER = ("baseline", "masking_only", "refinement_only", "full")
NOISE_SEED_OFFSET = 1000


@dataclass
class ExperimentPlan:
    scene: dict = field(default_factory=dict)  # SynthConfig fields, optionally {"preset": name}
    train: dict = field(default_factory=dict)  # TrainConfig fields
    noise_levels: tuple[float, ...] = (0.1, 0.3, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 3000
    ablation: tuple[str, ...] = STRIP_ORDER
    ablation_noise: float = 0.1
    jobs: int = 1

    def __post_init__(self):
        self.noise_levels = tuple(float(s) for s in self.noise_levels)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ablation = tuple(self.ablation)
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if any(s < 0 for s in self.noise_levels) or self.ablation_noise < 0:
            raise ValueError("noise levels must be non-negative")
        unknown = set(self.ablation) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown ablation variants {sorted(unknown)}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        self.scene_config()  # validate eagerly
        self.train_config()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def scene_config(self) -> SynthConfig:
        data = dict(self.scene)
        name = data.pop("preset", None)
        if name is not None:
            if name not in PRESETS:
                raise ValueError(f"unknown scene preset {name!r}")
            data = {**PRESETS[name], **data}
        return SynthConfig.from_dict(data)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "epochs": self.epochs})


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# --- ground-truth regions and evaluation --------------------------------------


def moving_regions(config: SynthConfig, dataset: SceneDataset) -> list[np.ndarray]:
    """Per-frame pixel grids covering the projected boxes of every moving object."""
    K = dataset.intrinsics
    poses = dataset.gt_poses or dataset.poses
    grids = [np.zeros(K.shape, bool) for _ in poses]
    for obj in config.objects:
        vel = np.asarray(obj.get("velocity", (0, 0, 0)), float)
        if not np.any(vel):
            continue
        lo, hi = np.asarray(obj["lo"], float), np.asarray(obj["hi"], float)
        for i, pose in enumerate(poses):
            bbox = project_box(lo + vel * i, hi + vel * i, pose, K)
            if bbox is not None:
                r0, c0, r1, c1 = bbox
                grids[i][r0:r1, c0:c1] = True
    return grids


def render_views(dataset: SceneDataset, store, config: TrainConfig, poses, frames=None) -> dict[int, np.ndarray]:
    lf = store.light_field(config.k, end_epoch=config.end_epoch_alpha)
    frames = range(len(dataset)) if frames is None else frames
    return {i: render_image(merge_window(dataset, i, config.window_m, lf.features), poses[i],
                            dataset.intrinsics, lf)
            for i in frames}


def eval_poses(dataset: SceneDataset, refined_poses) -> list:
    """Seen frames use their (refined) training pose; held-out frames use ground truth."""
    gt = dataset.gt_poses or dataset.poses
    return [gt[i] if dataset.is_held_out(i) else refined_poses[i] for i in range(len(dataset))]


def frame_metrics(image, reference, region) -> dict:
    row = {"psnr": psnr(image, reference), "psnr_m": psnr_m(image, reference, region),
           "ssim": ssim(image, reference)}
    row["psnr_masked"] = psnr(image, reference, region) if region.any() and not region.all() else row["psnr"]
    row["dyn_mae"] = float(np.abs(image - reference)[region].mean()) if region.any() else float("nan")
    return row


def evaluate_views(dataset: SceneDataset, renders: dict[int, np.ndarray], references, regions) -> list[dict]:
    rows = []
    for i, img in renders.items():
        row = {"frame": i, "split": "held-out" if dataset.is_held_out(i) else "seen"}
        row.update(frame_metrics(img, references[i], regions[i]))
        rows.append(row)
    return rows


def _mean(rows, key, split=None) -> float:
    vals = [r[key] for r in rows if split is None or r["split"] == split]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


# --- a single cell ------------------------------------------------------------


@dataclass
class CellResult:
    kind: str
    variant: str
    sigma: float
    seed: int
    config_hash: str
    status: str = "ok"
    summary: dict = field(default_factory=dict)
    frames: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    renders: dict[int, np.ndarray] = field(default_factory=dict)
    noisy_renders: dict[int, np.ndarray] = field(default_factory=dict)
    references: dict[int, np.ndarray] = field(default_factory=dict)

    def row(self) -> dict:
        return {"variant": self.variant, "sigma": self.sigma, "seed": self.seed, "status": self.status,
                **self.summary, "config_hash": self.config_hash, "version": __version__}


def run_cell(scene_cfg: SynthConfig, train_cfg: TrainConfig, sigma: float, seed: int,
             variant: str = "full", kind: str = "sweep", strip_frames=()) -> CellResult:
    use_mask, refine = VARIANTS[variant]
    chash = config_hash(kind, scene_cfg.to_dict(), asdict(replace(train_cfg, rng_seed=0)), sigma, variant)
    cell = CellResult(kind, variant, sigma, seed, chash)
    ds = synthesize_scene(scene_cfg, seed)
    noisy = perturb_poses(ds.gt_poses, sigma, NOISE_SEED_OFFSET + seed)
    dsn = ds.with_poses(noisy)
    masks = build_masks(ds.tracks, ds.intrinsics.shape, len(ds)) if use_mask else None
    tc = replace(train_cfg, rng_seed=seed, refine_poses=refine)
    masked_before = COUNTERS.masked_rays
    result = train(dsn, masks, tc, gt_poses=ds.gt_poses)
    cell.history = result.history
    tr = ds.train_indices
    gt_train = [ds.gt_poses[i] for i in tr]
    before = ate([noisy[i] for i in tr], gt_train)
    s = {"ate_noisy_mean": before.mean, "ate_noisy_median": before.median, "ate_noisy_std": before.std,
         "masked_rays": COUNTERS.masked_rays - masked_before, "steps": len(result.history),
         "final_loss": result.history[-1]["loss"] if result.history else float("nan")}
    if result.diverged:
        log.error("cell %s sigma=%g seed=%d diverged after %d steps", variant, sigma, seed, len(result.history))
        cell.status = "diverged"
        cell.summary = s
        return cell
    after = ate([result.poses[i] for i in tr], gt_train)
    s.update({"ate_refined_mean": after.mean, "ate_refined_median": after.median, "ate_refined_std": after.std,
              "ate_ratio": after.mean / before.mean if sigma > 0 and before.mean > 0 else float("nan")})
    references = ds.static_images or [f.image for f in ds.frames]
    regions = moving_regions(scene_cfg, ds)
    renders = render_views(dsn, result.store, tc, eval_poses(ds, result.poses))
    cell.frames = evaluate_views(ds, renders, references, regions)
    for split, tag in (("seen", "seen"), ("held-out", "heldout")):
        s[f"{tag}_psnr_m"] = _mean(cell.frames, "psnr_m", split)
        s[f"{tag}_ssim"] = _mean(cell.frames, "ssim", split)
    s["dyn_mae"] = _mean(cell.frames, "dyn_mae")
    cell.summary = s
    cell.renders = {i: renders[i] for i in strip_frames}
    cell.references = {i: ds.frames[i].image for i in strip_frames}
    if kind == "sweep" and strip_frames:
        cell.noisy_renders = render_views(dsn, result.store, tc, noisy, strip_frames)
    return cell


def _run_cells(jobs: list[tuple], n_workers: int) -> list[CellResult]:
    if n_workers <= 1:
        return [run_cell(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_star_run, jobs))


def _star_run(job):
    return run_cell(*job)


# --- reports ----------------------------------------------------------------------


SWEEP_COLUMNS = ["sigma", "seed", "status", "ate_noisy_mean", "ate_noisy_median", "ate_noisy_std",
                 "ate_refined_mean", "ate_refined_median", "ate_refined_std", "ate_ratio",
                 "seen_psnr_m", "seen_ssim", "heldout_psnr_m", "heldout_ssim", "final_loss", "steps",
                 "config_hash", "version"]
ABLATION_COLUMNS = ["variant", "sigma", "seed", "status", "ate_noisy_mean", "ate_refined_mean",
                    "seen_psnr_m", "seen_ssim", "heldout_psnr_m", "heldout_ssim", "dyn_mae", "masked_rays",
                    "final_loss", "steps", "config_hash", "version"]
FRAME_COLUMNS = ["frame", "split", "psnr", "psnr_masked", "psnr_m", "ssim", "dyn_mae"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else format(float(v), ".10g")
    return str(v)


def write_table(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def strip(images) -> np.ndarray:
    """Side-by-side panels separated by a 2-pixel white gutter; missing panels are black."""
    shape = next(im.shape for im in images if im is not None)
    gutter = np.ones((shape[0], 2, 3))
    panels = []
    for im in images:
        panels += [np.clip(im, 0, 1) if im is not None else np.zeros(shape), gutter]
    return np.concatenate(panels[:-1], axis=1)


@dataclass
class Report:
    rows: list[dict]
    cells: list[CellResult]
    out_dir: Path | None = None


def _strip_frames(dataset: SceneDataset, regions) -> tuple[int, ...]:
    held = dataset.holdout_indices
    with_object = [i for i in held if regions[i].any()]
    return tuple((with_object or held or [0])[:1])


def _cell_dir(out: Path, cell: CellResult) -> Path:
    return out / "cells" / f"{cell.kind}_{cell.variant}_s{cell.sigma:g}_seed{cell.seed}"


def _write_cell(out: Path, cell: CellResult) -> None:
    d = _cell_dir(out, cell)
    d.mkdir(parents=True, exist_ok=True)
    write_history(d / "history.csv", cell.history)
    if cell.frames:
        write_table(d / "frames.csv", cell.frames, FRAME_COLUMNS)


def run_noise_sweep(plan: ExperimentPlan, out_dir=None) -> Report:
    """Full method at every noise level and seed; one row per cell."""
    scene_cfg, train_cfg = plan.scene_config(), plan.train_config()
    probe = synthesize_scene(replace(scene_cfg, points_per_frame=1), plan.seeds[0])
    frames = _strip_frames(probe, moving_regions(scene_cfg, probe))
    jobs = [(scene_cfg, train_cfg, sigma, seed, "full", "sweep", frames)
            for sigma in plan.noise_levels for seed in plan.seeds]
    cells = _run_cells(jobs, plan.jobs)
    rows = [c.row() for c in cells]
    report = Report(rows, cells)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "strips").mkdir(parents=True, exist_ok=True)
        write_table(out / "sweep.csv", rows, SWEEP_COLUMNS)
        write_table(out / "sweep_summary.csv", summarize_sweep(rows),
                    ["sigma", "cells", "failed", "ratio_mean", "ratio_max", "cells_ratio_le_0.1"])
        for cell in cells:
            _write_cell(out, cell)
            for i in cell.renders:
                write_ppm(out / "strips" / f"sweep_s{cell.sigma:g}_seed{cell.seed}_frame{i:03d}.ppm",
                          strip([cell.references[i], cell.noisy_renders.get(i), cell.renders[i]]))
        from .plotting import plot_histories, plot_sweep
        plot_sweep(rows, out / "sweep.png")
        plot_histories(cells, out / "sweep_histories.png")
        report.out_dir = out
    return report


def summarize_sweep(rows: list[dict]) -> list[dict]:
    out = []
    for sigma in sorted({r["sigma"] for r in rows}):
        cell = [r for r in rows if r["sigma"] == sigma]
        ratios = [r["ate_ratio"] for r in cell if r["status"] == "ok" and np.isfinite(r.get("ate_ratio", np.nan))]
        out.append({"sigma": sigma, "cells": len(cell), "failed": sum(r["status"] != "ok" for r in cell),
                    "ratio_mean": float(np.mean(ratios)) if ratios else float("nan"),
                    "ratio_max": float(np.max(ratios)) if ratios else float("nan"),
                    "cells_ratio_le_0.1": sum(r <= 0.1 for r in ratios)})
    return out


def run_ablation(plan: ExperimentPlan, out_dir=None) -> Report:
    """Train each ablation variant on identical data and noise for every seed."""
    scene_cfg, train_cfg = plan.scene_config(), plan.train_config()
    if not any(np.any(np.asarray(o.get("velocity", (0, 0, 0)), float)) for o in scene_cfg.objects):
        log.warning("ablation scene has no moving object; masking is a no-op")
    probe = synthesize_scene(replace(scene_cfg, points_per_frame=1), plan.seeds[0])
    frames = _strip_frames(probe, moving_regions(scene_cfg, probe))
    jobs = [(scene_cfg, train_cfg, plan.ablation_noise, seed, v, "ablation", frames)
            for seed in plan.seeds for v in STRIP_ORDER if v in plan.ablation]
    cells = _run_cells(jobs, plan.jobs)
    rows = [c.row() for c in cells]
    report = Report(rows, cells)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "strips").mkdir(parents=True, exist_ok=True)
        write_table(out / "ablation.csv", rows, ABLATION_COLUMNS)
        for cell in cells:
            _write_cell(out, cell)
        for seed in plan.seeds:
            by_variant = {c.variant: c for c in cells if c.seed == seed}
            for i in frames:
                ref = next((c.references[i] for c in by_variant.values() if i in c.references), None)
                panels = [ref] + [by_variant[v].renders.get(i) if v in by_variant else None for v in STRIP_ORDER]
                write_ppm(out / "strips" / f"ablation_seed{seed}_frame{i:03d}.ppm", strip(panels))
        from .plotting import plot_ablation, plot_histories
        plot_ablation(rows, out / "ablation.png")
        plot_histories(cells, out / "ablation_histories.png")
        report.out_dir = out
    return report
