"""Report figures (PNG, no embedded timestamps)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_sweep(rows: list[dict], path) -> None:
    """ATE before and after refinement against the noise level, one marker per seed."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ok = [r for r in rows if r["status"] == "ok"]
    for key, label, marker in (("ate_noisy_mean", "noisy", "o"), ("ate_refined_mean", "refined", "s")):
        xs = [r["sigma"] for r in ok]
        ys = [max(r[key], 1e-6) for r in ok]
        ax.scatter(xs, ys, marker=marker, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("noise level sigma")
    ax.set_ylabel("mean ATE [m]")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_ablation(rows: list[dict], path) -> None:
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, key, label in zip(axes, ("heldout_psnr_m", "dyn_mae", "ate_refined_mean"),
                              ("held-out PSNR_M [dB]", "dynamic-region MAE", "refined ATE [m]")):
        vals = [[r.get(key, np.nan) for r in rows if r["variant"] == v and r["status"] == "ok"] for v in variants]
        means = [np.nanmean(v) if v else np.nan for v in vals]
        ax.bar(range(len(variants)), means, color="0.7")
        for j, v in enumerate(vals):
            ax.plot([j] * len(v), v, "k.")
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=20, fontsize=8)
        ax.set_title(label, fontsize=9)
    _save(fig, path)


def plot_histories(cells, path) -> None:
    """Training loss and (when tracked) ATE per cell."""
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 3.5))
    for c in cells:
        if not c.history:
            continue
        label = f"{c.variant} s={c.sigma:g} seed={c.seed}"
        epochs = [h["epoch"] for h in c.history]
        ax_l.plot(epochs, [h["loss"] for h in c.history], lw=0.6, label=label)
        if "ate_mean" in c.history[0]:
            ax_a.plot(epochs, [h["ate_mean"] for h in c.history], lw=0.8, label=label)
    for ax, name in ((ax_l, "batch loss"), (ax_a, "ATE [m]")):
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    ax_a.legend(fontsize=6)
    _save(fig, path)
