"""Image-quality and trajectory metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _grid(mask):
    return None if mask is None else np.asarray(getattr(mask, "grid", mask), dtype=bool)


def psnr(rendered, reference, mask=None) -> float:
    """PSNR in dB over the pixels outside ``mask`` (all pixels without one)."""
    a, b = np.asarray(rendered, np.float64), np.asarray(reference, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    grid = _grid(mask)
    if grid is not None:
        keep = ~grid
        if not keep.any():
            raise ValueError("mask leaves no pixels to evaluate")
        a, b = a[keep], b[keep]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def psnr_m(rendered, reference, mask=None) -> float:
    """Mean of the full-image PSNR and the PSNR outside the moving-object mask."""
    full = psnr(rendered, reference)
    grid = _grid(mask)
    if grid is None or not grid.any():
        return full
    return (full + psnr(rendered, reference, grid)) / 2.0


def ssim(rendered, reference, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles and channels."""
    a, b = np.asarray(rendered, np.float64), np.asarray(reference, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    if H < window or W < window:
        raise ValueError(f"image {H}x{W} smaller than the {window}x{window} SSIM window")
    h, w = H // window * window, W // window * window
    # (tiles_r, window, tiles_c, window, C) -> (tiles, window*window, C)
    def tiles(x):
        x = x[:h, :w].reshape(h // window, window, w // window, window, C)
        return x.transpose(0, 2, 1, 3, 4).reshape(-1, window * window, C)

    ta, tb = tiles(a), tiles(b)
    mu_a, mu_b = ta.mean(axis=1), tb.mean(axis=1)
    var_a = ta.var(axis=1)
    var_b = tb.var(axis=1)
    cov = ((ta - mu_a[:, None]) * (tb - mu_b[:, None])).mean(axis=1)
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class TrajectoryErrorReport:
    per_frame_errors: np.ndarray
    mean: float
    median: float
    std: float

    @classmethod
    def from_errors(cls, errors) -> "TrajectoryErrorReport":
        e = np.asarray(errors, dtype=np.float64)
        return cls(e, float(np.mean(e)), float(np.median(e)), float(np.std(e)))


def align_rigid(source: np.ndarray, target: np.ndarray):
    """Rotation and translation minimizing ``|R source + t - target|`` (no scale)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    S = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(S)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return R, mu_t - R @ mu_s


def camera_centers(poses) -> np.ndarray:
    return np.array([p.center() if hasattr(p, "center") else np.asarray(p, float) for p in poses])


def ate(estimated_poses, ground_truth_poses, align: bool = True) -> TrajectoryErrorReport:
    """Absolute trajectory error between camera centers.

    Accepts poses or raw (n, 3) center arrays.
    """
    est, gt = camera_centers(estimated_poses), camera_centers(ground_truth_poses)
    if est.shape != gt.shape:
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    if align:
        R, t = align_rigid(est, gt)
        est = est @ R.T + t
    return TrajectoryErrorReport.from_errors(np.linalg.norm(est - gt, axis=1))
