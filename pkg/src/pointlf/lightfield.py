"""Point light-field rendering: ray-to-point neighbor query, attention
aggregation of point features into a ray descriptor, and the color MLP.

One forward path serves both training and inference. It is written with the
:mod:`pointlf.autodiff` operations, so passing tape leaves yields gradients
and passing plain arrays just evaluates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import autodiff as ad
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    FrequencySchedule,
    Ray,
    encoding_size,
    refine_pose,
)
from .scene import FeaturedPointCloud

DEFAULT_K = 8
DIR_BANDS = 4
FEATURE_BANDS = 10
HIDDEN = (64, 64)
# keeps the distance gradient finite for points lying exactly on a ray
_DIST_EPS2 = 1e-12
UNRENDERED = -1.0


class GeometryError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class RenderCounters:
    rays_cast: int = 0
    mlp_calls: int = 0
    pixels_rendered: int = 0
    masked_rays: int = 0  # rays that went through a masked pixel; must stay zero

    def reset(self):
        self.rays_cast = self.mlp_calls = self.pixels_rendered = self.masked_rays = 0

    def as_dict(self) -> dict:
        per_pixel = self.mlp_calls / self.pixels_rendered if self.pixels_rendered else 0.0
        return {"rays_cast": self.rays_cast, "mlp_calls": self.mlp_calls,
                "pixels_rendered": self.pixels_rendered, "masked_rays": self.masked_rays,
                "mlp_calls_per_pixel": per_pixel}


COUNTERS = RenderCounters()


# --- neighbor query --------------------------------------------------------


def ray_distances(points: np.ndarray, origins: np.ndarray, dirs: np.ndarray):
    """Perpendicular distance of every point to every ray line, (n_rays, n_points).

    Points behind a ray origin get ``inf``.
    """
    rel = points[None, :, :] - origins[:, None, :]
    s = np.einsum("npc,nc->np", rel, dirs)
    d2 = np.einsum("npc,npc->np", rel, rel) - s * s
    dist = np.sqrt(np.maximum(d2, 0.0))
    dist[s < 0] = np.inf
    return dist


@numba.njit(cache=True, nogil=True)
def _knn_kernel(points, origins, dirs, k, idx, dist2):
    n, N = origins.shape[0], points.shape[0]
    relx, rely, relz = np.empty(N), np.empty(N), np.empty(N)
    r2, buf = np.empty(N), np.empty(N)
    last = np.full(3, np.nan)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        if ox != last[0] or oy != last[1] or oz != last[2]:
            # offsets depend only on the origin, which rays of one camera share
            for p in range(N):
                px = points[p, 0] - ox
                py = points[p, 1] - oy
                pz = points[p, 2] - oz
                relx[p], rely[p], relz[p] = px, py, pz
                r2[p] = px * px + py * py + pz * pz
            last[0], last[1], last[2] = ox, oy, oz
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        # branch-free pass so the distance loop vectorizes; points behind the origin get inf
        for p in range(N):
            s = relx[p] * dx + rely[p] * dy + relz[p] * dz
            d2 = max(r2[p] - s * s, 0.0)
            buf[p] = d2 if s >= 0.0 else np.inf
        for j in range(k):
            idx[r, j] = -1
            dist2[r, j] = np.inf
        worst = np.inf
        for p in range(N):
            d2 = buf[p]
            # strict comparison keeps the lower index first on ties
            if d2 < worst:
                j = k - 1
                while j > 0 and dist2[r, j - 1] > d2:
                    dist2[r, j] = dist2[r, j - 1]
                    idx[r, j] = idx[r, j - 1]
                    j -= 1
                dist2[r, j] = d2
                idx[r, j] = p
                worst = dist2[r, k - 1]


def knn_rays(points: np.ndarray, origins: np.ndarray, dirs: np.ndarray, k: int):
    """Indices and distances of the ``k`` nearest points to each ray.

    Distances ascend; equal distances keep the lower point index first.
    Slots beyond the number of points in front of a ray hold index -1 and
    distance ``inf``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(points) == 0:
        raise GeometryError("empty point cloud")
    k = min(k, len(points))
    n = len(origins)
    idx = np.empty((n, k), dtype=np.int64)
    dist2 = np.empty((n, k))
    _knn_kernel(np.ascontiguousarray(points, np.float64), np.ascontiguousarray(origins, np.float64),
                np.ascontiguousarray(dirs, np.float64), k, idx, dist2)
    if np.any(idx[:, 0] < 0):
        raise GeometryError("ray sees no geometry: every point lies behind its origin")
    return idx, np.sqrt(dist2)


def knn_rays_bruteforce(points: np.ndarray, origins: np.ndarray, dirs: np.ndarray, k: int):
    """Reference query: full distance matrix and a stable sort per ray."""
    D = ray_distances(points, origins, dirs)
    order = np.argsort(D, axis=1, kind="stable")[:, :min(k, len(points))]
    return order, np.take_along_axis(D, order, axis=1)


def nearest_points(cloud: FeaturedPointCloud, ray: Ray, k: int = DEFAULT_K):
    idx, dist = knn_rays(cloud.points, ray.origin[None], ray.direction[None], k)
    keep = idx[0] >= 0
    return idx[0][keep], dist[0][keep]


# --- parameters -------------------------------------------------------------


def mlp_shapes(feature_dim: int, hidden=HIDDEN, dir_bands=DIR_BANDS, feature_bands=FEATURE_BANDS):
    sizes = [encoding_size(3, dir_bands) + encoding_size(feature_dim, feature_bands), *hidden, 3]
    shapes = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        shapes += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
    return shapes


def init_mlp(feature_dim: int, rng: np.random.Generator, hidden=HIDDEN) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in mlp_shapes(feature_dim, hidden):
        if name.startswith("W"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def attention_size(feature_dim: int) -> int:
    # scorer weights over [feature, offset (3), distance]
    return feature_dim + 4


def init_attention(feature_dim: int, sharpness: float) -> np.ndarray:
    w = np.zeros(attention_size(feature_dim))
    w[-1] = -sharpness
    return w


@dataclass
class LightField:
    """Parameter bundle for inference: features, MLP weights and the scorer."""

    features: np.ndarray
    mlp: dict[str, np.ndarray]
    attention: np.ndarray
    k: int = DEFAULT_K
    schedule_dir: FrequencySchedule = field(default_factory=lambda: FrequencySchedule(DIR_BANDS, DIR_BANDS))
    schedule_feat: FrequencySchedule = field(
        default_factory=lambda: FrequencySchedule(FEATURE_BANDS, FEATURE_BANDS))


# --- differentiable pieces ----------------------------------------------------


def rodrigues_coefficients(s: float):
    """(A, B, dA/ds, dB/ds) for R = I + A K + B K^2, with s = theta^2."""
    if s < 1e-4:
        A = 1 - s / 6 + s * s / 120 - s**3 / 5040
        B = 0.5 - s / 24 + s * s / 720 - s**3 / 40320
        dA = -1 / 6 + s / 60 - s * s / 1680
        dB = -1 / 24 + s / 360 - s * s / 13440
        return A, B, dA, dB
    th = np.sqrt(s)
    sn, cs = np.sin(th), np.cos(th)
    one_minus_cos = 2.0 * np.sin(0.5 * th) ** 2
    A = sn / th
    B = one_minus_cos / s
    dA = (th * cs - sn) / (2 * th**3)
    dB = (th * sn - 2 * one_minus_cos) / (2 * s * s)
    return A, B, dA, dB


_GENERATORS = np.array([
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=np.float64)


def rodrigues(r):
    """Exponential map as a tape operation."""
    rv = ad._value(r)
    K = np.tensordot(rv, _GENERATORS, axes=1)
    K2 = K @ K
    s = float(rv @ rv)
    A, B, dA, dB = rodrigues_coefficients(s)
    R = np.eye(3) + A * K + B * K2

    def vjp(g):
        out = np.empty(3)
        for i in range(3):
            E = _GENERATORS[i]
            dR = 2 * rv[i] * (dA * K + dB * K2) + A * E + B * (E @ K + K @ E)
            out[i] = np.sum(g * dR)
        return (out,)

    return ad.custom(R, (r,), vjp)


def encode(x, schedule: FrequencySchedule):
    """:func:`frequency_encode` on the last axis as a tape operation."""
    xv = ad._value(x)
    L = schedule.order_L
    freqs = np.pi * 2.0 ** np.arange(L)
    w = schedule.weights()
    arg = xv[..., None] * freqs
    sn, cs = np.sin(arg), np.cos(arg)
    out = np.empty(xv.shape + (2 * L + 1,))
    out[..., 0] = xv
    out[..., 1::2] = w * cs
    out[..., 2::2] = w * sn

    def vjp(g):
        g = g.reshape(xv.shape + (2 * L + 1,))
        dx = g[..., 0] + np.sum(w * freqs * (g[..., 2::2] * cs - g[..., 1::2] * sn), axis=-1)
        return (dx,)

    return ad.custom(out.reshape(xv.shape[:-1] + (-1,)), (x,), vjp)


def pose_rays(rotation, translation, cam_dirs: np.ndarray):
    """Ray origins and unit directions in world space for one camera.

    ``rotation``/``translation`` may be tape variables holding the refined pose.
    """
    R = rodrigues(rotation)
    origin = ad.matmul(ad.transpose(R), translation) * -1.0
    norms = np.linalg.norm(cam_dirs, axis=-1, keepdims=True)
    dirs = ad.matmul(cam_dirs / norms, R)
    return origin, dirs


def shade(features_nb, points_nb, valid, origins, dirs, attention, mlp, schedule_dir,
          schedule_feat, feature_dim: int):
    """Colors of a ray batch from its gathered neighbors.

    ``features_nb`` (n, k, f), ``points_nb`` (n, k, 3), ``origins``/``dirs`` (n, 3).
    Returns ``(rgb, attention_weights)``.
    """
    n, k = points_nb.shape[:2]
    o = ad.reshape(origins, n, 1, 3)
    d = ad.reshape(dirs, n, 1, 3)
    rel = ad.sub(points_nb, o)
    s = ad.sum_(rel * d, axis=-1, keepdims=True)
    perp = rel - s * d
    dist = ad.sqrt(ad.sum_(ad.square(perp), axis=-1) + _DIST_EPS2)

    w_feat = ad.getitem(attention, slice(0, feature_dim)) if isinstance(attention, ad.Var) else attention[:feature_dim]
    w_off = ad.getitem(attention, slice(feature_dim, feature_dim + 3)) if isinstance(attention, ad.Var) \
        else attention[feature_dim:feature_dim + 3]
    w_dist = ad.getitem(attention, slice(feature_dim + 3, feature_dim + 4)) if isinstance(attention, ad.Var) \
        else attention[feature_dim + 3:]
    score = ad.matmul(features_nb, w_feat) + ad.matmul(rel, w_off) + dist * w_dist
    if not np.all(valid):
        score = score + np.where(valid, 0.0, -1e300)
    weights = ad.softmax(score, axis=-1)
    agg = ad.sum_(ad.reshape(weights, n, k, 1) * features_nb, axis=1)

    x = ad.concat([encode(dirs, schedule_dir), encode(agg, schedule_feat)], axis=-1)
    names = sorted({name[1:] for name in mlp if name.startswith("W")}, key=int)
    for j, i in enumerate(names):
        x = ad.matmul(x, mlp[f"W{i}"]) + mlp[f"b{i}"]
        if j < len(names) - 1:
            x = ad.relu(x)
    rgb = ad.sigmoid(x)
    COUNTERS.mlp_calls += n
    if not np.all(np.isfinite(rgb.value)):
        raise DivergenceError("non-finite color in forward pass")
    return rgb, weights


def gather_neighbors(all_points, window_ids, origins_v, dirs_v, k):
    """Run the neighbor query inside a window; returns global ids, validity and points."""
    local, dist = knn_rays(all_points[window_ids], origins_v, dirs_v, k)
    valid = local >= 0
    ids = window_ids[np.where(valid, local, 0)]
    return ids, valid, all_points[ids]


# --- inference API ---------------------------------------------------------------


@dataclass
class RayDescriptor:
    aggregated_feature: np.ndarray
    direction: np.ndarray
    neighbor_indices: np.ndarray
    attention_weights: np.ndarray


def aggregate(cloud: FeaturedPointCloud, ray: Ray, k: int, attention_params: np.ndarray) -> RayDescriptor:
    idx, dist = nearest_points(cloud, ray, k)
    f = cloud.features.shape[1]
    feats = cloud.features[idx]
    rel = cloud.points[idx] - ray.origin
    score = feats @ attention_params[:f] + rel @ attention_params[f:f + 3] + dist * attention_params[f + 3]
    e = np.exp(score - score.max())
    w = e / e.sum()
    return RayDescriptor(w @ feats, ray.direction, idx, w)


def _render_batch(lf: LightField, cloud: FeaturedPointCloud, origins, dirs):
    idx, dist = knn_rays(cloud.points, origins, dirs, lf.k)
    valid = idx >= 0
    idx = np.where(valid, idx, 0)
    rgb, _ = shade(cloud.features[idx], cloud.points[idx], valid, origins, dirs, lf.attention, lf.mlp,
                   lf.schedule_dir, lf.schedule_feat, cloud.features.shape[1])
    COUNTERS.rays_cast += len(origins)
    return rgb.value


def render_ray(cloud: FeaturedPointCloud, ray: Ray, lf: LightField) -> np.ndarray:
    COUNTERS.pixels_rendered += 1
    return _render_batch(lf, cloud, ray.origin[None], ray.direction[None])[0]


def render_image(cloud: FeaturedPointCloud, pose: CameraPose, intrinsics: CameraIntrinsics, lf: LightField,
                 mask=None, chunk: int = 2048) -> np.ndarray:
    """Render every pixel, or only the unmasked ones when a mask is given.

    Masked pixels are filled with ``UNRENDERED`` and no ray is generated for them.
    """
    H, W = intrinsics.height, intrinsics.width
    out = np.full((H, W, 3), UNRENDERED)
    grid = np.zeros((H, W), bool) if mask is None else np.asarray(getattr(mask, "grid", mask), bool)
    rows, cols = np.nonzero(~grid)
    if len(rows) == 0:
        return out
    r, t = refine_pose(pose)
    cam = intrinsics.camera_directions(rows, cols)
    origin, dirs = pose_rays(r, t, cam)
    origins = np.broadcast_to(origin.value, dirs.shape)
    for a in range(0, len(rows), chunk):
        sl = slice(a, a + chunk)
        out[rows[sl], cols[sl]] = _render_batch(lf, cloud, origins[sl], dirs.value[sl])
    COUNTERS.pixels_rendered += len(rows)
    return out
