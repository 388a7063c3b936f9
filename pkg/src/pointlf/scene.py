"""Point clouds, frames and datasets, plus the analytic street scene used as
ground truth for every end-to-end check."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    generate_rays,
    matrix_to_rotation,
    read_intrinsics,
    read_poses,
    write_intrinsics,
    write_poses,
)
from .imageio import quantize, read_ppm, write_ppm
from .motion import ObjectTrack, Observation, read_tracks, write_tracks

log = logging.getLogger(__name__)


@dataclass
class FeaturedPointCloud:
    points: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, f)
    frame_index: int
    point_ids: np.ndarray | None = None  # global ids into the dataset's point table

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.points):
            raise ValueError("points and features must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class Frame:
    image: np.ndarray
    pose: CameraPose
    depth_points: np.ndarray
    frame_index: int

    def __post_init__(self):
        self.image = np.clip(np.asarray(self.image, dtype=np.float64), 0.0, 1.0)
        self.depth_points = np.asarray(self.depth_points, dtype=np.float64).reshape(-1, 3)


@dataclass
class SceneDataset:
    frames: list[Frame]
    intrinsics: CameraIntrinsics
    tracks: list[ObjectTrack] = field(default_factory=list)
    holdout_stride: int = 10
    # oracle extras, present for synthetic scenes only
    gt_poses: list[CameraPose] | None = None
    static_images: list[np.ndarray] | None = None

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.frame_index)
        for f in self.frames:
            if f.image.shape != (self.intrinsics.height, self.intrinsics.width, 3):
                raise ValueError(f"frame {f.frame_index}: image shape {f.image.shape} does not match intrinsics")
        self._offsets = np.concatenate([[0], np.cumsum([len(f.depth_points) for f in self.frames])])
        self._points = (np.concatenate([f.depth_points for f in self.frames]) if self.frames
                        else np.zeros((0, 3)))

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self) -> list[CameraPose]:
        return [f.pose for f in self.frames]

    def is_held_out(self, i: int) -> bool:
        return self.holdout_stride > 0 and (i + 1) % self.holdout_stride == 0

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(len(self.frames)) if not self.is_held_out(i)]

    @property
    def holdout_indices(self) -> list[int]:
        return [i for i in range(len(self.frames)) if self.is_held_out(i)]

    @property
    def all_points(self) -> np.ndarray:
        return self._points

    @property
    def num_points(self) -> int:
        return int(self._offsets[-1])

    def point_range(self, i: int) -> tuple[int, int]:
        return int(self._offsets[i]), int(self._offsets[i + 1])

    def window_ids(self, center_frame: int, m: int) -> np.ndarray:
        if not 0 <= center_frame < len(self.frames):
            raise IndexError(f"frame {center_frame} outside dataset of {len(self.frames)} frames")
        if m < 0:
            raise ValueError("window half-width must be non-negative")
        lo, hi = max(center_frame - m, 0), min(center_frame + m, len(self.frames) - 1)
        return np.arange(self._offsets[lo], self._offsets[hi + 1])

    def with_poses(self, poses: list[CameraPose]) -> "SceneDataset":
        frames = [Frame(f.image, p, f.depth_points, f.frame_index) for f, p in zip(self.frames, poses)]
        return SceneDataset(frames, self.intrinsics, self.tracks, self.holdout_stride,
                            self.gt_poses, self.static_images)


def merge_window(dataset: SceneDataset, center_frame: int, m: int,
                 features: np.ndarray | None = None, feature_dim: int = 16) -> FeaturedPointCloud:
    """Union of the depth points of frames ``center-m .. center+m`` (clipped).

    ``features`` is the dataset-wide feature table; per-frame features are
    shared by every window that contains the frame.
    """
    ids = dataset.window_ids(center_frame, m)
    if len(ids) == 0:
        raise ValueError(f"window around frame {center_frame} holds no points")
    points = dataset.all_points[ids]
    feats = features[ids] if features is not None else np.zeros((len(ids), feature_dim))
    return FeaturedPointCloud(points, feats, center_frame, ids)


# --- analytic scene -------------------------------------------------------


@dataclass
class Box:
    """Axis-aligned box with a sinusoidal color field ``0.5 + 0.5 sin(A x + b)``."""

    lo: np.ndarray
    hi: np.ndarray
    freq: np.ndarray
    phase: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def at(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        shift = self.velocity * frame
        return self.lo + shift, self.hi + shift

    def color(self, x: np.ndarray, frame: int = 0) -> np.ndarray:
        # texture moves with the box
        local = x - self.velocity * frame
        return 0.5 + 0.5 * np.sin(local @ self.freq.T + self.phase)


def intersect_box(origins, dirs, lo, hi) -> np.ndarray:
    """Entry distance of each ray into the box (inf on a miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=-1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


@dataclass
class SynthConfig:
    num_frames: int = 40
    width: int = 80
    height: int = 64
    focal: float = 64.0
    trajectory: str = "arc"  # "arc" or "straight"
    path_length: float = 2.0
    curvature: float = 0.1
    pitch: float = 0.05
    points_per_frame: int = 3000
    texture_scale: float = 0.6  # max spatial frequency of nearby box textures, rad/m
    street_half_width: float = 5.0
    street_depth: float = 26.0
    holdout_stride: int = 10
    # each object: {"lo": [...], "hi": [...], "velocity": [...]}; non-zero velocity means moving
    objects: list[dict] = field(default_factory=list)
    track_parked: bool = False
    score_flip_prob: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in ("arc", "straight"):
            raise ValueError(f"unknown trajectory type {self.trajectory!r}")
        if self.num_frames < 2:
            raise ValueError("need at least two frames")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


CROSSING_CAR = {"lo": [-5.4, 0.1, 9.0], "hi": [-1.6, 1.5, 11.0], "velocity": [0.18, 0.0, 0.0]}

# named scene configurations; "textured" is a short, narrow, finely textured
# street whose photometric error constrains the camera poses much more tightly
PRESETS: dict[str, dict] = {
    "street": {},
    "textured": {"texture_scale": 6.0, "street_half_width": 3.0, "street_depth": 16.0,
                 "focal": 40.0, "path_length": 4.0, "points_per_frame": 1500},
    "crossing": {"objects": [CROSSING_CAR], "track_parked": True},
}


def preset(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig.from_dict({**PRESETS[name], **overrides})


def street_layout(half_width: float = 5.0, depth: float = 26.0, rear: float = 13.0,
                  ground: float = 1.5) -> list[tuple[tuple, tuple]]:
    """Static boxes of the street canyon: ground, sky, facades, end walls, parked cars, poles."""
    w, D, g = half_width, depth, ground
    if w <= 2.4 or D <= 4.0 or rear <= 1.0:
        raise ValueError("street too small for its furniture")
    z = D / 26.0  # furniture positions scale with street length
    return [
        ((-w - 2, g, -rear - 1), (w + 2, g + 0.5, D + 6)),
        ((-w - 2, -9.0, -rear - 1), (w + 2, -8.0, D + 6)),
        ((-w - 2, -8.0, -rear - 1), (-w, g, D + 6)),
        ((w, -8.0, -rear - 1), (w + 2, g, D + 6)),
        ((-w, -8.0, D), (w, g, D + 1)),
        ((-w, -8.0, -rear - 1), (w, g, -rear)),
        ((-w + 0.7, g - 1.4, 3.0 * z), (-w + 2.3, g, 7.0 * z)),
        ((-w + 0.7, g - 1.4, 14.0 * z), (-w + 2.3, g, 18.0 * z)),
        ((w - 2.3, g - 1.4, 5.0 * z), (w - 0.7, g, 9.0 * z)),
        ((w - 2.3, g - 1.4, 15.5 * z), (w - 0.7, g, 19.5 * z)),
        ((-w + 0.2, -3.0, 11.0 * z), (-w + 0.6, g, 11.0 * z + 0.4)),
        ((w - 0.6, -3.0, 12.0 * z), (w - 0.2, g, 12.0 * z + 0.4)),
    ]


TEXTURE_REF_DISTANCE = 3.0
PARKED = range(6, 10)


class StreetScene:
    """Static street canyon plus optional moving boxes, rendered exactly."""

    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.texture_scale = config.texture_scale
        self.static = [self._box(lo, hi, rng)
                       for lo, hi in street_layout(config.street_half_width, config.street_depth)]
        self.movers = [self._box(o["lo"], o["hi"], rng, o.get("velocity", (0, 0, 0)))
                       for o in config.objects]

    def _box(self, lo, hi, rng, velocity=(0.0, 0.0, 0.0)) -> Box:
        # distant boxes get proportionally coarser textures so they stay resolvable on screen
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        dist = np.linalg.norm(np.clip(0.0, lo, hi))
        scale = self.texture_scale * min(1.0, TEXTURE_REF_DISTANCE / max(dist, 1e-9))
        freq = rng.uniform(-scale, scale, size=(3, 3))
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        return Box(np.array(lo, float), np.array(hi, float), freq, phase, np.array(velocity, float))

    def intersect(self, origins, dirs, frame: int | None = None):
        """Nearest hit distance and the hit box per ray; movers only if ``frame`` is given."""
        boxes = [b.at(0) for b in self.static]
        if frame is not None:
            boxes += [b.at(frame) for b in self.movers]
        ts = np.stack([intersect_box(origins, dirs, lo, hi) for lo, hi in boxes], axis=-1)
        which = np.argmin(ts, axis=-1)
        t = np.take_along_axis(ts, which[..., None], axis=-1)[..., 0]
        return t, which

    def shade(self, origins, dirs, frame: int | None = None) -> np.ndarray:
        t, which = self.intersect(origins, dirs, frame)
        if not np.all(np.isfinite(t)):
            raise RuntimeError("ray escaped the closed scene")
        x = origins + t[..., None] * dirs
        boxes = self.static + (self.movers if frame is not None else [])
        out = np.empty(x.shape)
        for k, box in enumerate(boxes):
            sel = which == k
            if np.any(sel):
                out[sel] = box.color(x[sel], 0 if k < len(self.static) else frame)
        return out

    def render(self, pose: CameraPose, K: CameraIntrinsics, frame: int | None = None) -> np.ndarray:
        rows, cols = np.mgrid[0:K.height, 0:K.width]
        o, d = generate_rays(K, pose, rows.ravel(), cols.ravel())
        return quantize(self.shade(o, d, frame).reshape(K.height, K.width, 3))


def trajectory(config: SynthConfig) -> list[CameraPose]:
    if config.path_length <= 0:
        raise ValueError("degenerate trajectory: path length must be positive")
    s = (np.arange(config.num_frames) / (config.num_frames - 1) - 0.5) * config.path_length
    kappa = config.curvature if config.trajectory == "arc" else 0.0
    poses = []
    for si in s:
        if kappa:
            heading = kappa * si
            center = np.array([(1 - np.cos(heading)) / kappa, 0.0, np.sin(heading) / kappa])
        else:
            heading = 0.0
            center = np.array([0.0, 0.0, si])
        c, s_ = np.cos(heading), np.sin(heading)
        ry = np.array([[c, 0, s_], [0, 1, 0], [-s_, 0, c]])
        cp, sp = np.cos(-config.pitch), np.sin(-config.pitch)
        rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        cam_to_world = ry @ rx
        poses.append(CameraPose.from_camera_center(matrix_to_rotation(cam_to_world.T), center))
    return poses


def project_box(lo, hi, pose: CameraPose, K: CameraIntrinsics):
    """Pixel bbox [r0, c0, r1, c1) of a box's projected corners, clipped; None if unseen."""
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    T = pose.matrix()
    cam = corners @ T[:3, :3].T + T[:3, 3]
    if np.any(cam[:, 2] <= 0.1):
        return None
    cols = K.fx * cam[:, 0] / cam[:, 2] + K.cx
    rows = K.fy * cam[:, 1] / cam[:, 2] + K.cy
    # pixel centers sit at integer coordinates
    r0 = max(int(np.floor(rows.min() + 0.5)), 0)
    c0 = max(int(np.floor(cols.min() + 0.5)), 0)
    r1 = min(int(np.floor(rows.max() + 0.5)) + 1, K.height)
    c1 = min(int(np.floor(cols.max() + 0.5)) + 1, K.width)
    if r1 <= r0 or c1 <= c0:
        return None
    return (r0, c0, r1, c1)


def _scores(rng, n, moving: bool, flip_prob: float) -> list[float]:
    flips = rng.random(n) < flip_prob
    high = rng.uniform(0.55, 1.0, n)
    low = rng.uniform(0.0, 0.45, n)
    return list(np.where(flips ^ moving, high, low))


def synthesize_scene(config: SynthConfig, rng_seed: int | None = None) -> SceneDataset:
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    scene = StreetScene(config, rng)
    K = CameraIntrinsics(config.focal, config.focal, (config.width - 1) / 2, (config.height - 1) / 2,
                         config.width, config.height)
    poses = trajectory(config)
    frames, statics = [], []
    for i, pose in enumerate(poses):
        image = scene.render(pose, K, frame=i)
        statics.append(scene.render(pose, K))
        rows = rng.uniform(-0.5, K.height - 0.5, config.points_per_frame)
        cols = rng.uniform(-0.5, K.width - 0.5, config.points_per_frame)
        o, d = generate_rays(K, pose, rows, cols)
        t, _ = scene.intersect(o, d)
        frames.append(Frame(image, pose, o + t[:, None] * d, i))

    tracked = [(b.lo, b.hi, b.velocity) for b in scene.movers]
    if config.track_parked:
        tracked += [(scene.static[k].lo, scene.static[k].hi, np.zeros(3)) for k in PARKED]
    tracks = []
    for oid, (lo, hi, vel) in enumerate(tracked):
        moving = bool(np.any(vel != 0))
        seen = []
        for i, pose in enumerate(poses):
            bbox = project_box(lo + vel * i, hi + vel * i, pose, K)
            if bbox is not None:
                seen.append((i, bbox))
        scores = _scores(rng, len(seen), moving, config.score_flip_prob)
        if seen:
            tracks.append(ObjectTrack(oid, [Observation(i, b, float(s)) for (i, b), s in zip(seen, scores)]))
    return SceneDataset(frames, K, tracks, config.holdout_stride, gt_poses=list(poses), static_images=statics)


def oracle_scene(config: SynthConfig, rng_seed: int | None = None) -> StreetScene:
    """The analytic scene behind :func:`synthesize_scene` for the same seed."""
    seed = config.seed if rng_seed is None else rng_seed
    return StreetScene(config, np.random.default_rng(seed))


# --- dataset directory I/O -------------------------------------------------


def save_dataset(dataset: SceneDataset, path) -> None:
    root = Path(path)
    for sub in ("images", "points"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for f in dataset.frames:
        write_ppm(root / "images" / f"{f.frame_index:04d}.ppm", f.image)
        np.savetxt(root / "points" / f"{f.frame_index:04d}.txt", f.depth_points, fmt="%.17g")
    write_poses(root / "poses.txt", {f.frame_index: f.pose for f in dataset.frames})
    write_intrinsics(root / "intrinsics.txt", dataset.intrinsics)
    write_tracks(root / "tracks.jsonl", dataset.tracks)
    meta = {"holdout_stride": dataset.holdout_stride}
    (root / "meta.json").write_text(json.dumps(meta) + "\n")
    if dataset.gt_poses is not None:
        write_poses(root / "poses_gt.txt", {f.frame_index: p for f, p in zip(dataset.frames, dataset.gt_poses)})
    if dataset.static_images is not None:
        (root / "static").mkdir(exist_ok=True)
        for f, img in zip(dataset.frames, dataset.static_images):
            write_ppm(root / "static" / f"{f.frame_index:04d}.ppm", img)


def _read_points(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 3:
                    raise ValueError(f"expected 3 coordinates, got {len(parts)}")
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    for required in ("poses.txt", "intrinsics.txt"):
        if not (root / required).exists():
            raise FileNotFoundError(f"{root / required}: missing dataset file")
    K = read_intrinsics(root / "intrinsics.txt")
    poses = read_poses(root / "poses.txt")
    frames = []
    for idx, pose in sorted(poses.items()):
        img_path = root / "images" / f"{idx:04d}.ppm"
        pts_path = root / "points" / f"{idx:04d}.txt"
        if not img_path.exists():
            raise FileNotFoundError(f"{img_path}: missing image for frame {idx}")
        pts = _read_points(pts_path) if pts_path.exists() else np.zeros((0, 3))
        frames.append(Frame(read_ppm(img_path), pose, pts, idx))
    tracks = read_tracks(root / "tracks.jsonl") if (root / "tracks.jsonl").exists() else []
    stride = 10
    if (root / "meta.json").exists():
        stride = int(json.loads((root / "meta.json").read_text()).get("holdout_stride", 10))
    gt = None
    if (root / "poses_gt.txt").exists():
        gt_map = read_poses(root / "poses_gt.txt")
        gt = [gt_map[f.frame_index] for f in frames]
    statics = None
    if (root / "static").is_dir():
        statics = [read_ppm(root / "static" / f"{f.frame_index:04d}.ppm") for f in frames]
    return SceneDataset(frames, K, tracks, stride, gt_poses=gt, static_images=statics)
