"""Camera model, axis-angle pose parameterization, rays and the weighted
positional encoding used for coarse-to-fine optimization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# below this angle the exponential map switches to its Taylor expansion
SMALL_ANGLE = 1e-8
DEFAULT_END_EPOCH = 2000


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_to_matrix(rotation_vec) -> np.ndarray:
    """Rodrigues exponential map of an axis-angle vector."""
    r = np.asarray(rotation_vec, dtype=np.float64)
    theta = float(np.sqrt(r @ r))
    K = skew(r)
    if theta < SMALL_ANGLE:
        # second-order expansion: I + K + K^2 / 2
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rotation(M: np.ndarray) -> np.ndarray:
    """Logarithm of a rotation matrix (inverse of :func:`rotation_to_matrix`)."""
    M = np.asarray(M, dtype=np.float64)
    cos_t = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # axis from the symmetric part
        S = 0.5 * (M + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(S), 0.0, None))
        i = int(np.argmax(axis))
        axis = S[i] / axis[i]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def camera_directions(self, rows, cols) -> np.ndarray:
        """Unnormalized camera-frame directions through pixel centers.

        Integer pixel coordinates refer to pixel centers, so the pixel at
        (cy, cx) lies on the optical axis.
        """
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        return np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(rows)], axis=-1
        )


@dataclass
class CameraPose:
    """World-to-camera pose with learnable additive corrections.

    ``x_cam = R(rotation_vec + delta_rotation) @ x_world + translation + delta_translation``
    """

    rotation_vec: np.ndarray
    translation: np.ndarray
    delta_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation_vec = np.asarray(self.rotation_vec, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.delta_rotation = np.asarray(self.delta_rotation, dtype=np.float64).reshape(3)
        self.delta_translation = np.asarray(self.delta_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.rotation_vec)) and np.all(np.isfinite(self.translation))):
            raise ValueError("pose components must be finite")

    @classmethod
    def from_camera_center(cls, rotation_vec, center) -> "CameraPose":
        R = rotation_to_matrix(rotation_vec)
        return cls(rotation_vec, -R @ np.asarray(center, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        """4x4 world-to-camera matrix of the refined pose."""
        r, t = refine_pose(self)
        T = np.eye(4)
        T[:3, :3] = rotation_to_matrix(r)
        T[:3, 3] = t
        return T

    def center(self) -> np.ndarray:
        r, t = refine_pose(self)
        return -rotation_to_matrix(r).T @ t

    def with_deltas(self, delta_rotation, delta_translation) -> "CameraPose":
        return replace(self, delta_rotation=np.array(delta_rotation, dtype=np.float64),
                       delta_translation=np.array(delta_translation, dtype=np.float64))

    def baked(self) -> "CameraPose":
        """Fold the corrections into the base pose and reset them to zero."""
        r, t = refine_pose(self)
        return CameraPose(r, t)


def refine_pose(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    # additive in axis-angle space, not group composition
    return pose.rotation_vec + pose.delta_rotation, pose.translation + pose.delta_translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


def generate_ray(intrinsics: CameraIntrinsics, pose: CameraPose, pixel) -> Ray:
    row, col = pixel
    if not (0 <= row < intrinsics.height and 0 <= col < intrinsics.width):
        raise IndexError(f"pixel {pixel} outside {intrinsics.height}x{intrinsics.width} image")
    origins, dirs = generate_rays(intrinsics, pose, np.array([row]), np.array([col]))
    return Ray(origins[0], dirs[0], (int(row), int(col)))


def generate_rays(intrinsics: CameraIntrinsics, pose: CameraPose, rows, cols):
    """Vectorized ray generation; returns (origins, unit directions), both (n, 3)."""
    r, t = refine_pose(pose)
    R = rotation_to_matrix(r)
    v = intrinsics.camera_directions(rows, cols)
    d = v @ R  # row-wise R^T v
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    origin = -R.T @ t
    return np.broadcast_to(origin, d.shape).copy(), d


@dataclass(frozen=True)
class FrequencySchedule:
    order_L: int
    alpha: float = 0.0

    def __post_init__(self):
        if self.order_L < 1:
            raise ValueError("order_L must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def at_epoch(cls, order_L: int, epoch: int, end_epoch: int = DEFAULT_END_EPOCH) -> "FrequencySchedule":
        # clamped at L once the ending epoch is reached
        progress = min(max(epoch, 0) / end_epoch, 1.0)
        return cls(order_L, progress * order_L)

    def weights(self) -> np.ndarray:
        return np.array([frequency_weight(i, self) for i in range(self.order_L)])


def frequency_weight(i: int, schedule: FrequencySchedule) -> float:
    if not 0 <= i < schedule.order_L:
        raise ValueError(f"band index {i} outside [0, {schedule.order_L})")
    u = schedule.alpha - i
    if u < 0:
        return 0.0
    if u < 1:
        # (1 - cos(pi u)) / 2, written so that u = 0, 1/2, 1 give exactly 0, 0.5, 1
        return (1.0 - np.sin((0.5 - u) * np.pi)) / 2.0
    return 1.0


def encoding_size(n: int, order_L: int) -> int:
    return (2 * order_L + 1) * n


def frequency_encode(x, schedule: FrequencySchedule) -> np.ndarray:
    """Weighted positional encoding along the last axis.

    Each component expands to ``[x, w0 cos(pi x), w0 sin(pi x), ...,
    w_{L-1} cos(2^{L-1} pi x), w_{L-1} sin(2^{L-1} pi x)]``; the raw value is
    never weighted.
    """
    x = np.asarray(x, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(schedule.order_L)
    w = schedule.weights()
    arg = x[..., None] * freqs
    out = np.empty(x.shape + (2 * schedule.order_L + 1,))
    out[..., 0] = x
    out[..., 1::2] = w * np.cos(arg)
    out[..., 2::2] = w * np.sin(arg)
    return out.reshape(x.shape[:-1] + (-1,)) if x.ndim else out


def perturb_pose(pose: CameraPose, sigma: float, rng_seed: int) -> CameraPose:
    """Multiplicative per-component noise ``c * (1 + delta)``, ``delta ~ N(0, sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(rng_seed)
    delta = rng.normal(0.0, sigma, size=6) if sigma > 0 else np.zeros(6)
    return CameraPose(pose.rotation_vec * (1.0 + delta[:3]), pose.translation * (1.0 + delta[3:]))


def perturb_poses(poses: list[CameraPose], sigma: float, rng_seed: int) -> list[CameraPose]:
    seeds = np.random.SeedSequence(rng_seed).spawn(len(poses))
    return [perturb_pose(p, sigma, int(s.generate_state(1)[0])) for p, s in zip(poses, seeds)]


def read_poses(path) -> dict[int, CameraPose]:
    poses = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            try:
                if len(parts) != 7:
                    raise ValueError(f"expected 7 fields, got {len(parts)}")
                vals = [float(p) for p in parts[1:]]
                poses[int(parts[0])] = CameraPose(vals[:3], vals[3:])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad pose line {line.strip()!r}: {exc}") from None
    return poses


def write_poses(path, poses: dict[int, CameraPose]) -> None:
    with open(path, "w") as fh:
        for idx in sorted(poses):
            r, t = refine_pose(poses[idx])
            fh.write(f"{idx} " + " ".join(repr(float(v)) for v in (*r, *t)) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    with open(path) as fh:
        text = fh.read().split()
    if len(text) != 6:
        raise ValueError(f"{path}:1: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(v) for v in text[:4])
        return CameraIntrinsics(fx, fy, cx, cy, int(text[4]), int(text[5]))
    except ValueError as exc:
        raise ValueError(f"{path}:1: {exc}") from None


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n")
