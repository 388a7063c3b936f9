"""Joint optimization of point features, MLP, attention scorer and per-frame
pose corrections under the masked photometric loss."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from . import autodiff as ad
from .geometry import DEFAULT_END_EPOCH, CameraPose, FrequencySchedule
from .lightfield import (
    COUNTERS,
    DEFAULT_K,
    DIR_BANDS,
    FEATURE_BANDS,
    HIDDEN,
    DivergenceError,
    LightField,
    attention_size,
    gather_neighbors,
    init_attention,
    init_mlp,
    mlp_shapes,
    pose_rays,
    shade,
)
from .metrics import ate
from .scene import SceneDataset

log = logging.getLogger(__name__)

SEGMENTS = ("point_features", "mlp_weights", "attention_weights", "pose_deltas")
CHECKPOINT_MAGIC = b"PLFCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    images_per_batch: int = 2
    rays_per_image: int = 256
    learning_rate: float = 1e-3
    # held until learning_rate_decay_start, then decayed exponentially to learning_rate_final
    learning_rate_final: float = 1e-5
    learning_rate_decay_start: int = 1500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    end_epoch_alpha: int = DEFAULT_END_EPOCH
    window_m: int = 3
    augmentation_H: int = 3
    epochs: int = 3000
    rng_seed: int = 0
    feature_dim: int = 16
    k: int = DEFAULT_K
    feature_init_std: float = 0.1
    attention_sharpness: float = 10.0
    refine_poses: bool = True
    lazy_sparse: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("images_per_batch", "rays_per_image", "learning_rate", "learning_rate_final",
                     "end_epoch_alpha", "feature_dim", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("window_m", "augmentation_H", "epochs", "checkpoint_every", "learning_rate_decay_start"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class ParameterStore:
    """Flat parameter vector split into named segments, with its gradient and Adam state."""

    def __init__(self, layout: dict[str, list[tuple[str, tuple[int, ...]]]]):
        if tuple(layout) != SEGMENTS:
            raise ValueError(f"segments must be {SEGMENTS}")
        self.layout = {seg: [(n, tuple(s)) for n, s in entries] for seg, entries in layout.items()}
        self.offsets: dict[str, tuple[int, int]] = {}
        self.entries: dict[str, tuple[int, tuple[int, ...]]] = {}
        pos = 0
        for seg, entries in self.layout.items():
            start = pos
            for name, shape in entries:
                self.entries[name] = (pos, shape)
                pos += int(np.prod(shape))
            self.offsets[seg] = (start, pos)
        self.values = np.zeros(pos)
        self.grad = np.zeros(pos)
        self.m = np.zeros(pos)
        self.v = np.zeros(pos)
        self.step = 0

    @classmethod
    def for_scene(cls, num_points: int, num_frames: int, feature_dim: int = 16) -> "ParameterStore":
        return cls({
            "point_features": [("features", (num_points, feature_dim))],
            "mlp_weights": mlp_shapes(feature_dim),
            "attention_weights": [("attention", (attention_size(feature_dim),))],
            "pose_deltas": [("pose_deltas", (num_frames, 6))],
        })

    def __len__(self):
        return len(self.values)

    def segment(self, seg: str, of: str = "values") -> np.ndarray:
        a, b = self.offsets[seg]
        return getattr(self, of)[a:b]

    def view(self, name: str, of: str = "values") -> np.ndarray:
        pos, shape = self.entries[name]
        return getattr(self, of)[pos:pos + int(np.prod(shape))].reshape(shape)

    def row_width(self, seg: str) -> int:
        """Trailing width of the single entry of a per-row segment (features, pose deltas)."""
        (name, shape), = self.layout[seg]
        return int(shape[-1])

    def segment_of(self, index: int) -> str:
        for seg, (a, b) in self.offsets.items():
            if a <= index < b:
                return seg
        raise IndexError(index)

    @property
    def feature_dim(self) -> int:
        return self.entries["features"][1][1]

    @property
    def mlp_names(self) -> list[str]:
        return [n for n, _ in self.layout["mlp_weights"]]

    def mlp(self) -> dict[str, np.ndarray]:
        return {n: self.view(n) for n in self.mlp_names}

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.layout)
        for attr in ("values", "grad", "m", "v"):
            getattr(other, attr)[:] = getattr(self, attr)
        other.step = self.step
        return other

    def equals(self, other: "ParameterStore") -> bool:
        return (self.layout == other.layout and self.step == other.step
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in ("values", "m", "v")))

    def refined_poses(self, base_poses: list[CameraPose]) -> list[CameraPose]:
        deltas = self.view("pose_deltas")
        return [p.with_deltas(d[:3], d[3:]) for p, d in zip(base_poses, deltas)]

    def light_field(self, k: int = DEFAULT_K, epoch: int | None = None,
                    end_epoch: int = DEFAULT_END_EPOCH) -> LightField:
        # default: the schedule of the last optimization step taken
        e = max(self.step - 1, 0) if epoch is None else epoch
        return LightField(self.view("features").copy(), {n: a.copy() for n, a in self.mlp().items()},
                          self.view("attention").copy(), k,
                          FrequencySchedule.at_epoch(DIR_BANDS, e, end_epoch),
                          FrequencySchedule.at_epoch(FEATURE_BANDS, e, end_epoch))


def init_store(dataset: SceneDataset, config: TrainConfig) -> ParameterStore:
    store = ParameterStore.for_scene(dataset.num_points, len(dataset), config.feature_dim)
    rng = np.random.default_rng(config.rng_seed)
    store.view("features")[:] = rng.normal(0.0, config.feature_init_std, store.view("features").shape)
    for name, arr in init_mlp(config.feature_dim, rng, HIDDEN).items():
        store.view(name)[:] = arr
    store.view("attention")[:] = init_attention(config.feature_dim, config.attention_sharpness)
    return store


# --- loss and gradients --------------------------------------------------------


def masked_loss(rendered_colors, reference_colors) -> float:
    """Sum of squared per-channel errors over the sampled (unmasked) rays."""
    a, b = np.asarray(rendered_colors, np.float64), np.asarray(reference_colors, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"color batches differ in shape: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


@dataclass
class RayBatch:
    """Everything needed to evaluate the loss on one sampled batch."""

    frames: list[int]
    window_ids: list[np.ndarray]
    pixels: list[np.ndarray]  # (n, 2) rows/cols per frame
    colors: list[np.ndarray]
    epoch: int
    neighbor_ids: list[np.ndarray] | None = None


def batch_loss(store: ParameterStore, dataset: SceneDataset, batch: RayBatch, config: TrainConfig,
               tape: ad.Tape | None = None):
    """Forward pass of the loss; with a tape, returns ``(loss_var, leaves)``."""
    K = dataset.intrinsics
    f = store.feature_dim
    wrap = tape.var if tape is not None else ad.constant
    features = wrap(store.view("features"), "features")
    attention = wrap(store.view("attention"), "attention")
    mlp = {n: wrap(store.view(n), n) for n in store.mlp_names}
    deltas = (wrap(store.view("pose_deltas"), "pose_deltas") if config.refine_poses
              else ad.constant(store.view("pose_deltas")))
    leaves = {"features": features, "attention": attention, "pose_deltas": deltas, **mlp}

    sched_dir = FrequencySchedule.at_epoch(DIR_BANDS, batch.epoch, config.end_epoch_alpha)
    sched_feat = FrequencySchedule.at_epoch(FEATURE_BANDS, batch.epoch, config.end_epoch_alpha)
    all_points = dataset.all_points

    origins, dirs, ids, valid, reference = [], [], [], [], []
    for j, fi in enumerate(batch.frames):
        base = dataset.frames[fi].pose
        rot = ad.add(base.rotation_vec, ad.getitem(deltas, (fi, slice(0, 3))))
        trans = ad.add(base.translation, ad.getitem(deltas, (fi, slice(3, 6))))
        px = batch.pixels[j]
        cam = K.camera_directions(px[:, 0], px[:, 1])
        origin, d = pose_rays(rot, trans, cam)
        n = len(px)
        o = ad.mul(np.ones((n, 1)), ad.reshape(origin, 1, 3))
        if batch.neighbor_ids is not None:
            nid = batch.neighbor_ids[j]
            ok = np.ones(nid.shape, bool)
        else:
            nid, ok, _ = gather_neighbors(all_points, batch.window_ids[j], o.value, d.value, config.k)
        origins.append(o)
        dirs.append(d)
        ids.append(nid)
        valid.append(ok)
        reference.append(batch.colors[j])
    origins = ad.concat(origins, axis=0)
    dirs = ad.concat(dirs, axis=0)
    ids = np.concatenate(ids)
    valid = np.concatenate(valid)
    rgb, _ = shade(ad.take_rows(features, ids), all_points[ids], valid, origins, dirs, attention, mlp,
                   sched_dir, sched_feat, f)
    COUNTERS.rays_cast += len(ids)
    diff = rgb - np.concatenate(reference)
    loss = ad.sum_(ad.square(diff))
    return loss, leaves, ids


def backward(tape: ad.Tape, loss: ad.Var, leaves: dict[str, ad.Var], store: ParameterStore) -> np.ndarray:
    """Accumulate d(loss)/d(parameters) into ``store.grad``."""
    tape.backward(loss)
    for name, leaf in leaves.items():
        if leaf.grad is None or leaf.tape is None:
            continue
        store.view(name, "grad")[...] += leaf.grad
    for seg in SEGMENTS:
        g = store.segment(seg, "grad")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in segment {seg!r}")
    return store.grad


def loss_and_grad(store: ParameterStore, dataset: SceneDataset, batch: RayBatch, config: TrainConfig):
    tape = ad.Tape()
    store.zero_grad()
    loss, leaves, _ = batch_loss(store, dataset, batch, config, tape)
    backward(tape, loss, leaves, store)
    return float(loss.value), store.grad.copy()


def freeze_neighbors(store: ParameterStore, dataset: SceneDataset, batch: RayBatch,
                     config: TrainConfig) -> RayBatch:
    """Pin the neighbor ids of ``batch`` to the current poses (the query itself is not
    differentiable, so gradient checks must hold it fixed)."""
    _, _, ids = batch_loss(store, dataset, batch, config)
    cuts = np.cumsum([len(p) for p in batch.pixels])[:-1]
    return replace(batch, neighbor_ids=np.split(ids, cuts))


@dataclass
class GradCheck:
    index: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    kink: np.ndarray  # a ReLU changes state between the two stencil points

    def rel_error(self) -> np.ndarray:
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-12)
        return np.abs(self.analytic - self.numeric) / scale


def gradient_check(store: ParameterStore, dataset: SceneDataset, batch: RayBatch, config: TrainConfig,
                   indices, h: float = 1e-5) -> GradCheck:
    """Central differences of the batch loss at flat parameter ``indices``.

    ``batch`` should carry frozen neighbor ids (see :func:`freeze_neighbors`).
    The store is restored afterwards.
    """
    indices = np.asarray(indices, dtype=np.int64)
    _, grad = loss_and_grad(store, dataset, batch, config)
    numeric = np.empty(len(indices))
    kink = np.zeros(len(indices), bool)
    for j, i in enumerate(indices):
        old = store.values[i]
        try:
            store.values[i] = old + h
            with ad.record_relu_masks() as on_p:
                lp = batch_loss(store, dataset, batch, config)[0].value
            store.values[i] = old - h
            with ad.record_relu_masks() as on_m:
                lm = batch_loss(store, dataset, batch, config)[0].value
        finally:
            store.values[i] = old
        numeric[j] = (float(lp) - float(lm)) / (2 * h)
        kink[j] = any(not np.array_equal(p, m) for p, m in zip(on_p, on_m))
    return GradCheck(indices, grad[indices], numeric, kink)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """``learning_rate`` until the decay start, then exponential decay to ``learning_rate_final``
    at the last epoch."""
    start = config.learning_rate_decay_start
    if epoch <= start or config.epochs - 1 <= start:
        return config.learning_rate
    frac = min((epoch - start) / (config.epochs - 1 - start), 1.0)
    return config.learning_rate * (config.learning_rate_final / config.learning_rate) ** frac


@numba.njit(cache=True, nogil=True)
def _adam_kernel(values, grad, m, v, lr_hat, b1, b2, eps, inv_sqrt_bc2):
    # fused dense update; clears the gradient as it goes and reports finiteness
    finite = True
    for i in range(values.shape[0]):
        g = grad[i]
        mi = m[i] * b1 + (1.0 - b1) * g
        vi = v[i] * b2 + (1.0 - b2) * (g * g)
        m[i] = mi
        v[i] = vi
        values[i] -= lr_hat * (mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps))
        grad[i] = 0.0
        finite &= np.isfinite(values[i])
    return finite


def _adam_update(values, grad, m, v, lr_hat, config: TrainConfig, bc2: float) -> None:
    """In-place Adam update of matching arrays; ``lr_hat`` already holds the first-moment correction."""
    m *= config.adam_beta1
    m += (1.0 - config.adam_beta1) * grad
    v *= config.adam_beta2
    v += (1.0 - config.adam_beta2) * grad * grad
    denom = np.sqrt(v)
    denom *= 1.0 / np.sqrt(bc2)
    denom += config.adam_eps
    np.divide(m, denom, out=denom)
    denom *= lr_hat
    values -= denom


# segments whose rows are touched only when their point or frame is in the batch
SPARSE_SEGMENTS = ("point_features", "pose_deltas")


def adam_step(store: ParameterStore, config: TrainConfig, lr: float | None = None) -> ParameterStore:
    """One bias-corrected Adam update; clears the gradient.

    With ``config.lazy_sparse`` the rows of the sparse segments (one row per point or
    per frame) keep their moments and values when the batch gave them no gradient.
    """
    lr = config.learning_rate if lr is None else lr
    store.step += 1
    bc1 = 1.0 - config.adam_beta1**store.step
    bc2 = 1.0 - config.adam_beta2**store.step
    lr_hat = lr / bc1
    if not config.lazy_sparse:
        finite = _adam_kernel(store.values, store.grad, store.m, store.v, lr_hat, config.adam_beta1,
                              config.adam_beta2, config.adam_eps, 1.0 / np.sqrt(bc2))
    else:
        for seg in SEGMENTS:
            a, b = store.offsets[seg]
            if seg not in SPARSE_SEGMENTS:
                _adam_update(store.values[a:b], store.grad[a:b], store.m[a:b], store.v[a:b], lr_hat, config, bc2)
                continue
            width = store.row_width(seg)
            g = store.grad[a:b].reshape(-1, width)
            rows = np.flatnonzero(np.any(g != 0.0, axis=1))
            if len(rows) == 0:
                continue
            vals, m, v = (arr[a:b].reshape(-1, width) for arr in (store.values, store.m, store.v))
            sub = [vals[rows], m[rows], v[rows]]
            _adam_update(sub[0], g[rows], sub[1], sub[2], lr_hat, config, bc2)
            vals[rows], m[rows], v[rows] = sub
        store.zero_grad()
        finite = bool(np.all(np.isfinite(store.values)))
    if not finite:
        raise DivergenceError("non-finite parameters after optimizer step")
    return store


# --- training loop -------------------------------------------------------------------


class Sampler:
    """Draws training batches: frames, augmentation windows and unmasked pixels."""

    def __init__(self, dataset: SceneDataset, masks, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 1]))
        self.train = np.array(dataset.train_indices)
        K = dataset.intrinsics
        self.masks = [np.zeros(K.shape, bool) if masks is None else np.asarray(getattr(mk, "grid", mk), bool)
                      for mk in (masks if masks is not None else [None] * len(dataset))]
        self.allowed = [np.flatnonzero(~mk.ravel()) for mk in self.masks]
        for i in self.train:
            if len(self.allowed[i]) < config.rays_per_image:
                raise ValueError(f"frame {i}: only {len(self.allowed[i])} unmasked pixels for "
                                 f"{config.rays_per_image} rays")
        self._windows: dict[int, np.ndarray] = {}

    def window(self, center: int) -> np.ndarray:
        if center not in self._windows:
            self._windows[center] = self.dataset.window_ids(center, self.config.window_m)
        return self._windows[center]

    def draw(self, epoch: int) -> RayBatch:
        cfg = self.config
        W = self.dataset.intrinsics.width
        frames = self.rng.choice(self.train, size=min(cfg.images_per_batch, len(self.train)), replace=False)
        windows, pixels, colors = [], [], []
        for fi in frames:
            h = int(self.rng.integers(-cfg.augmentation_H, cfg.augmentation_H + 1))
            center = int(np.clip(fi + h, 0, len(self.dataset) - 1))
            flat = self.rng.choice(self.allowed[fi], size=cfg.rays_per_image, replace=False)
            rows, cols = np.divmod(flat, W)
            COUNTERS.masked_rays += int(self.masks[fi][rows, cols].sum())
            windows.append(self.window(center))
            pixels.append(np.stack([rows, cols], axis=1))
            colors.append(self.dataset.frames[fi].image[rows, cols])
        return RayBatch([int(f) for f in frames], windows, pixels, colors, epoch)


@dataclass
class TrainResult:
    store: ParameterStore
    history: list[dict] = field(default_factory=list)
    poses: list[CameraPose] = field(default_factory=list)
    diverged: bool = False


def train(dataset: SceneDataset, masks, config: TrainConfig, gt_poses=None, out_dir=None,
          callback=None, store: ParameterStore | None = None) -> TrainResult:
    """Run ``config.epochs`` optimization steps (one sampled batch each)."""
    store = store if store is not None else init_store(dataset, config)
    sampler = Sampler(dataset, masks, config)
    history = []
    base = dataset.poses
    train_idx = dataset.train_indices
    gt = None if gt_poses is None else [gt_poses[i] for i in train_idx]
    last_good = store.copy()
    out = Path(out_dir) if out_dir is not None else None
    diverged = False
    for epoch in range(config.epochs):
        batch = sampler.draw(epoch)
        try:
            tape = ad.Tape()
            loss, leaves, _ = batch_loss(store, dataset, batch, config, tape)
            if not np.isfinite(loss.value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            backward(tape, loss, leaves, store)
            adam_step(store, config, learning_rate_at(config, epoch))
            if not np.all(np.isfinite(store.values)):
                raise DivergenceError(f"non-finite parameters after step {epoch}")
            row = {"epoch": epoch, "loss": float(loss.value),
                   "alpha": FrequencySchedule.at_epoch(FEATURE_BANDS, epoch, config.end_epoch_alpha).alpha,
                   "alpha_dir": FrequencySchedule.at_epoch(DIR_BANDS, epoch, config.end_epoch_alpha).alpha}
            if gt is not None:
                refined = store.refined_poses(base)
                row["ate_mean"] = ate([refined[i] for i in train_idx], gt).mean
        except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.error("training diverged: %s", exc)
            if out is not None:
                dump_checkpoint(last_good, out / "checkpoint_last_good.bin")
            diverged = True
            store = last_good
            break
        history.append(row)
        if callback is not None:
            callback(row, store)
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            last_good = store.copy()
            if out is not None:
                dump_checkpoint(store, out / f"checkpoint_{epoch + 1:05d}.bin")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / "history.csv", history)
        dump_checkpoint(store, out / "checkpoint_final.bin")
    return TrainResult(store, history, store.refined_poses(base), diverged)


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "alpha", "ate_mean"])
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["alpha"]),
                        repr(row["ate_mean"]) if "ate_mean" in row else ""])


# --- checkpoints ---------------------------------------------------------------------


def dump_checkpoint(store: ParameterStore, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"layout": {s: [[n, list(sh)] for n, sh in e] for s, e in store.layout.items()},
                         "step": store.step, "size": len(store)}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in (store.values, store.m, store.v):
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ParameterStore:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError:
        raise ValueError(f"{path}: truncated or corrupt checkpoint header") from None
    store = ParameterStore({s: [(n, tuple(sh)) for n, sh in e] for s, e in header["layout"].items()})
    n = header["size"]
    body = raw[16 + hlen:]
    if n != len(store) or len(body) != 3 * 8 * n:
        raise ValueError(f"{path}: truncated checkpoint ({len(body)} of {3 * 8 * n} payload bytes)")
    arrays = np.frombuffer(body, dtype="<f8").reshape(3, n)
    store.values[:], store.m[:], store.v[:] = arrays
    store.step = header["step"]
    return store
