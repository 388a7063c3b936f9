"""Track-level moving/static classification and ray masks.

Per-frame motion scores come from an upstream classifier; a track is declared
moving for the whole sequence when the median of its binarized labels is at
least one half, and every box of a moving track is excluded from ray casting.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Observation:
    frame_index: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1; end-exclusive
    motion_score: float


@dataclass
class ObjectTrack:
    object_id: int
    observations: list[Observation] = field(default_factory=list)

    def __post_init__(self):
        frames = [o.frame_index for o in self.observations]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.object_id}: frame indices must be strictly increasing")
        for o in self.observations:
            r0, c0, r1, c1 = o.bbox
            if r1 <= r0 or c1 <= c0:
                raise ValueError(f"track {self.object_id}: degenerate bbox {o.bbox} in frame {o.frame_index}")

    @property
    def frames(self) -> list[int]:
        return [o.frame_index for o in self.observations]

    @property
    def scores(self) -> list[float]:
        return [o.motion_score for o in self.observations]


@dataclass(frozen=True)
class PixelMask:
    grid: np.ndarray  # True = excluded from ray casting
    frame_index: int

    @property
    def count(self) -> int:
        return int(self.grid.sum())


def binarize_scores(track: ObjectTrack, threshold: float = 0.5) -> list[int]:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return [int(s >= threshold) for s in track.scores]


def vote_motion(labels) -> int:
    """1 when the median label is >= 0.5 (even lengths average the middle pair)."""
    labels = list(labels)
    if not labels:
        raise ValueError("cannot vote on an empty label sequence")
    return int(np.median(np.asarray(labels, dtype=np.float64)) >= 0.5)


def classify_tracks(tracks, threshold: float = 0.5) -> dict[int, int]:
    return {t.object_id: vote_motion(binarize_scores(t, threshold)) for t in tracks if t.observations}


def _clip_bbox(bbox, image_size):
    h, w = image_size
    r0, c0, r1, c1 = bbox
    clipped = (max(r0, 0), max(c0, 0), min(r1, h), min(c1, w))
    return clipped


def build_masks(tracks, image_size, num_frames: int, threshold: float = 0.5) -> list[PixelMask]:
    """Union of boxes of every track voted moving, one mask per frame."""
    h, w = image_size
    grids = np.zeros((num_frames, h, w), dtype=bool)
    labels = classify_tracks(tracks, threshold)
    for track in tracks:
        if not labels.get(track.object_id):
            continue
        for obs in track.observations:
            if not 0 <= obs.frame_index < num_frames:
                continue
            r0, c0, r1, c1 = _clip_bbox(obs.bbox, image_size)
            if (r0, c0, r1, c1) != tuple(obs.bbox):
                log.warning("track %d frame %d: bbox %s clipped to image", track.object_id,
                            obs.frame_index, obs.bbox)
            if r1 > r0 and c1 > c0:
                grids[obs.frame_index, r0:r1, c0:c1] = True
    return [PixelMask(grids[i], i) for i in range(num_frames)]


def empty_masks(image_size, num_frames: int) -> list[PixelMask]:
    return [PixelMask(np.zeros(image_size, dtype=bool), i) for i in range(num_frames)]


def mask_iou(predicted: PixelMask, reference: PixelMask) -> float:
    a, b = np.asarray(predicted.grid, bool), np.asarray(reference.grid, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def vote_table(tracks, threshold: float = 0.5) -> list[tuple[int, int, int, int]]:
    """Rows of (object_id, votes_moving, votes_static, M)."""
    rows = []
    for t in tracks:
        labels = binarize_scores(t, threshold)
        moving = sum(labels)
        rows.append((t.object_id, moving, len(labels) - moving, vote_motion(labels) if labels else 0))
    return rows


def read_tracks(path) -> list[ObjectTrack]:
    """Parse ``tracks.jsonl``: one observation record per line."""
    per_object: dict[int, list[Observation]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bbox = tuple(int(v) for v in rec["bbox"])
                if len(bbox) != 4:
                    raise ValueError("bbox needs 4 values")
                obs = Observation(int(rec["frame"]), bbox, float(rec["motion_score"]))
                per_object.setdefault(int(rec["id"]), []).append(obs)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad track record: {exc}") from None
    return [ObjectTrack(oid, sorted(obs, key=lambda o: o.frame_index))
            for oid, obs in sorted(per_object.items())]


def write_tracks(path, tracks) -> None:
    with open(path, "w") as fh:
        for t in tracks:
            for o in t.observations:
                fh.write(json.dumps({"id": t.object_id, "frame": o.frame_index,
                                     "bbox": list(o.bbox), "motion_score": o.motion_score}) + "\n")
