"""Force-stream processing: normalization to 8-bit images, multi-sensor
stitching, nearest-neighbor resize, and video/tactile timestamp sync.

All functions are pure over immutable inputs and safe to parallelize
across episodes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

STATS_SCOPES = ("per-episode", "per-frame", "fixed-range")


@dataclass(frozen=True)
class SensorLayout:
    """Geometry of the tactile array: taxel grid per sensor, 3 force axes."""

    sensor_count: int = 2
    grid_h: int = 4
    grid_w: int = 3
    stitch_order: tuple = (0, 1)

    def __post_init__(self):
        if self.sensor_count < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise ValidationError(f"invalid layout: {self}")
        if sorted(self.stitch_order) != list(range(self.sensor_count)):
            raise ValidationError(f"stitch_order {self.stitch_order} is not a permutation of 0..{self.sensor_count - 1}")


@dataclass
class ForceFrame:
    """One sensor reading: grid_h x grid_w taxels, each a 3-axis force in N."""

    sensor_id: int
    timestamp_us: int
    forces: np.ndarray

    def validate(self) -> None:
        if self.forces.ndim != 3 or self.forces.shape[2] != 3:
            raise ShapeError(f"forces must be (h, w, 3), got {self.forces.shape}")
        if not np.all(np.isfinite(self.forces)):
            raise ValidationError(f"non-finite force in frame at t={self.timestamp_us}")


@dataclass
class TactileImage:
    """3-channel unsigned 8-bit image derived from force data."""

    pixels: np.ndarray  # (h, w, 3) uint8

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"tactile image must be (h, w, 3), got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ShapeError(f"tactile image must be uint8, got {self.pixels.dtype}")


@dataclass(slots=True)
class SyncedSample:
    """A video frame paired with its nearest-in-time tactile frame."""

    video_frame_index: int
    video_timestamp_us: int
    tactile_index: int
    tactile_timestamp_us: int
    skew_us: int
    degraded: bool
    tactile: Optional[TactileImage]


def _round_half_up_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def normalize_forces(frames: Sequence[ForceFrame], stats_scope: str = "per-episode",
                     fixed_range: tuple[float, float] | None = None) -> np.ndarray:
    """Max-min normalize a window of frames to uint8 grids, per channel.

    The 3 force axes map to the 3 image channels in order (fx, fy, fz).
    A constant channel maps to 0. Returns an array (T, grid_h, grid_w, 3).
    """
    if len(frames) == 0:
        raise ValidationError("normalize_forces: empty frame window")
    if stats_scope not in STATS_SCOPES:
        raise ValidationError(f"unknown stats_scope {stats_scope!r}, expected one of {STATS_SCOPES}")
    stack = np.stack([f.forces for f in frames]).astype(np.float64)
    if not np.all(np.isfinite(stack)):
        bad = int(np.where(~np.isfinite(stack).all(axis=(1, 2, 3)))[0][0])
        raise ValidationError(f"non-finite force in frame index {bad}")

    if stats_scope == "fixed-range":
        if fixed_range is None:
            raise ValidationError("fixed-range scope requires fixed_range=(lo, hi)")
        lo = np.full((1, 1, 1, 3), fixed_range[0], dtype=np.float64)
        hi = np.full((1, 1, 1, 3), fixed_range[1], dtype=np.float64)
    elif stats_scope == "per-episode":
        lo = stack.min(axis=(0, 1, 2), keepdims=True)
        hi = stack.max(axis=(0, 1, 2), keepdims=True)
    else:  # per-frame
        lo = stack.min(axis=(1, 2), keepdims=True)
        hi = stack.max(axis=(1, 2), keepdims=True)

    span = hi - lo
    out = np.zeros_like(stack)
    nonconst = np.broadcast_to(span > 0, stack.shape)
    scaled = 255.0 * (stack - lo) / np.where(span > 0, span, 1.0)
    out[nonconst] = scaled[nonconst]
    return _round_half_up_u8(out)


def stitch_sensors(grids: Sequence[np.ndarray], layout: SensorLayout) -> TactileImage:
    """Concatenate per-sensor uint8 grids horizontally in stitch order."""
    if len(grids) != layout.sensor_count:
        raise ShapeError(f"expected {layout.sensor_count} grids, got {len(grids)}")
    for i, g in enumerate(grids):
        if g.shape != (layout.grid_h, layout.grid_w, 3):
            raise ShapeError(f"grid {i} has shape {g.shape}, expected {(layout.grid_h, layout.grid_w, 3)}")
    ordered = [np.asarray(grids[sid], dtype=np.uint8) for sid in layout.stitch_order]
    return TactileImage(np.concatenate(ordered, axis=1))


def resize_nearest(img: TactileImage, target_h: int, target_w: int) -> TactileImage:
    """Nearest-neighbor rescale; every output pixel is some input pixel."""
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target dims must be positive, got {target_h}x{target_w}")
    src = img.pixels
    rows = (np.arange(target_h) * src.shape[0] // target_h).astype(np.intp)
    cols = (np.arange(target_w) * src.shape[1] // target_w).astype(np.intp)
    return TactileImage(src[np.ix_(rows, cols)])


def force_window_to_image(frames_per_sensor: Sequence[Sequence[ForceFrame]],
                          layout: SensorLayout, target: int = 224,
                          stats_scope: str = "per-episode",
                          fixed_range: tuple[float, float] | None = None,
                          frame_index: int = -1) -> TactileImage:
    """Full pipeline for one time point: normalize each sensor's window,
    stitch the selected frame across sensors, resize to target x target."""
    grids = []
    for frames in frames_per_sensor:
        u8 = normalize_forces(frames, stats_scope=stats_scope, fixed_range=fixed_range)
        grids.append(u8[frame_index])
    return resize_nearest(stitch_sensors(grids, layout), target, target)


def synchronize(tactile: Sequence[ForceFrame] | np.ndarray,
                video_timestamps_us: Sequence[int],
                period_us: int = 16667) -> list[SyncedSample]:
    """Pair each video frame with the tactile frame of minimal |dt|.

    Ties break toward the earlier tactile frame. Pairs with skew above half
    the tactile sampling period are flagged degraded rather than dropped.
    """
    if isinstance(tactile, np.ndarray):
        t_ts = np.asarray(tactile, dtype=np.int64)
    else:
        if len(tactile) == 0:
            raise ValidationError("synchronize: empty tactile stream")
        t_ts = np.array([f.timestamp_us for f in tactile], dtype=np.int64)
    if t_ts.size == 0:
        raise ValidationError("synchronize: empty tactile stream")
    v_ts = np.asarray(video_timestamps_us, dtype=np.int64)
    if v_ts.size == 0:
        raise ValidationError("synchronize: empty video stream")
    if np.any(np.diff(t_ts) <= 0):
        raise ValidationError("synchronize: tactile timestamps must be strictly increasing")

    right = np.searchsorted(t_ts, v_ts, side="left")
    left = np.clip(right - 1, 0, t_ts.size - 1)
    right = np.clip(right, 0, t_ts.size - 1)
    d_left = np.abs(v_ts - t_ts[left])
    d_right = np.abs(v_ts - t_ts[right])
    pick = np.where(d_right < d_left, right, left)  # tie -> left (earlier)
    skew = np.abs(v_ts - t_ts[pick])
    max_skew = period_us // 2 + 1
    return [
        SyncedSample(
            video_frame_index=int(i),
            video_timestamp_us=int(v_ts[i]),
            tactile_index=int(pick[i]),
            tactile_timestamp_us=int(t_ts[pick[i]]),
            skew_us=int(skew[i]),
            degraded=bool(skew[i] > max_skew),
            tactile=None,
        )
        for i in range(v_ts.size)
    ]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_force_jsonl(path, frames: Sequence[ForceFrame]) -> None:
    """One ForceFrame per line: sensor_id, timestamp_us, row-major triplets."""
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            rec = {
                "sensor_id": f.sensor_id,
                "timestamp_us": f.timestamp_us,
                "forces": [round(float(x), 6) for x in f.forces.reshape(-1)],
                "grid": [f.forces.shape[0], f.forces.shape[1]],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_force_jsonl(path) -> list[ForceFrame]:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                gh, gw = rec["grid"]
                forces = np.array(rec["forces"], dtype=np.float32).reshape(gh, gw, 3)
                frames.append(ForceFrame(int(rec["sensor_id"]), int(rec["timestamp_us"]), forces))
            except (KeyError, ValueError, json.JSONDecodeError) as e:
                raise ValidationError(f"{path}:{lineno}: bad force frame: {e}") from e
    return frames


_BLOB_HEADER = struct.Struct("<III")  # h, w, c


def write_image_blob(path, pixels: np.ndarray) -> None:
    """Raw u8 image blob with a 12-byte (h, w, c) little-endian header."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, c = pixels.shape
    with open(path, "wb") as fh:
        fh.write(_BLOB_HEADER.pack(h, w, c))
        fh.write(pixels.tobytes())


def read_image_blob(path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w, c = _BLOB_HEADER.unpack_from(data, 0)
    return np.frombuffer(data, dtype=np.uint8, offset=_BLOB_HEADER.size).reshape(h, w, c).copy()
