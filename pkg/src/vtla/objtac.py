"""Tri-modal object dataset: schema, JSONL manifest, synthetic generator,
and episode storage.

The synthetic generator emits (text, image, force stream) triplets whose
labels are recoverable by construction: material sets the spatial frequency
pair of the taxel texture, roughness the amplitude of a near-Nyquist
component, hardness the force ramp speed and the contact spread. The vision
image carries object silhouette and a material-tied color; absolute contact
force appears only in the tactile stream.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .numerics import SeededRng
from .tactile import ForceFrame, SensorLayout

MATERIALS = ("plastic", "glass", "wood", "brick", "metal",
             "fabric", "leather", "ceramic", "paper", "others")
ROUGHNESS = ("rough", "smooth")
HARDNESS = ("rigid", "soft")

# spatial frequency pair (cycles across sensor width / height), one per material
TEXTURE_FREQS = {
    "plastic": (1, 1), "glass": (2, 1), "wood": (3, 1), "brick": (4, 1),
    "metal": (1, 2), "fabric": (2, 2), "leather": (3, 2), "ceramic": (4, 2),
    "paper": (1, 3), "others": (2, 3),
}
TEXTURE_AMPS = {m: 0.8 + 0.04 * i for i, m in enumerate(MATERIALS)}

MATERIAL_COLORS = {
    "plastic": (220, 60, 60), "glass": (60, 220, 220), "wood": (150, 100, 40),
    "brick": (180, 70, 30), "metal": (160, 160, 180), "fabric": (200, 60, 200),
    "leather": (110, 60, 20), "ceramic": (230, 230, 210), "paper": (240, 240, 120),
    "others": (60, 220, 60),
}

ROUGH_AMP = {"rough": 0.45, "smooth": 0.06}
HARD_RISE = {"rigid": 0.15, "soft": 0.60}       # fraction of the trial to full force
HARD_SPREAD = {"rigid": 0.45, "soft": 0.90}     # contact window sigma, normalized coords


@dataclass
class ObjTacRecord:
    """One annotated tri-modal sample."""

    object_name: str
    material: str
    roughness: str
    hardness: str
    text: str
    video_ref: str
    tactile_ref: str
    duration_s: float

    def validate(self, lineno: Optional[int] = None) -> None:
        where = f"line {lineno}: " if lineno is not None else ""
        if self.material not in MATERIALS:
            raise ValidationError(f"{where}unknown material {self.material!r}")
        if self.roughness not in ROUGHNESS:
            raise ValidationError(f"{where}unknown roughness {self.roughness!r}")
        if self.hardness not in HARDNESS:
            raise ValidationError(f"{where}unknown hardness {self.hardness!r}")
        if not self.object_name:
            raise ValidationError(f"{where}empty object_name")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, separators=(",", ":"), sort_keys=True)


def load_manifest(path) -> list[ObjTacRecord]:
    """Read and validate a JSONL manifest; errors carry the line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"line {lineno}: invalid JSON: {e}") from e
            try:
                rec = ObjTacRecord(
                    object_name=raw["object_name"], material=raw["material"],
                    roughness=raw["roughness"], hardness=raw["hardness"],
                    text=raw["text"], video_ref=raw["video_ref"],
                    tactile_ref=raw["tactile_ref"], duration_s=float(raw["duration_s"]),
                )
            except KeyError as e:
                raise ValidationError(f"line {lineno}: missing field {e}") from e
            rec.validate(lineno)
            records.append(rec)
    return records


def write_manifest(path, records: Sequence[ObjTacRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic dataset shape and the label-to-signal mapping knobs."""

    materials: int = 10
    objects_per_material: int = 5
    samples_per_object: int = 6
    duration_s: float = 1.0
    force_hz: int = 60
    image_size: int = 24
    grid_h: int = 12
    grid_w: int = 9
    sensor_count: int = 2
    noise: float = 0.0
    base_pressure: float = 0.3
    force_scale: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.materials <= len(MATERIALS)):
            raise ValidationError(f"materials must be in [1, {len(MATERIALS)}], got {self.materials}")
        freqs = [TEXTURE_FREQS[m] for m in MATERIALS[: self.materials]]
        if len(set(freqs)) != len(freqs):
            raise ValidationError("texture frequencies must be distinct per material")

    @property
    def layout(self) -> SensorLayout:
        return SensorLayout(sensor_count=self.sensor_count, grid_h=self.grid_h,
                            grid_w=self.grid_w, stitch_order=tuple(range(self.sensor_count)))


@dataclass
class SynthSample:
    record: ObjTacRecord
    image: np.ndarray                      # (image_size, image_size, 3) uint8
    force: list[list[ForceFrame]]          # per sensor, per time step
    material_id: int
    roughness_id: int
    hardness_id: int


@dataclass
class SynthDataset:
    config: SynthConfig
    samples: list[SynthSample]

    def label_histogram(self) -> dict[str, int]:
        hist: dict[str, int] = {}
        for s in self.samples:
            hist[s.record.material] = hist.get(s.record.material, 0) + 1
        return hist


def texture_field(material: str, roughness: str, hardness: str, grid_h: int, grid_w: int,
                  phase: float, center: tuple[float, float], sensor_phase: float = 0.0,
                  mirror: bool = False) -> np.ndarray:
    """Per-taxel 3-axis force pattern in [arbitrary units], before the ramp."""
    fy, fx = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    cx, cy = TEXTURE_FREQS[material]
    amp = TEXTURE_AMPS[material]
    sign = -1.0 if mirror else 1.0
    arg = 2.0 * np.pi * (sign * cx * fx / grid_w + cy * fy / grid_h) + phase + sensor_phase
    checker = ((-1.0) ** (fx + fy))
    rough = ROUGH_AMP[roughness]
    ny = (fy / max(grid_h - 1, 1)) * 2.0 - 1.0
    nx = (fx / max(grid_w - 1, 1)) * 2.0 - 1.0
    sigma = HARD_SPREAD[hardness]
    window = np.exp(-(((nx - center[0]) ** 2) + ((ny - center[1]) ** 2)) / (2.0 * sigma ** 2))
    base = amp * np.sin(arg) + rough * checker
    out = np.empty((grid_h, grid_w, 3))
    out[..., 0] = 0.5 * window * (amp * np.sin(arg + np.pi / 2) + rough * checker)
    out[..., 1] = 0.3 * window * (amp * np.sin(arg + np.pi / 3) - rough * checker)
    out[..., 2] = window * base
    return out


def render_object_image(size: int, material: str, shape_kind: int,
                        rng: SeededRng) -> np.ndarray:
    """Procedural raster: silhouette at a jittered position, color by material."""
    img = np.zeros((size, size, 3), dtype=np.float64)
    img[..., 0] = 30
    img[..., 1] = 30
    img[..., 2] = 40
    color = np.array(MATERIAL_COLORS[material], dtype=np.float64)
    cx = size / 2 + float(rng.uniform((), -size / 6, size / 6))
    cy = size / 2 + float(rng.uniform((), -size / 6, size / 6))
    r = size * 0.22
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if shape_kind % 3 == 0:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif shape_kind % 3 == 1:
        mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    else:
        mask = (np.abs(xx - cx) + np.abs(yy - cy)) <= 1.3 * r
    img[mask] = color
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic_objtac(cfg: SynthConfig) -> SynthDataset:
    """Emit labeled (text, image, force stream) triplets, deterministically."""
    root = SeededRng(cfg.seed, "objtac")
    n_frames = max(2, int(round(cfg.duration_s * cfg.force_hz)))
    period_us = round(1e6 / cfg.force_hz)
    samples: list[SynthSample] = []
    for mi, material in enumerate(MATERIALS[: cfg.materials]):
        for oi in range(cfg.objects_per_material):
            obj_rng = root.child(f"{material}/{oi}")
            roughness = ROUGHNESS[int(obj_rng.integers(0, 2))]
            hardness = HARDNESS[int(obj_rng.integers(0, 2))]
            name = f"{material}-{oi:02d}"
            text = f"a {roughness} {hardness} {material} object called {name}"
            for si in range(cfg.samples_per_object):
                s_rng = obj_rng.child(f"sample/{si}")
                phase = float(s_rng.uniform((), 0, 2 * np.pi))
                center = (float(s_rng.uniform((), -0.45, 0.45)),
                          float(s_rng.uniform((), -0.45, 0.45)))
                mirror = bool(s_rng.integers(0, 2))
                rise = HARD_RISE[hardness]
                t = np.arange(n_frames) / n_frames
                ramp = np.minimum(1.0, t / rise)
                noise_rng = s_rng.child("noise")
                force: list[list[ForceFrame]] = []
                for sensor in range(cfg.sensor_count):
                    pattern = texture_field(material, roughness, hardness,
                                            cfg.grid_h, cfg.grid_w, phase, center,
                                            sensor_phase=sensor * np.pi / 4, mirror=mirror)
                    frames = []
                    for k in range(n_frames):
                        f = cfg.force_scale * ramp[k] * (cfg.base_pressure + pattern)
                        if cfg.noise > 0:
                            f = f + noise_rng.normal((cfg.grid_h, cfg.grid_w, 3),
                                                     std=cfg.noise, dtype=np.float64)
                        frames.append(ForceFrame(sensor, k * period_us, f))
                    force.append(frames)
                image = render_object_image(cfg.image_size, material,
                                            shape_kind=oi, rng=s_rng.child("img"))
                rec = ObjTacRecord(
                    object_name=name, material=material, roughness=roughness,
                    hardness=hardness, text=text,
                    video_ref=f"media/{material}_{oi:02d}_{si:02d}.img.blob",
                    tactile_ref=f"media/{material}_{oi:02d}_{si:02d}.force.jsonl",
                    duration_s=cfg.duration_s,
                )
                samples.append(SynthSample(rec, image, force, mi,
                                           ROUGHNESS.index(roughness), HARDNESS.index(hardness)))
    return SynthDataset(cfg, samples)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    """One teleoperation-style trajectory at a fixed step period."""

    instruction: str
    success: bool
    period_us: int
    timestamps_us: np.ndarray   # (T,) int64
    third: np.ndarray           # (T, h, w, 3) uint8
    wrist: np.ndarray           # (T, h, w, 3) uint8
    tactile: np.ndarray         # (T, th, tw, 3) uint8
    states: np.ndarray          # (T, D) float32
    actions: np.ndarray         # (T, D) float32
    object_name: str = ""
    material: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timestamps_us)

    def validate(self) -> None:
        if not self.instruction:
            raise ValidationError("episode instruction must be nonempty")
        n = len(self.timestamps_us)
        for name in ("third", "wrist", "tactile", "states", "actions"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ShapeError(f"episode stream {name} has length {len(arr)}, expected {n}")
        if n >= 2:
            deltas = np.diff(self.timestamps_us)
            if not np.all(deltas == self.period_us):
                raise ValidationError("episode timestamps must tick at exactly the step period")


EPISODE_MAGIC = b"VTEP"
EPISODE_VERSION = 1
_DTYPES = {0: np.uint8, 1: np.float32, 2: np.int64}
_DTYPE_CODES = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


def write_stream_blob(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<H", EPISODE_VERSION))
        fh.write(struct.pack("<BB", code, arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes())


def read_stream_blob(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != EPISODE_MAGIC:
        raise ValidationError(f"{path}: bad stream magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != EPISODE_VERSION:
        raise ValidationError(f"{path}: unsupported stream version {version}")
    code, ndim = struct.unpack_from("<BB", data, 6)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    return np.frombuffer(data, dtype=_DTYPES[code], offset=offset).reshape(shape).copy()


_EPISODE_STREAMS = ("timestamps_us", "third", "wrist", "tactile", "states", "actions")


def write_episode(dirpath, ep: Episode) -> None:
    ep.validate()
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "instruction": ep.instruction,
        "success": ep.success,
        "period_us": ep.period_us,
        "object_name": ep.object_name,
        "material": ep.material,
        "length": len(ep),
        "meta": ep.meta,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    for name in _EPISODE_STREAMS:
        write_stream_blob(d / f"{name}.bin", getattr(ep, name))


def read_episode(dirpath) -> Episode:
    d = Path(dirpath)
    meta = json.loads((d / "meta.json").read_text())
    streams = {name: read_stream_blob(d / f"{name}.bin") for name in _EPISODE_STREAMS}
    ep = Episode(
        instruction=meta["instruction"], success=meta["success"],
        period_us=meta["period_us"], object_name=meta.get("object_name", ""),
        material=meta.get("material", ""), meta=meta.get("meta", {}), **streams,
    )
    ep.validate()
    return ep


def dir_hash(dirpath) -> str:
    """Stable content hash over all files under a directory."""
    d = Path(dirpath)
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(d).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]
