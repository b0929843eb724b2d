"""Scenes, dataset manifests and the on-disk formats.

Formats (all deterministic: identical content gives identical bytes):

* ``.rmt`` tensor container: ``b"RMT1"``, then ``<u32 channels, height, width>``,
  then per channel a ``<u32 byte length>`` followed by the UTF-8 name, then
  row-major little-endian float32 values, channel after channel.
* ``.scene.json`` manifest: sorted-key JSON pointing at an ``.rmt`` file with the
  ``reflectance_db`` and ``transmittance_db_per_m`` channels.
* ``manifest.json`` dataset manifest listing scenes, targets, splits and tasks.
* Heatmaps: binary PPM (P6), 8 bits per channel, fixed 256-entry colormap.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import FeatureStack, GridError, NormalizationSpec, as_grid

MAGIC = b"RMT1"
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
# guards against absurd headers before any allocation happens
MAX_ELEMENTS = 1 << 31

SCENE_FORMAT = "radiomap-scene/1"
DATASET_FORMAT = "radiomap-dataset/1"


class FormatError(ValueError):
    """A file does not follow its documented layout."""


class SceneError(ValueError):
    """A scene violates one of its invariants."""


# ---------------------------------------------------------------------------
# Tensor container

def encode_tensor(stack: FeatureStack) -> bytes:
    data = np.ascontiguousarray(stack.data, dtype="<f4")
    c, h, w = data.shape
    parts = [_HEADER.pack(MAGIC, c, h, w)]
    for name in stack.channel_names:
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
    parts.append(data.tobytes())
    return b"".join(parts)


def decode_tensor(buf: bytes) -> FeatureStack:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, c, h, w = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if c < 1 or c * h * w > MAX_ELEMENTS:
        raise FormatError(f"implausible tensor dimensions {c}x{h}x{w}")
    offset = _HEADER.size
    names = []
    for _ in range(c):
        if offset + _U32.size > len(buf):
            raise FormatError("truncated channel-name table")
        (n,) = _U32.unpack_from(buf, offset)
        offset += _U32.size
        if offset + n > len(buf):
            raise FormatError("truncated channel name")
        try:
            names.append(buf[offset:offset + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"channel name is not UTF-8: {exc}") from None
        offset += n
    expected = 4 * c * h * w
    if len(buf) - offset != expected:
        raise FormatError(f"payload holds {len(buf) - offset} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=offset).reshape(c, h, w)
    try:
        return FeatureStack(data.astype(np.float32), names)
    except GridError as exc:
        raise FormatError(str(exc)) from None


def write_tensor(stack: FeatureStack, path) -> None:
    Path(path).write_bytes(encode_tensor(stack))


def read_tensor(path) -> FeatureStack:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Scenes

@dataclass
class AntennaPattern:
    """Gain in dB at each integer degree of azimuth relative to boresight."""

    gains_db: np.ndarray
    name: str = "pattern"

    def __post_init__(self):
        self.gains_db = np.asarray(self.gains_db, dtype=np.float64)
        if self.gains_db.shape != (360,):
            raise SceneError(f"antenna pattern needs 360 entries, got {self.gains_db.size}")
        if not np.all(np.isfinite(self.gains_db)):
            raise SceneError("antenna pattern contains non-finite gains")

    @classmethod
    def isotropic(cls) -> "AntennaPattern":
        return cls(np.zeros(360), "isotropic")

    def mirrored(self) -> "AntennaPattern":
        """Pattern seen in a mirror: gain at +a becomes gain at -a."""
        return AntennaPattern(self.gains_db[(-np.arange(360)) % 360], self.name + "~")


@dataclass
class Scene:
    reflectance_db: np.ndarray          # loss per specular bounce, dB
    transmittance_db_per_m: np.ndarray  # attenuation per metre of chord, dB/m
    cell_size_m: float
    tx_row: float                       # fractional cell coordinates
    tx_col: float
    frequency_mhz: float
    antenna: AntennaPattern = field(default_factory=AntennaPattern.isotropic)
    orientation_deg: float = 0.0

    def __post_init__(self):
        try:
            self.reflectance_db = as_grid(self.reflectance_db)
            self.transmittance_db_per_m = as_grid(self.transmittance_db_per_m)
        except GridError as exc:
            raise SceneError(str(exc)) from None
        self.validate()

    def validate(self) -> None:
        h, w = self.reflectance_db.shape
        if self.transmittance_db_per_m.shape != (h, w):
            raise SceneError("reflectance and transmittance grids differ in shape")
        if not self.cell_size_m > 0:
            raise SceneError("cell_size_m must be positive")
        if not self.frequency_mhz > 0:
            raise SceneError("frequency_mhz must be positive")
        if not (0.0 <= self.tx_row < h and 0.0 <= self.tx_col < w):
            raise SceneError(f"transmitter ({self.tx_row}, {self.tx_col}) outside {h}x{w} grid")
        if not math.isfinite(self.orientation_deg):
            raise SceneError("orientation_deg must be finite")
        if np.any(self.reflectance_db < 0) or np.any(self.transmittance_db_per_m < 0):
            raise SceneError("material losses must be non-negative")
        if not isinstance(self.antenna, AntennaPattern):
            raise SceneError("antenna must be an AntennaPattern")

    @property
    def shape(self) -> tuple[int, int]:
        return self.reflectance_db.shape


def save_scene(scene: Scene, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    name = manifest_path.name
    stem = name[:-len(".scene.json")] if name.endswith(".scene.json") else manifest_path.stem
    raster_name = stem + ".materials.rmt"
    write_tensor(FeatureStack(np.stack([scene.reflectance_db, scene.transmittance_db_per_m]),
                              ["reflectance_db", "transmittance_db_per_m"]),
                 manifest_path.with_name(raster_name))
    doc = {
        "format": SCENE_FORMAT,
        "materials_path": raster_name,
        "cell_size_m": float(scene.cell_size_m),
        "tx_row_cells": float(scene.tx_row),
        "tx_col_cells": float(scene.tx_col),
        "frequency_mhz": float(scene.frequency_mhz),
        "orientation_deg": float(scene.orientation_deg),
        "antenna_name": scene.antenna.name,
        "antenna_gains_db": [float(g) for g in scene.antenna.gains_db],
    }
    manifest_path.write_text(dump_json(doc))


_SCENE_FIELDS = ("materials_path", "cell_size_m", "tx_row_cells", "tx_col_cells",
                 "frequency_mhz", "orientation_deg", "antenna_gains_db")


def load_scene(manifest_path) -> Scene:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    missing = [k for k in _SCENE_FIELDS if k not in doc]
    if missing:
        raise SceneError(f"{manifest_path}: missing field(s) {', '.join(missing)}")
    # container precision is float32; scenes are written from float32-exact values
    materials = read_tensor(manifest_path.parent / doc["materials_path"])
    try:
        refl = materials.channel("reflectance_db")
        trans = materials.channel("transmittance_db_per_m")
    except ValueError:
        raise SceneError(f"{manifest_path}: material raster lacks required channels") from None
    return Scene(
        reflectance_db=refl.astype(np.float64),
        transmittance_db_per_m=trans.astype(np.float64),
        cell_size_m=float(doc["cell_size_m"]),
        tx_row=float(doc["tx_row_cells"]),
        tx_col=float(doc["tx_col_cells"]),
        frequency_mhz=float(doc["frequency_mhz"]),
        antenna=AntennaPattern(doc["antenna_gains_db"], doc.get("antenna_name", "pattern")),
        orientation_deg=float(doc["orientation_deg"]),
    )


def dump_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Dataset manifest

SPLITS = ("train", "val", "test")


@dataclass
class SceneEntry:
    scene: str          # path relative to the manifest directory
    target: str
    split: str
    task_id: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SceneError(f"unknown split {self.split!r}")
        if self.split == "test" and self.task_id not in (1, 2, 3):
            raise SceneError(f"test scene {self.scene} needs task_id in {{1, 2, 3}}")


@dataclass
class DatasetManifest:
    scenes: list[SceneEntry]
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    generator_seed: int = 0
    root: Path | None = None  # directory the manifest lives in; not serialized
    extra: dict = field(default_factory=dict)

    def entries(self, split: str, task_id: int | None = None) -> list[SceneEntry]:
        return [e for e in self.scenes
                if e.split == split and (task_id is None or e.task_id == task_id)]

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_json(self) -> str:
        return dump_json({
            "format": DATASET_FORMAT,
            "generator_seed": int(self.generator_seed),
            "normalization": {"lo_db": float(self.normalization.lo_db), "hi_db": float(self.normalization.hi_db)},
            "scenes": [{"scene": e.scene, "target": e.target, "split": e.split, "task_id": e.task_id}
                       for e in self.scenes],
            **({"extra": self.extra} if self.extra else {}),
        })


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json())


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
        norm = doc.get("normalization", {})
        return DatasetManifest(
            scenes=[SceneEntry(s["scene"], s["target"], s["split"], s.get("task_id"))
                    for s in doc["scenes"]],
            normalization=NormalizationSpec(float(norm.get("lo_db", 13.0)), float(norm.get("hi_db", 160.0))),
            generator_seed=int(doc.get("generator_seed", 0)),
            root=path.parent,
            extra=doc.get("extra", {}),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed dataset manifest ({exc})") from None


def write_pathloss(grid: np.ndarray, path, name: str = "pathloss_db") -> None:
    write_tensor(FeatureStack(np.asarray(grid)[None], [name]), path)


def read_pathloss(path) -> np.ndarray:
    return read_tensor(path).data[0].astype(np.float64)


# ---------------------------------------------------------------------------
# Heatmaps

def _build_colormap() -> np.ndarray:
    # piecewise-linear dark blue -> cyan -> yellow -> dark red, integer exact
    knots = [(0, (0, 0, 128)), (64, (0, 128, 255)), (128, (0, 255, 128)),
             (192, (255, 255, 0)), (255, (128, 0, 0))]
    table = np.zeros((256, 3), dtype=np.uint8)
    for (i0, c0), (i1, c1) in zip(knots, knots[1:]):
        for i in range(i0, i1 + 1):
            for ch in range(3):
                table[i, ch] = c0[ch] + ((c1[ch] - c0[ch]) * (i - i0)) // (i1 - i0)
    return table


COLORMAP = _build_colormap()


def heatmap_bytes(grid: np.ndarray, lo: float, hi: float) -> bytes:
    if not lo < hi:
        raise GridError(f"heatmap needs lo < hi, got ({lo}, {hi})")
    grid = np.asarray(grid, dtype=np.float64)
    idx = np.clip(np.floor((grid - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.intp)
    h, w = grid.shape
    return b"P6\n%d %d\n255\n" % (w, h) + COLORMAP[idx].tobytes()


def emit_heatmap(grid: np.ndarray, lo: float, hi: float, path) -> None:
    Path(path).write_bytes(heatmap_bytes(grid, lo, hi))


def transform_scene(scene: Scene, e) -> Scene:
    """Apply a D4 element to a square scene, moving the transmitter and antenna with it."""
    from .grid import d4_azimuth, d4_point, d4_transform

    h, w = scene.shape
    if h != w:
        raise SceneError("scene symmetries need a square grid")
    tx_row, tx_col = d4_point(scene.tx_row, scene.tx_col, h, e)
    antenna = scene.antenna.mirrored() if e.flip_horizontal else scene.antenna
    return Scene(
        reflectance_db=d4_transform(scene.reflectance_db, e),
        transmittance_db_per_m=d4_transform(scene.transmittance_db_per_m, e),
        cell_size_m=scene.cell_size_m,
        tx_row=tx_row,
        tx_col=tx_col,
        frequency_mhz=scene.frequency_mhz,
        antenna=antenna,
        orientation_deg=d4_azimuth(scene.orientation_deg, e),
    )
