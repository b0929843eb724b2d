"""Physics-derived input channels and the per-stage model input stack."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grid import FeatureStack, GridError
from .scene_io import Scene

log = logging.getLogger(__name__)

PHYSICAL_CHANNELS = ("reflectance_db", "transmittance_db_per_m", "distance", "fspl",
                     "transmission_ray", "antenna_gain")

# (offset, scale): the model sees (value - offset) / scale; distance enters as log10(metres)
CHANNEL_STANDARDIZATION = {
    "reflectance_db": (0.0, 20.0),
    "transmittance_db_per_m": (0.0, 50.0),
    "distance": (0.0, 1.0),
    "fspl": (60.0, 20.0),
    "transmission_ray": (0.0, 50.0),
    "antenna_gain": (0.0, 20.0),
}

COARSE_CHANNEL = "coarse_pred"


@dataclass
class FeatureConfig:
    n_pos_bands: int = 4
    n_freq_bands: int = 4
    d_min_m: float = 0.25
    f_lo_mhz: float = 400.0
    f_hi_mhz: float = 6000.0
    include: dict = field(default_factory=dict)  # channel or "pos_embedding"/"freq_embedding" -> bool

    def __post_init__(self):
        if self.n_pos_bands < 1 or self.n_freq_bands < 0:
            raise ValueError("n_pos_bands must be >= 1 and n_freq_bands >= 0")
        if not self.d_min_m > 0:
            raise ValueError("d_min_m must be positive")
        if not 0 < self.f_lo_mhz < self.f_hi_mhz:
            raise ValueError("frequency band edges must satisfy 0 < f_lo < f_hi")

    def enabled(self, name: str) -> bool:
        return bool(self.include.get(name, True))


@dataclass(frozen=True)
class CellCrossing:
    row: int
    col: int
    chord_m: float


def _pixel_offsets(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    h, w = scene.shape
    dr = (np.arange(h, dtype=np.float64) + 0.5)[:, None] - scene.tx_row
    dc = (np.arange(w, dtype=np.float64) + 0.5)[None, :] - scene.tx_col
    return np.broadcast_to(dr, (h, w)), np.broadcast_to(dc, (h, w))


def distance_channel(scene: Scene, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Metres from each pixel centre to the transmitter, clamped below at ``d_min_m``."""
    cfg = cfg or FeatureConfig()
    dr, dc = _pixel_offsets(scene)
    return np.maximum(np.hypot(dr, dc) * scene.cell_size_m, cfg.d_min_m)


def fspl_from_distance(distance_m, frequency_mhz: float) -> np.ndarray:
    return 20.0 * np.log10(4.0 * np.pi * distance_m * (frequency_mhz * 1e6) / kernels.SPEED_OF_LIGHT)


def fspl_channel(scene: Scene, cfg: FeatureConfig | None = None) -> np.ndarray:
    return fspl_from_distance(distance_channel(scene, cfg), scene.frequency_mhz)


def traverse_cells(p0, p1, cell_size_m: float, shape: tuple[int, int] | None = None) -> list[CellCrossing]:
    """Cells crossed by the segment p0 -> p1 (fractional cell coordinates), in order.

    ``shape`` bounds the walk; by default it is just large enough to hold both points.
    """
    (r0, c0), (r1, c1) = p0, p1
    if shape is None:
        shape = (int(math.floor(max(r0, r1))) + 1, int(math.floor(max(c0, c1))) + 1)
    h, w = shape
    if min(r0, r1, c0, c1) < 0 or max(r0, r1) > h or max(c0, c1) > w:
        raise GridError(f"segment {p0} -> {p1} leaves the {h}x{w} grid")
    cap = 2 * (h + w) + 4
    rows = np.empty(cap, np.int64)
    cols = np.empty(cap, np.int64)
    ts = np.empty(cap)
    n = kernels.traverse_segment(float(r0), float(c0), float(r1), float(c1), h, w, rows, cols, ts)
    length_m = math.hypot(r1 - r0, c1 - c0) * cell_size_m
    out = []
    t_prev = 0.0
    for k in range(n):
        out.append(CellCrossing(int(rows[k]), int(cols[k]), (ts[k] - t_prev) * length_m))
        t_prev = ts[k]
    return out


def transmission_ray_channel(scene: Scene) -> np.ndarray:
    """Accumulated wall loss (dB) along the straight transmitter -> pixel-centre segment."""
    return kernels.transmission_map(np.ascontiguousarray(scene.transmittance_db_per_m),
                                    float(scene.tx_row), float(scene.tx_col), float(scene.cell_size_m))


def azimuth_deg(scene: Scene) -> np.ndarray:
    dr, dc = _pixel_offsets(scene)
    return np.degrees(np.arctan2(-dr, dc))


def antenna_gain_channel(scene: Scene) -> np.ndarray:
    gains = scene.antenna.gains_db
    a = np.mod(azimuth_deg(scene) - scene.orientation_deg, 360.0)
    i0 = np.floor(a).astype(np.int64)
    frac = a - i0
    i0 %= 360
    out = gains[i0] * (1.0 - frac) + gains[(i0 + 1) % 360] * frac
    h, w = scene.shape
    out[min(int(scene.tx_row), h - 1), min(int(scene.tx_col), w - 1)] = gains[0]
    return out


def frequency_phase(frequency_mhz: float, cfg: FeatureConfig) -> float:
    phi = math.log10(frequency_mhz / cfg.f_lo_mhz) / math.log10(cfg.f_hi_mhz / cfg.f_lo_mhz)
    if not 0.0 <= phi <= 1.0:
        log.warning("frequency %.1f MHz outside [%.1f, %.1f]; embedding clamped",
                    frequency_mhz, cfg.f_lo_mhz, cfg.f_hi_mhz)
        phi = min(max(phi, 0.0), 1.0)
    return phi


def positional_embedding(h: int, w: int, cfg: FeatureConfig) -> FeatureStack:
    u = np.arange(w, dtype=np.float64) / max(w - 1, 1)
    v = np.arange(h, dtype=np.float64) / max(h - 1, 1)
    grids, names = [], []
    for k in range(cfg.n_pos_bands):
        fu = (2.0 ** k) * np.pi * u
        fv = (2.0 ** k) * np.pi * v
        for label, vals in (("sin_u", np.sin(fu)[None, :]), ("cos_u", np.cos(fu)[None, :]),
                            ("sin_v", np.sin(fv)[:, None]), ("cos_v", np.cos(fv)[:, None])):
            grids.append(np.broadcast_to(vals, (h, w)))
            names.append(f"pos_{label}_{k}")
    return FeatureStack.from_grids(grids, names)


def frequency_embedding(h: int, w: int, frequency_mhz: float, cfg: FeatureConfig) -> FeatureStack | None:
    if cfg.n_freq_bands == 0:
        return None
    phi = frequency_phase(frequency_mhz, cfg)
    grids, names = [], []
    for k in range(cfg.n_freq_bands):
        arg = (2.0 ** k) * np.pi * phi
        grids += [np.full((h, w), math.sin(arg)), np.full((h, w), math.cos(arg))]
        names += [f"freq_sin_{k}", f"freq_cos_{k}"]
    return FeatureStack.from_grids(grids, names)


def spatial_frequency_embedding(scene: Scene, cfg: FeatureConfig) -> FeatureStack:
    h, w = scene.shape
    pos = positional_embedding(h, w, cfg)
    freq = frequency_embedding(h, w, scene.frequency_mhz, cfg)
    if freq is None:
        return pos
    return FeatureStack(np.concatenate([pos.data, freq.data]), pos.channel_names + freq.channel_names)


def physical_channels(scene: Scene, cfg: FeatureConfig) -> dict[str, np.ndarray]:
    """Raw (unstandardized) physical channels keyed by name."""
    dist = distance_channel(scene, cfg)
    return {
        "reflectance_db": scene.reflectance_db,
        "transmittance_db_per_m": scene.transmittance_db_per_m,
        "distance": dist,
        "fspl": fspl_from_distance(dist, scene.frequency_mhz),
        "transmission_ray": transmission_ray_channel(scene),
        "antenna_gain": antenna_gain_channel(scene),
    }


def assemble_features(scene: Scene, cfg: FeatureConfig | None = None,
                      coarse_pred: np.ndarray | None = None) -> FeatureStack:
    """Model input stack: standardized physical channels, embeddings, then ``coarse_pred``."""
    cfg = cfg or FeatureConfig()
    raw = physical_channels(scene, cfg)
    grids, names = [], []
    for name in PHYSICAL_CHANNELS:
        if not cfg.enabled(name):
            continue
        value = np.log10(raw[name]) if name == "distance" else raw[name]
        offset, scale = CHANNEL_STANDARDIZATION[name]
        grids.append((value - offset) / scale)
        names.append(name)
    h, w = scene.shape
    if cfg.enabled("pos_embedding"):
        pos = positional_embedding(h, w, cfg)
        grids += list(pos.data)
        names += pos.channel_names
    if cfg.enabled("freq_embedding"):
        freq = frequency_embedding(h, w, scene.frequency_mhz, cfg)
        if freq is not None:
            grids += list(freq.data)
            names += freq.channel_names
    if coarse_pred is not None:
        coarse_pred = np.asarray(coarse_pred, dtype=np.float64)
        if coarse_pred.shape != (h, w):
            raise GridError(f"coarse prediction {coarse_pred.shape} does not match scene {(h, w)}")
        if coarse_pred.min() < 0.0 or coarse_pred.max() > 1.0:
            raise GridError("coarse prediction must be normalized to [0, 1]")
        grids.append(coarse_pred)
        names.append(COARSE_CHANNEL)
    return FeatureStack.from_grids(grids, names)


def feature_channel_count(cfg: FeatureConfig, fine: bool = False) -> int:
    n = sum(cfg.enabled(c) for c in PHYSICAL_CHANNELS)
    if cfg.enabled("pos_embedding"):
        n += 4 * cfg.n_pos_bands
    if cfg.enabled("freq_embedding"):
        n += 2 * cfg.n_freq_bands
    return n + int(fine)


def is_positional(name: str) -> bool:
    return name.startswith("pos_")
