"""Synthetic indoor scenes and ray-traced ground truth.

Scenes are axis-aligned floor plans cut by recursive splits, each internal
wall carrying one door gap. Ground truth comes from ``kernels.trace_kernel``:
aimed direct rays for every pixel plus uniformly launched rays whose
specular branches are collected by capture discs.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .grid import NormalizationSpec
from .scene_io import (AntennaPattern, DatasetManifest, Scene, SceneEntry, save_manifest,
                       save_scene, write_pathloss)

log = logging.getLogger(__name__)


@dataclass
class TraceConfig:
    rays_per_tx: int = 1440
    max_bounces: int = 2
    rx_capture_radius_m: float = 0.25
    min_power_db: float = 250.0
    d_min_m: float = 0.25
    launch_offset: float = 0.5  # fraction of the angular step before the first ray
    stack_size: int = 4096

    def __post_init__(self):
        if self.rays_per_tx < 1 or self.max_bounces < 0 or not self.rx_capture_radius_m > 0:
            raise ValueError("need rays_per_tx >= 1, max_bounces >= 0, rx_capture_radius_m > 0")
        if not 0.0 <= self.launch_offset < 1.0:
            raise ValueError("launch_offset must lie in [0, 1)")


def _beam(width_deg: float, floor_db: float, lobes=(0.0,)) -> np.ndarray:
    az = np.arange(360, dtype=np.float64)
    gain = np.full(360, -floor_db)
    for centre in lobes:
        off = np.abs((az - centre + 180.0) % 360.0 - 180.0)
        gain = np.maximum(gain, -np.minimum(12.0 * (off / width_deg) ** 2, floor_db))
    return np.round(gain * 4.0) / 4.0


def antenna_pool() -> list[AntennaPattern]:
    """The built-in pattern pool; boresight gain is 0 dB for every entry."""
    return [
        AntennaPattern.isotropic(),
        AntennaPattern(_beam(90.0, 20.0), "sector90"),
        AntennaPattern(_beam(60.0, 25.0), "sector60"),
        AntennaPattern(_beam(70.0, 20.0, lobes=(0.0, 180.0)), "bidirectional70"),
        AntennaPattern(_beam(35.0, 30.0), "narrow35"),
    ]


@dataclass
class GeneratorParams:
    grid_size: int = 64
    cell_size_m: float = 0.25
    rooms: tuple = (3, 7)
    min_room_cells: int = 10
    wall_thickness_cells: tuple = (1, 2)
    door_width_cells: tuple = (3, 6)
    wall_transmittance_db_per_m: tuple = (10.0, 40.0)
    wall_reflectance_db: tuple = (3.0, 12.0)
    frequency_pool_mhz: tuple = (868.0, 1800.0, 2400.0, 3500.0, 5000.0)
    heldout_frequencies_mhz: tuple = (3500.0,)
    antenna_names: tuple = ("isotropic", "sector90", "sector60", "bidirectional70", "narrow35")
    heldout_antennas: tuple = ("sector60",)
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 8 or not self.cell_size_m > 0 or self.min_room_cells < 1:
            raise ValueError("need grid_size >= 8, cell_size_m > 0 and min_room_cells >= 1")
        for name in ("rooms", "wall_thickness_cells", "door_width_cells",
                     "wall_transmittance_db_per_m", "wall_reflectance_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        if not self.frequency_pool_mhz or not self.antenna_names:
            raise ValueError("frequency and antenna pools must be non-empty")
        known = {p.name for p in antenna_pool()}
        unknown = set(self.antenna_names) - known
        if unknown:
            raise ValueError(f"unknown antenna pattern(s): {sorted(unknown)}")
        self.frequency_pool_mhz = tuple(float(f) for f in self.frequency_pool_mhz)
        self.heldout_frequencies_mhz = tuple(float(f) for f in self.heldout_frequencies_mhz)
        self.antenna_names = tuple(self.antenna_names)
        self.heldout_antennas = tuple(self.heldout_antennas)

    def seen_frequencies(self) -> tuple:
        return tuple(f for f in self.frequency_pool_mhz if f not in self.heldout_frequencies_mhz)

    def seen_antennas(self) -> tuple:
        return tuple(a for a in self.antenna_names if a not in self.heldout_antennas)


def _quantize(value: float, step: float = 0.5) -> float:
    # float32-exact, so scene files round-trip bit for bit
    return float(np.float32(round(value / step) * step))


def _split_rooms(rng, size, params):
    """Recursive splits of the interior; returns wall rectangles with door gaps."""
    t_lo, t_hi = params.wall_thickness_cells
    rooms = [(0, 0, size, size)]  # r0, c0, r1, c1 (exclusive), including the outer shell
    walls = []
    target = int(rng.integers(params.rooms[0], params.rooms[1] + 1))
    attempts = 0
    while len(rooms) < target and attempts < 50:
        attempts += 1
        rooms.sort(key=lambda r: -((r[2] - r[0]) * (r[3] - r[1])))
        r0, c0, r1, c1 = rooms[0]
        thick = int(rng.integers(t_lo, t_hi + 1))
        vertical = (c1 - c0) >= (r1 - r0) if rng.random() < 0.8 else rng.random() < 0.5
        span_lo, span_hi = (c0, c1) if vertical else (r0, r1)
        lo = span_lo + params.min_room_cells
        hi = span_hi - params.min_room_cells - thick
        if hi <= lo:
            continue
        pos = int(rng.integers(lo, hi + 1))
        other_lo, other_hi = (r0, r1) if vertical else (c0, c1)
        door = int(rng.integers(params.door_width_cells[0], params.door_width_cells[1] + 1))
        door = min(door, other_hi - other_lo - 2)
        door_at = int(rng.integers(other_lo + 1, other_hi - door)) if door > 0 else other_lo
        walls.append((vertical, pos, thick, other_lo, other_hi, door_at, door))
        rooms.pop(0)
        if vertical:
            rooms += [(r0, c0, r1, pos), (r0, pos + thick, r1, c1)]
        else:
            rooms += [(r0, c0, pos, c1), (pos + thick, c0, r1, c1)]
    return walls


def generate_scene(params: GeneratorParams, seed: int, frequencies=None, antennas=None) -> Scene:
    """Deterministic scene for ``(params, seed)``.

    ``frequencies``/``antennas`` restrict the pools (used for the held-out splits).
    """
    rng = np.random.default_rng([params.seed, seed])
    n = params.grid_size
    trans = np.zeros((n, n))
    refl = np.zeros((n, n))

    def material():
        return (_quantize(rng.uniform(*params.wall_transmittance_db_per_m)),
                _quantize(rng.uniform(*params.wall_reflectance_db)))

    shell = int(rng.integers(params.wall_thickness_cells[0], params.wall_thickness_cells[1] + 1))
    t, r = material()
    ring = np.ones((n, n), bool)
    ring[shell:n - shell, shell:n - shell] = False
    trans[ring], refl[ring] = t, r

    for vertical, pos, thick, lo, hi, door_at, door in _split_rooms(rng, n, params):
        t, r = material()
        mask = np.zeros((n, n), bool)
        if vertical:
            mask[lo:hi, pos:pos + thick] = True
            mask[door_at:door_at + door, pos:pos + thick] = False
        else:
            mask[pos:pos + thick, lo:hi] = True
            mask[pos:pos + thick, door_at:door_at + door] = False
        trans[mask], refl[mask] = t, r

    # transmitter at the centre of a free cell away from walls, bounded retries
    solid = (trans > 0) | (refl > 0)
    padded = np.pad(solid, 1, constant_values=True)
    near = np.zeros_like(solid)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            near |= padded[1 + dr:1 + dr + n, 1 + dc:1 + dc + n]
    free = np.argwhere(~near)
    if len(free) == 0:
        free = np.argwhere(~solid)
    if len(free) == 0:
        free = np.array([[n // 2, n // 2]])
    tr, tc = free[int(rng.integers(len(free)))]

    freqs = tuple(frequencies) if frequencies is not None else params.seen_frequencies()
    names = tuple(antennas) if antennas is not None else params.seen_antennas()
    pool = {p.name: p for p in antenna_pool()}
    return Scene(
        reflectance_db=refl,
        transmittance_db_per_m=trans,
        cell_size_m=params.cell_size_m,
        tx_row=float(tr) + 0.5,
        tx_col=float(tc) + 0.5,
        frequency_mhz=float(freqs[int(rng.integers(len(freqs)))]),
        antenna=pool[names[int(rng.integers(len(names)))]],
        orientation_deg=float(rng.integers(0, 360)),
    )


def combine_path_powers(path_losses) -> float:
    """Incoherent power sum of path losses, returned as a loss in dB."""
    pl = np.asarray(path_losses, dtype=np.float64)
    if pl.size == 0:
        raise ValueError("need at least one path loss")
    # factor out the strongest path so deep losses do not underflow
    best = pl.min()
    return float(best - 10.0 * np.log10(np.sum(10.0 ** (-(pl - best) / 10.0))))


def trace_pathloss(scene: Scene, cfg: TraceConfig | None = None) -> np.ndarray:
    cfg = cfg or TraceConfig()
    return kernels.trace_kernel(
        np.ascontiguousarray(scene.reflectance_db), np.ascontiguousarray(scene.transmittance_db_per_m),
        float(scene.cell_size_m), float(scene.tx_row), float(scene.tx_col), float(scene.frequency_mhz),
        np.ascontiguousarray(scene.antenna.gains_db), float(scene.orientation_deg),
        int(cfg.rays_per_tx), int(cfg.max_bounces), float(cfg.rx_capture_radius_m),
        float(cfg.min_power_db), float(cfg.d_min_m), float(cfg.launch_offset), int(cfg.stack_size))


@dataclass
class SplitCounts:
    train: int = 200
    val: int = 40
    test_per_task: int = 20


def _scene_plan(params: GeneratorParams, counts: SplitCounts):
    seen_f, seen_a = params.seen_frequencies(), params.seen_antennas()
    if not seen_f or not params.heldout_frequencies_mhz:
        raise ValueError("frequency pool too small to hold out a test frequency")
    if not seen_a or not params.heldout_antennas:
        raise ValueError("antenna pool too small to hold out a test pattern")
    plan = [("train", None, seen_f, seen_a)] * counts.train
    plan += [("val", None, seen_f, seen_a)] * counts.val
    plan += [("test", 1, seen_f, seen_a)] * counts.test_per_task
    plan += [("test", 2, params.heldout_frequencies_mhz, seen_a)] * counts.test_per_task
    plan += [("test", 3, seen_f, params.heldout_antennas)] * counts.test_per_task
    return plan


def build_dataset(params: GeneratorParams, counts: SplitCounts, out_dir, trace_cfg: TraceConfig | None = None,
                  normalization: NormalizationSpec | None = None, threads: int = 1) -> DatasetManifest:
    """Generate, trace and persist every scene; writes ``manifest.json`` into ``out_dir``."""
    trace_cfg = trace_cfg or TraceConfig()
    normalization = normalization or NormalizationSpec()
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    (out_dir / "targets").mkdir(parents=True, exist_ok=True)
    plan = _scene_plan(params, counts)
    tally: dict = {}
    entries, jobs = [], []
    for index, (split, task, freqs, ants) in enumerate(plan):
        key = split if task is None else f"test{task}"
        k = tally.get(key, 0)
        tally[key] = k + 1
        stem = f"{key}_{k:04d}"
        entries.append(SceneEntry(f"scenes/{stem}.scene.json", f"targets/{stem}.pathloss.rmt", split, task))
        jobs.append((index, freqs, ants, stem))

    def run(job):
        index, freqs, ants, stem = job
        scene = generate_scene(params, index, freqs, ants)
        save_scene(scene, out_dir / "scenes" / f"{stem}.scene.json")
        write_pathloss(trace_pathloss(scene, trace_cfg), out_dir / "targets" / f"{stem}.pathloss.rmt")
        return stem

    # scenes are independent and written to distinct paths; results identical for any thread count
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    manifest = DatasetManifest(entries, normalization, params.seed, root=out_dir,
                               extra={"generator": _jsonable(asdict(params)),
                                      "trace": _jsonable(asdict(trace_cfg))})
    save_manifest(manifest, out_dir / "manifest.json")
    log.info("wrote %d scenes to %s", len(entries), out_dir)
    return manifest


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def physics_baseline(scene: Scene, d_min_m: float = 0.25) -> np.ndarray:
    """Free-space loss plus direct-ray wall loss, used as a no-learning prediction."""
    from .features import FeatureConfig, fspl_channel, transmission_ray_channel

    return fspl_channel(scene, FeatureConfig(d_min_m=d_min_m)) + transmission_ray_channel(scene)


def pathloss_floor(scene: Scene, cfg: TraceConfig) -> np.ndarray:
    """Lowest pathloss the tracer can report: free space minus the ray-count bound."""
    from .features import FeatureConfig, fspl_channel

    return fspl_channel(scene, FeatureConfig(d_min_m=cfg.d_min_m)) - 10.0 * math.log10(cfg.rays_per_tx)
