"""Raster primitives: grids, feature stacks, D4 symmetries, resizing, normalization.

A grid is a 2D float64 ``numpy.ndarray`` indexed ``[row, col]``. Row 0 is the
top of the map, so "up" on screen is decreasing row index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class GridError(ValueError):
    """Raised for shape or value violations on rasters."""


def as_grid(values) -> np.ndarray:
    """Validate and convert ``values`` into a finite 2D float64 grid."""
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise GridError(f"grid must be a non-empty 2D array, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise GridError("grid contains non-finite values")
    return grid


@dataclass
class FeatureStack:
    """Ordered, named channels sharing one height and width."""

    data: np.ndarray  # (channels, height, width)
    channel_names: list[str]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise GridError(f"feature stack must be (C, H, W) with C >= 1, got {self.data.shape}")
        self.channel_names = list(self.channel_names)
        if len(self.channel_names) != self.data.shape[0]:
            raise GridError("one channel name per channel is required")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise GridError("channel names must be unique")

    @classmethod
    def from_grids(cls, grids: Sequence[np.ndarray], names: Sequence[str]) -> "FeatureStack":
        grids = [as_grid(g) for g in grids]
        if not grids:
            raise GridError("feature stack needs at least one channel")
        shape = grids[0].shape
        for g in grids:
            if g.shape != shape:
                raise GridError(f"channel shape {g.shape} differs from {shape}")
        return cls(np.stack(grids), list(names))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def __len__(self) -> int:
        return self.data.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channel_names.index(name)]

    def append(self, grid: np.ndarray, name: str) -> "FeatureStack":
        grid = as_grid(grid)
        if grid.shape != self.shape:
            raise GridError(f"cannot append {grid.shape} channel to {self.shape} stack")
        return FeatureStack(np.concatenate([self.data, grid[None].astype(self.data.dtype)]),
                            self.channel_names + [name])


# ---------------------------------------------------------------------------
# D4: counter-clockwise quarter turns, optional flip about the vertical axis.
# An element acts as: flip first (if set), then rotate.

@dataclass(frozen=True)
class D4Element:
    rotation_quarter_turns: int = 0
    flip_horizontal: bool = False

    def __post_init__(self):
        if self.rotation_quarter_turns not in (0, 1, 2, 3):
            raise GridError("rotation_quarter_turns must be in {0, 1, 2, 3}")
        object.__setattr__(self, "flip_horizontal", bool(self.flip_horizontal))

    @property
    def is_identity(self) -> bool:
        return self.rotation_quarter_turns == 0 and not self.flip_horizontal

    def __str__(self) -> str:
        return f"r{self.rotation_quarter_turns}{'f' if self.flip_horizontal else ''}"


IDENTITY = D4Element()


def d4_elements() -> list[D4Element]:
    """All eight symmetries of the square, identity first."""
    return [D4Element(k, f) for f in (False, True) for k in range(4)]


def d4_inverse(e: D4Element) -> D4Element:
    # R^k F is an involution; pure rotations invert to R^-k
    if e.flip_horizontal:
        return e
    return D4Element((-e.rotation_quarter_turns) % 4, False)


def d4_compose(a: D4Element, b: D4Element) -> D4Element:
    """Element equal to applying ``b`` first, then ``a``."""
    # F R^k = R^-k F
    if a.flip_horizontal:
        k = (a.rotation_quarter_turns - b.rotation_quarter_turns) % 4
    else:
        k = (a.rotation_quarter_turns + b.rotation_quarter_turns) % 4
    return D4Element(k, a.flip_horizontal != b.flip_horizontal)


def d4_transform(values: np.ndarray, e: D4Element) -> np.ndarray:
    """Apply ``e`` to the last two axes of ``values`` (a grid or a stack)."""
    values = np.asarray(values)
    if e.rotation_quarter_turns % 2 and values.shape[-1] != values.shape[-2]:
        raise GridError(f"odd quarter turns need a square grid, got {values.shape[-2:]}")
    out = values[..., ::-1] if e.flip_horizontal else values
    out = np.rot90(out, e.rotation_quarter_turns, axes=(-2, -1))
    return np.ascontiguousarray(out)


def d4_point(row: float, col: float, size: int, e: D4Element) -> tuple[float, float]:
    """Map a continuous (row, col) position through ``e`` on a ``size``-cell square.

    Cell ``(i, j)`` covers ``[i, i+1) x [j, j+1)``.
    """
    if e.flip_horizontal:
        col = size - col
    for _ in range(e.rotation_quarter_turns):
        row, col = size - col, row
    return row, col


def d4_azimuth(azimuth_deg: float, e: D4Element) -> float:
    """Map an azimuth (0 = +col, counter-clockwise positive) through ``e``."""
    if e.flip_horizontal:
        azimuth_deg = 180.0 - azimuth_deg
    return (azimuth_deg + 90.0 * e.rotation_quarter_turns) % 360.0


# ---------------------------------------------------------------------------
# Resizing

def _bilinear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners=False: pixel centres line up, edges clamp
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    grid = as_grid(grid)
    if out_h < 1 or out_w < 1:
        raise GridError(f"target size must be positive, got {out_h}x{out_w}")
    if grid.shape == (out_h, out_w):
        return grid.copy()
    r0, r1, fr = _bilinear_taps(grid.shape[0], out_h)
    c0, c1, fc = _bilinear_taps(grid.shape[1], out_w)
    rows = grid[r0] * (1.0 - fr)[:, None] + grid[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]


def resize_nearest(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    grid = as_grid(grid)
    if out_h < 1 or out_w < 1:
        raise GridError(f"target size must be positive, got {out_h}x{out_w}")
    ri = np.minimum(((np.arange(out_h) + 0.5) * grid.shape[0] / out_h).astype(np.int64), grid.shape[0] - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * grid.shape[1] / out_w).astype(np.int64), grid.shape[1] - 1)
    return grid[np.ix_(ri, ci)]


# ---------------------------------------------------------------------------
# Normalization

@dataclass(frozen=True)
class NormalizationSpec:
    lo_db: float = 13.0
    hi_db: float = 160.0

    def __post_init__(self):
        if not (np.isfinite(self.lo_db) and np.isfinite(self.hi_db)) or self.lo_db >= self.hi_db:
            raise GridError(f"normalization needs lo_db < hi_db, got ({self.lo_db}, {self.hi_db})")


def normalize(values, spec: NormalizationSpec) -> np.ndarray:
    """Map ``[lo_db, hi_db]`` onto ``[0, 1]``, clamping outside values."""
    values = np.asarray(values, dtype=np.float64)
    return np.clip((values - spec.lo_db) / (spec.hi_db - spec.lo_db), 0.0, 1.0)


def denormalize(values, spec: NormalizationSpec) -> np.ndarray:
    return spec.lo_db + np.asarray(values, dtype=np.float64) * (spec.hi_db - spec.lo_db)


def iter_channels(stack: FeatureStack) -> Iterator[tuple[str, np.ndarray]]:
    yield from zip(stack.channel_names, stack.data)
