"""Raster patches and the georeferenced map bundle the TRN engines match against."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GridAnchor


@dataclass
class RasterPatch:
    """Grid of RGB cells with a validity mask.

    Arrays are indexed ``[iy, ix]``; the world position of a cell center is
    ``origin + (ix, iy) * cell_size`` with +x along columns and +y along rows.
    """

    colors: np.ndarray
    valid: np.ndarray
    cell_size: float
    origin: np.ndarray

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        if self.colors.ndim != 3 or self.colors.shape[2] != 3:
            raise ValueError(f"colors must be (ny, nx, 3), got {self.colors.shape}")
        if self.valid.shape != self.colors.shape[:2]:
            raise ValueError("validity mask does not match the color grid")
        if self.cell_size <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def extent(self) -> tuple[float, float]:
        """(x, y) side lengths in meters."""
        ny, nx = self.valid.shape
        return nx * self.cell_size, ny * self.cell_size

    def cell_center(self, iy: int, ix: int) -> np.ndarray:
        return self.origin + np.array([ix, iy]) * self.cell_size

    def window(self, center_xy: np.ndarray, half_width: float) -> "RasterPatch":
        """Axis-aligned sub-patch of cells within ``half_width`` of a point."""
        center = np.asarray(center_xy, dtype=float)
        lo = np.floor((center - half_width - self.origin) / self.cell_size).astype(int)
        hi = np.ceil((center + half_width - self.origin) / self.cell_size).astype(int)
        ny, nx = self.valid.shape
        x0, y0 = np.maximum(lo, 0)
        x1 = min(hi[0] + 1, nx)
        y1 = min(hi[1] + 1, ny)
        if x1 <= x0 or y1 <= y0:
            raise ValueError("window does not intersect the raster")
        return RasterPatch(
            colors=self.colors[y0:y1, x0:x1],
            valid=self.valid[y0:y1, x0:x1],
            cell_size=self.cell_size,
            origin=self.origin + np.array([x0, y0]) * self.cell_size,
        )


@dataclass
class AprioriMap:
    """Pre-mission overhead color + elevation rasters and a reference cloud,
    sharing one anchor transform onto the UTM-like grid."""

    color: RasterPatch
    elevation: np.ndarray
    cloud: np.ndarray
    anchor: GridAnchor = field(default_factory=GridAnchor)

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=float)
        if self.elevation.shape != self.color.shape:
            raise ValueError("elevation raster must match the color raster shape")
        self.cloud = np.asarray(self.cloud, dtype=float)
        if self.cloud.ndim != 2 or self.cloud.shape[1] not in (3, 6):
            raise ValueError("cloud must be (N, 3) or (N, 6) xyz[rgb]")

    def elevation_at(self, x: float, y: float) -> float:
        ix = int(round((x - self.color.origin[0]) / self.color.cell_size))
        iy = int(round((y - self.color.origin[1]) / self.color.cell_size))
        ny, nx = self.elevation.shape
        return float(self.elevation[np.clip(iy, 0, ny - 1), np.clip(ix, 0, nx - 1)])
