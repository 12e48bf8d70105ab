"""Raster terrain matching: overhead template correlation for 2D position fixes.

Buffered colorized ground points are projected onto a top-down template,
correlated against the pre-mission color raster over a window sized by the
current position uncertainty, and the correlation surface is condensed into a
position fix whose covariance is the weighted spread of the plausible offsets.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ZeroVarianceTemplateError
from .fixes import FixKind, TrnFix
from .maps import AprioriMap, RasterPatch

# Offsets are excluded when fewer than this fraction of template cells overlap
# valid map cells.
MIN_MUTUAL_OVERLAP = 0.5


def rasterize(points: np.ndarray, cell_size: float) -> RasterPatch:
    """Project colorized points onto a top-down grid of mean colors.

    ``points`` is (N, 6): x, y, z, r, g, b.  Cells containing no points are
    marked invalid.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] < 6:
        raise ValueError("need a non-empty (N, 6) xyzrgb point array")
    if cell_size <= 0:
        raise ValueError(f"cell size must be positive, got {cell_size}")
    ix = np.floor(pts[:, 0] / cell_size + 0.5).astype(int)
    iy = np.floor(pts[:, 1] / cell_size + 0.5).astype(int)
    x0, y0 = ix.min(), iy.min()
    nx = int(ix.max() - x0 + 1)
    ny = int(iy.max() - y0 + 1)
    flat = (iy - y0) * nx + (ix - x0)
    counts = np.bincount(flat, minlength=ny * nx).astype(float)
    sums = np.zeros((ny * nx, 3))
    for c in range(3):
        sums[:, c] = np.bincount(flat, weights=pts[:, 3 + c], minlength=ny * nx)
    valid = counts > 0
    colors = np.zeros((ny * nx, 3))
    colors[valid] = sums[valid] / counts[valid, None]
    return RasterPatch(
        colors=colors.reshape(ny, nx, 3),
        valid=valid.reshape(ny, nx),
        cell_size=cell_size,
        origin=np.array([x0, y0]) * cell_size,
    )


def search_window(
    cov_xy: np.ndarray,
    template_extent: float,
    k_sigma: float = 3.0,
    min_window: float = 3.0,
    max_window: float = np.inf,
) -> float:
    """Half-width (m) of the map region to search, proportional to the current
    position uncertainty plus room for the template itself."""
    cov = np.asarray(cov_xy, dtype=float).reshape(2, 2)
    sigma = float(np.sqrt(max(np.max(np.linalg.eigvalsh(0.5 * (cov + cov.T))), 0.0)))
    return float(np.clip(k_sigma * sigma + template_extent / 2.0, min_window, max_window))


@dataclass
class CorrelationSurface:
    """NCC score per candidate template offset.

    ``scores[iy, ix]`` is the score with the template displaced by
    ``displacement(iy, ix)`` meters from its nominal placement; invalid
    offsets (insufficient overlap or undefined variance) are masked out.
    """

    scores: np.ndarray
    valid: np.ndarray
    cell_size: float
    zero_offset_index: tuple[float, float]
    center_position: np.ndarray

    def displacements(self) -> tuple[np.ndarray, np.ndarray]:
        """(dx, dy) meter displacement grids matching ``scores``."""
        ny, nx = self.scores.shape
        dy = (np.arange(ny) - self.zero_offset_index[0]) * self.cell_size
        dx = (np.arange(nx) - self.zero_offset_index[1]) * self.cell_size
        return np.meshgrid(dx, dy)


def _corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-correlation of map-side ``a`` with template ``b`` (valid mode)."""
    return fftconvolve(a, b[::-1, ::-1], mode="valid")


def ncc_match(template: RasterPatch, map_patch: RasterPatch) -> CorrelationSurface:
    """Normalized cross-correlation of a template over a map patch.

    Scores are computed at every integer-cell offset using only mutually valid
    cells, jointly over the three color channels, so constant color shifts and
    positive rescalings of either side cancel.  Offsets where the mutual
    overlap drops below half the template's valid cells are masked.
    """
    if template.cell_size != map_patch.cell_size:
        raise ValueError("template and map cell sizes differ")
    th, tw = template.shape
    mh, mw = map_patch.shape
    if th > mh or tw > mw:
        raise ValueError(f"template {template.shape} does not fit inside map patch {map_patch.shape}")

    tval = template.valid.astype(float)
    t_valid_count = tval.sum()
    if t_valid_count == 0:
        raise ZeroVarianceTemplateError("template has no valid cells")
    tcols = np.where(template.valid[..., None], template.colors, 0.0)
    tv = tcols.reshape(-1, 3)[template.valid.ravel()]
    if float(np.var(tv)) < 1e-12:
        raise ZeroVarianceTemplateError("template color variance is zero on valid cells")

    mval = map_patch.valid.astype(float)
    mcols = np.where(map_patch.valid[..., None], map_patch.colors, 0.0)

    n_cells = _corr(mval, tval)
    n = 3.0 * n_cells
    st = _corr(mval, tcols.sum(axis=2) * tval)
    st2 = _corr(mval, (tcols**2).sum(axis=2) * tval)
    sm = _corr(mcols.sum(axis=2) * mval, tval)
    sm2 = _corr((mcols**2).sum(axis=2) * mval, tval)
    stm = sum(_corr(mcols[..., c] * mval, tcols[..., c] * tval) for c in range(3))

    with np.errstate(divide="ignore", invalid="ignore"):
        num = stm - st * sm / n
        var_t = np.maximum(st2 - st * st / n, 0.0)
        var_m = np.maximum(sm2 - sm * sm / n, 0.0)
        den = np.sqrt(var_t * var_m)
        scores = num / den

    valid = (n_cells >= MIN_MUTUAL_OVERLAP * t_valid_count) & (den > 1e-9) & np.isfinite(scores)
    scores = np.where(valid, np.clip(scores, -1.0, 1.0), 0.0)

    # Zero displacement = template at its rasterized position inside the map.
    zy = (template.origin[1] - map_patch.origin[1]) / map_patch.cell_size
    zx = (template.origin[0] - map_patch.origin[0]) / map_patch.cell_size
    return CorrelationSurface(
        scores=scores,
        valid=valid,
        cell_size=map_patch.cell_size,
        zero_offset_index=(zy, zx),
        center_position=np.zeros(2),
    )


def weighted_fix(
    surface: CorrelationSurface,
    stamp: float,
    accept_threshold: float = 0.5,
    weight_power: float = 8.0,
) -> TrnFix | None:
    """Condense a correlation surface into a 2D position fix.

    Weights are clipped-positive scores raised to a sharpening power; the fix
    position is the weighted mean offset applied to the surface's center
    position and the covariance is the weighted second central moment, floored
    at the single-cell quantization variance per axis.  Returns None when no
    offset clears the acceptance threshold (feature-sparse terrain).
    """
    ok = surface.valid & (surface.scores > accept_threshold)
    if not ok.any():
        return None
    w = np.where(surface.valid, np.maximum(surface.scores, 0.0), 0.0) ** weight_power
    total = w.sum()
    dx, dy = surface.displacements()
    mx = float((w * dx).sum() / total)
    my = float((w * dy).sum() / total)
    rx = dx - mx
    ry = dy - my
    cov = np.array(
        [
            [float((w * rx * rx).sum()), float((w * rx * ry).sum())],
            [float((w * rx * ry).sum()), float((w * ry * ry).sum())],
        ]
    ) / total
    floor = surface.cell_size**2 / 12.0
    cov[0, 0] = max(cov[0, 0], floor)
    cov[1, 1] = max(cov[1, 1], floor)
    peak = float(surface.scores[surface.valid].max())
    return TrnFix(
        kind=FixKind.POSITION_2D,
        value=surface.center_position + np.array([mx, my]),
        covariance=cov,
        stamp=stamp,
        source="atlis",
        diagnostics={"peak_score": peak, "n_candidates": int(ok.sum())},
    )


@dataclass
class AtlisConfig:
    cell_size: float = 0.3
    k_sigma: float = 3.0
    accept_threshold: float = 0.5
    weight_power: float = 8.0
    min_window: float = 3.0
    buffer_distance: float = 30.0
    max_points: int = 200_000
    min_template_cells: int = 50
    period: float = 5.0


class AtlisEngine:
    """Stateful worker: buffers colorized points in the local frame, matches
    them against the overhead raster on demand, emits position fixes."""

    def __init__(self, apriori: AprioriMap, config: AtlisConfig | None = None, rng=None):
        self.map = apriori
        self.config = config or AtlisConfig()
        self._buffer: deque = deque()
        self._rng = rng or np.random.default_rng(0)
        self.match_count = 0
        self.reject_count = 0

    def add_scan(self, points_local: np.ndarray, arc_length: float) -> None:
        """Buffer a colorized scan (already in the local frame) tagged with the
        local arc length at which it was taken."""
        if points_local.shape[0] == 0:
            return
        self._buffer.append((arc_length, np.asarray(points_local, dtype=float)))
        horizon = arc_length - self.config.buffer_distance
        while self._buffer and self._buffer[0][0] < horizon:
            self._buffer.popleft()

    def buffered_points(self) -> np.ndarray:
        if not self._buffer:
            return np.empty((0, 6))
        pts = np.vstack([p for _, p in self._buffer])
        if pts.shape[0] > self.config.max_points:
            keep = self._rng.choice(pts.shape[0], self.config.max_points, replace=False)
            pts = pts[np.sort(keep)]
        return pts

    def try_match(self, stamp: float, transform_lg, position_xy: np.ndarray, cov_xy: np.ndarray) -> TrnFix | None:
        """Attempt one template match.

        ``transform_lg`` carries the buffered points from L into G; the map
        window is centered on the current global position estimate and sized
        by its covariance.  Returns None when the terrain does not support a
        confident fix.
        """
        cfg = self.config
        pts = self.buffered_points()
        if pts.shape[0] == 0:
            return None
        pts_g = pts.copy()
        pts_g[:, :3] = transform_lg.apply(pts[:, :3])
        try:
            template = rasterize(pts_g, cfg.cell_size)
        except ValueError:
            return None
        if int(template.valid.sum()) < cfg.min_template_cells:
            self.reject_count += 1
            return None
        extent = max(template.extent())
        map_extent = max(self.map.color.extent())
        half = search_window(
            cov_xy, extent, cfg.k_sigma, cfg.min_window + extent / 2.0, map_extent
        )
        try:
            patch = self.map.color.window(np.asarray(position_xy), half)
            surface = ncc_match(template, patch)
        except (ValueError, ZeroVarianceTemplateError):
            self.reject_count += 1
            return None
        # A surface displacement shifts the buffered cloud onto the map, so the
        # corrected vehicle position is the current estimate plus that shift.
        surface.center_position = np.asarray(position_xy, dtype=float)
        fix = weighted_fix(surface, stamp, cfg.accept_threshold, cfg.weight_power)
        if fix is None:
            self.reject_count += 1
            return None
        self.match_count += 1
        return fix
