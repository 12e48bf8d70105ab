"""Deterministic synthetic worlds, trajectories, sensor streams and map products.

Worlds are flat-ground scenes (color field + boxes/cylinders) in four
archetypes: feature-sparse desert, cluttered urban, corridor-through-clutter
lake route, and a mixed forest clearing.  A pure-pursuit follower drives a
waypoint route with a trapezoidal speed profile and dwell stops; sensors are
sampled with configurable noise, bias and scripted wheel slip; the matching
(optionally edited or offset) overhead/point-cloud map products are rendered
from the same scene.  Identical scenario + seed gives bit-identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError
from .geometry import GridAnchor, Pose6D, wrap_angle
from .maps import AprioriMap, RasterPatch
from .proprioception import GRAVITY

# Ground color classes (RGB 0-255).
COLOR_GRASS = np.array([72.0, 110.0, 58.0])
COLOR_SAND = np.array([196.0, 178.0, 140.0])
COLOR_ASPHALT = np.array([62.0, 60.0, 64.0])
COLOR_DIRT = np.array([124.0, 96.0, 66.0])
COLOR_SOIL = np.array([148.0, 118.0, 88.0])
COLOR_WATER = np.array([52.0, 80.0, 120.0])


@dataclass
class Structure:
    """Axis-footprint scene element: an oriented box or a cylinder."""

    kind: str  # "box" | "cylinder"
    center: np.ndarray  # (2,) xy
    size: np.ndarray  # box: (width, depth); cylinder: (radius, radius)
    height: float
    yaw: float
    color: np.ndarray  # (3,)

    def footprint_radius(self) -> float:
        return float(np.linalg.norm(self.size) if self.kind == "box" else self.size[0])


@dataclass
class WorldModel:
    """Flat-ground scene: bounded color field plus structures."""

    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    cell_size: float
    color: np.ndarray  # (ny, nx, 3)
    structures: list[Structure] = field(default_factory=list)

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        if xmax <= xmin or ymax <= ymin:
            raise ScenarioError(f"degenerate world extent {self.extent}")
        for s in self.structures:
            if not (xmin < s.center[0] < xmax and ymin < s.center[1] < ymax):
                raise ScenarioError(f"structure at {s.center} outside the world extent")

    @property
    def origin(self) -> np.ndarray:
        """World position of color cell (0, 0) center."""
        return np.array([self.extent[0], self.extent[1]]) + self.cell_size / 2.0

    def color_at(self, xy: np.ndarray) -> np.ndarray:
        """Ground color at world positions (N, 2)."""
        pts = np.atleast_2d(xy)
        idx = np.floor((pts - [self.extent[0], self.extent[1]]) / self.cell_size).astype(int)
        ny, nx = self.color.shape[:2]
        ix = np.clip(idx[:, 0], 0, nx - 1)
        iy = np.clip(idx[:, 1], 0, ny - 1)
        return self.color[iy, ix]


# ---------------------------------------------------------------------------
# World generation


def _paint_polyline(color, extent, cell, polyline, width, value):
    """Paint a stripe of ``value`` along a polyline into the color grid."""
    ny, nx = color.shape[:2]
    x0, y0 = extent[0], extent[1]
    pts = np.asarray(polyline, dtype=float)
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        length = float(np.linalg.norm(seg))
        if length == 0:
            continue
        n_steps = max(int(length / (cell * 0.5)), 1)
        for t in np.linspace(0.0, 1.0, n_steps + 1):
            cx, cy = a + t * seg
            r = int(math.ceil(width / 2.0 / cell))
            ix = int((cx - x0) / cell)
            iy = int((cy - y0) / cell)
            xs = slice(max(ix - r, 0), min(ix + r + 1, nx))
            ys = slice(max(iy - r, 0), min(iy + r + 1, ny))
            gx, gy = np.meshgrid(np.arange(xs.start, xs.stop), np.arange(ys.start, ys.stop))
            px = x0 + (gx + 0.5) * cell
            py = y0 + (gy + 0.5) * cell
            close = (px - cx) ** 2 + (py - cy) ** 2 <= (width / 2.0) ** 2
            color[ys, xs][close] = value


def _paint_disk(color, extent, cell, center, radius, value):
    _paint_polyline(color, extent, cell, [center, center], radius * 2.0, value)


def _clearance_ok(center, radius, route, margin):
    """True if a structure footprint keeps ``margin`` meters from the route."""
    pts = np.asarray(route, dtype=float)
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        L2 = float(seg @ seg)
        t = 0.0 if L2 == 0 else float(np.clip((center - a) @ seg / L2, 0.0, 1.0))
        if np.linalg.norm(center - (a + t * seg)) < radius + margin:
            return False
    return True


def _mottle(rng, shape, sigma):
    """Smooth low-amplitude color texture (2x upsampled noise)."""
    coarse = rng.normal(0.0, sigma, (shape[0] // 2 + 1, shape[1] // 2 + 1, 1))
    return np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[: shape[0], : shape[1]]


@dataclass
class WorldSpec:
    """Declarative world description; see ``generate_world``."""

    archetype: str = "urban"
    extent: tuple = (0.0, 0.0, 240.0, 240.0)
    cell_size: float = 0.3
    route_hint: list = field(default_factory=list)  # polyline kept clear of structures
    n_buildings: int | None = None
    n_trees: int | None = None
    structures: list | None = None  # explicit list of Structure overrides generation


def generate_world(spec: WorldSpec, seed: int) -> WorldModel:
    """Build a deterministic world for the requested archetype.

    ``desert``: near-uniform sand with a faint trail along the route hint.
    ``urban``: building blocks, asphalt streets, high ground contrast.
    ``forest``: tree clutter, dirt road, soil patches, a few sheds.
    ``lake``: building clusters at the route ends, a long uniform beach
    corridor between them, water beyond the shoreline.
    ``corridor``: two parallel walls 8 m apart along a straight road.
    ``flat``: empty uniform ground (degenerate worst case).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57]))
    xmin, ymin, xmax, ymax = spec.extent
    cell = spec.cell_size
    nx = int(round((xmax - xmin) / cell))
    ny = int(round((ymax - ymin) / cell))
    if nx < 8 or ny < 8:
        raise ScenarioError(f"world extent {spec.extent} too small for cell {cell}")
    route = spec.route_hint or [
        [xmin + 0.3 * (xmax - xmin), ymin + 0.3 * (ymax - ymin)],
        [xmin + 0.7 * (xmax - xmin), ymin + 0.7 * (ymax - ymin)],
    ]
    structures: list[Structure] = []
    arch = spec.archetype

    if arch in ("desert", "flat"):
        color = np.tile(COLOR_SAND, (ny, nx, 1))
        if arch == "desert":
            color += _mottle(rng, (ny, nx), 1.5)
            _paint_polyline(color, spec.extent, cell, route, 2.5, COLOR_SAND - 14.0)
            for _ in range(3):
                c = rng.uniform([xmin + 20, ymin + 20], [xmax - 20, ymax - 20])
                if not _clearance_ok(c, 2.0, route, 6.0):
                    continue
                structures.append(
                    Structure("box", c, np.array([1.5, 1.5]), 0.8, rng.uniform(0, np.pi), COLOR_SOIL)
                )
    elif arch == "urban":
        color = np.tile(COLOR_GRASS, (ny, nx, 1))
        color += _mottle(rng, (ny, nx), 9.0)
        _paint_polyline(color, spec.extent, cell, route, 6.0, COLOR_ASPHALT)
        n_b = spec.n_buildings if spec.n_buildings is not None else 18
        tries = 0
        while len([s for s in structures if s.kind == "box"]) < n_b and tries < 400:
            tries += 1
            c = rng.uniform([xmin + 15, ymin + 15], [xmax - 15, ymax - 15])
            size = rng.uniform(6.0, 14.0, 2)
            if not _clearance_ok(c, float(np.linalg.norm(size) / 2), route, 5.0):
                continue
            shade = rng.uniform(90, 200)
            structures.append(
                Structure(
                    "box", c, size, float(rng.uniform(3.0, 8.0)), float(rng.uniform(0, np.pi)),
                    np.array([shade, shade * 0.95, shade * 0.9]),
                )
            )
        for s in structures:
            _paint_disk(color, spec.extent, cell, s.center, float(np.max(s.size)) / 2 + 2.0, COLOR_SOIL)
        n_t = spec.n_trees if spec.n_trees is not None else 25
        _scatter_trees(rng, structures, spec.extent, route, n_t)
    elif arch == "forest":
        color = np.tile(COLOR_GRASS, (ny, nx, 1))
        color += _mottle(rng, (ny, nx), 8.0)
        for _ in range(14):
            c = rng.uniform([xmin + 10, ymin + 10], [xmax - 10, ymax - 10])
            _paint_disk(color, spec.extent, cell, c, rng.uniform(4, 10), COLOR_SOIL + rng.normal(0, 4, 3))
        _paint_polyline(color, spec.extent, cell, route, 3.5, COLOR_DIRT)
        n_b = spec.n_buildings if spec.n_buildings is not None else 4
        for _ in range(n_b * 8):
            if len([s for s in structures if s.kind == "box"]) >= n_b:
                break
            c = rng.uniform([xmin + 15, ymin + 15], [xmax - 15, ymax - 15])
            size = rng.uniform(5.0, 9.0, 2)
            if not _clearance_ok(c, float(np.linalg.norm(size) / 2), route, 5.0):
                continue
            shade = rng.uniform(100, 170)
            structures.append(
                Structure("box", c, size, float(rng.uniform(3.0, 5.0)), float(rng.uniform(0, np.pi)),
                          np.array([shade, shade * 0.9, shade * 0.8]))
            )
        n_t = spec.n_trees if spec.n_trees is not None else 70
        _scatter_trees(rng, structures, spec.extent, route, n_t)
    elif arch == "lake":
        color = np.tile(COLOR_SAND, (ny, nx, 1))
        color += _mottle(rng, (ny, nx), 1.2)
        # Water beyond a shoreline along the +y edge.
        shoreline = ymax - 0.22 * (ymax - ymin)
        iy_shore = int((shoreline - ymin) / cell)
        color[iy_shore:, :] = COLOR_WATER
        route_pts = np.asarray(route, dtype=float)
        ends = [route_pts[0], route_pts[-1]]
        for k, end in enumerate(ends):
            crng = np.random.default_rng(np.random.SeedSequence([seed, 0x10 + k]))
            for _ in range(60):
                if len([s for s in structures if s.kind == "box"]) >= 6 * (k + 1):
                    break
                c = end + crng.uniform(-38, 38, 2)
                if not (xmin + 12 < c[0] < xmax - 12 and ymin + 12 < c[1] < shoreline - 14):
                    continue
                size = crng.uniform(6.0, 12.0, 2)
                if not _clearance_ok(c, float(np.linalg.norm(size) / 2), route, 5.0):
                    continue
                shade = crng.uniform(90, 190)
                structures.append(
                    Structure("box", c, size, float(crng.uniform(3.0, 7.0)),
                              float(crng.uniform(0, np.pi)),
                              np.array([shade, shade * 0.95, shade * 0.85]))
                )
        for s in structures:
            _paint_disk(color, spec.extent, cell, s.center, float(np.max(s.size)) / 2 + 2.0, COLOR_SOIL)
    elif arch == "corridor":
        color = np.tile(COLOR_DIRT, (ny, nx, 1))
        color += _mottle(rng, (ny, nx), 4.0)
        cx = 0.5 * (xmin + xmax)
        cy = 0.5 * (ymin + ymax)
        for side in (-4.0, 4.0):
            structures.append(
                Structure("box", np.array([cx, cy + side]), np.array([200.0, 0.4]), 3.0, 0.0,
                          np.array([150.0, 150.0, 150.0]))
            )
    else:
        raise ScenarioError(f"unknown world archetype {arch!r}")

    if spec.structures is not None:
        structures = list(spec.structures)
    color = np.clip(color, 0.0, 255.0)
    return WorldModel(extent=spec.extent, cell_size=cell, color=color, structures=structures)


def _scatter_trees(rng, structures, extent, route, count):
    xmin, ymin, xmax, ymax = extent
    placed = 0
    for _ in range(count * 6):
        if placed >= count:
            break
        c = rng.uniform([xmin + 6, ymin + 6], [xmax - 6, ymax - 6])
        r = float(rng.uniform(0.22, 0.45))
        if not _clearance_ok(c, r, route, 3.0):
            continue
        structures.append(
            Structure("cylinder", c, np.array([r, r]), float(rng.uniform(3.5, 7.0)), 0.0,
                      np.array([96.0, 74.0, 52.0]) + rng.normal(0, 5, 3))
        )
        placed += 1


# ---------------------------------------------------------------------------
# Trajectory generation (pure pursuit over waypoints, trapezoidal speed)


@dataclass
class RouteSpec:
    waypoints: list  # [[x, y], ...]
    speed: float = 2.5
    accel: float = 0.8
    dwell_at: list = field(default_factory=list)  # [(waypoint_index, seconds), ...]


@dataclass
class TruthTrajectory:
    stamps: np.ndarray
    positions: np.ndarray  # (N, 3)
    yaws: np.ndarray
    speeds: np.ndarray  # body forward speed
    yaw_rates: np.ndarray
    accels: np.ndarray  # body dv/dt

    def pose(self, i: int) -> Pose6D:
        return Pose6D.from_xyzrpy(*self.positions[i], yaw=self.yaws[i])


def _speed_profile(s, total, vmax, accel):
    """Trapezoidal speed as a function of arc position with soft floor."""
    v = min(vmax, math.sqrt(max(2.0 * accel * s, 0.0)), math.sqrt(max(2.0 * accel * (total - s), 0.0)))
    return max(v, 0.08)


def generate_trajectory(route: RouteSpec, rate: float = 100.0) -> TruthTrajectory:
    """Drive the waypoint route with a pure-pursuit follower.

    Legs between dwell stops get independent trapezoidal profiles; dwells hold
    the pose stationary.  Output is sampled at ``rate`` Hz.
    """
    wps = np.asarray(route.waypoints, dtype=float)
    if wps.shape[0] < 2:
        raise ScenarioError("route needs at least two waypoints")
    dwell_map = dict(route.dwell_at)
    stops = sorted({0, wps.shape[0] - 1} | set(dwell_map))
    legs = [(a, b) for a, b in zip(stops[:-1], stops[1:])]

    dt = 1.0 / rate
    x, y = wps[0]
    yaw = math.atan2(*(wps[1] - wps[0])[::-1])
    t = 0.0
    rows = [(t, x, y, yaw, 0.0, 0.0, 0.0)]

    def dwell(duration):
        nonlocal t
        n = int(round(duration * rate))
        for _ in range(n):
            t += dt
            rows.append((t, x, y, yaw, 0.0, 0.0, 0.0))

    if 0 in dwell_map:
        dwell(dwell_map[0])
    v_prev = 0.0
    for a, b in legs:
        path = wps[a : b + 1]
        seg_len = np.linalg.norm(np.diff(path, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        total = float(cum[-1])
        s = 0.0
        guard = int((total / 0.08 + 60.0) * rate)
        for _ in range(guard):
            if s >= total - 0.05:
                break
            v = _speed_profile(s, total, route.speed, route.accel)
            # Lookahead point along the polyline.
            ld = float(np.clip(1.6 * v, 2.0, 6.0))
            target_s = min(s + ld, total)
            k = int(np.searchsorted(cum, target_s, side="right") - 1)
            k = min(k, len(seg_len) - 1)
            frac = (target_s - cum[k]) / max(seg_len[k], 1e-9)
            target = path[k] + frac * (path[k + 1] - path[k])
            alpha = wrap_angle(math.atan2(target[1] - y, target[0] - x) - yaw)
            omega = float(np.clip(2.0 * v * math.sin(alpha) / ld, -1.2, 1.2))
            t += dt
            x += v * math.cos(yaw) * dt
            y += v * math.sin(yaw) * dt
            yaw = wrap_angle(yaw + omega * dt)
            s += v * dt
            rows.append((t, x, y, yaw, v, omega, (v - v_prev) / dt))
            v_prev = v
        # Stop at the leg end.
        if rows[-1][4] != 0.0:
            t += dt
            rows.append((t, x, y, yaw, 0.0, 0.0, -v_prev / dt))
            v_prev = 0.0
        if b in dwell_map and b != wps.shape[0] - 1:
            dwell(dwell_map[b])
    arr = np.array(rows)
    positions = np.zeros((arr.shape[0], 3))
    positions[:, :2] = arr[:, 1:3]
    return TruthTrajectory(
        stamps=arr[:, 0],
        positions=positions,
        yaws=arr[:, 3],
        speeds=arr[:, 4],
        yaw_rates=arr[:, 5],
        accels=arr[:, 6],
    )


# ---------------------------------------------------------------------------
# Sensor models


@dataclass
class ImuModel:
    accel_noise_std: float = 0.02
    gyro_noise_std: float = 0.002
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    mount_rpy: tuple = (0.0, 0.0, 0.0)


@dataclass
class InsModel:
    heading_bias: float = 0.0  # rad, added to true yaw
    heading_noise_std: float = 0.002
    attitude_noise_std: float = 0.001
    gyro_noise_std: float = 0.0008


@dataclass
class EncoderModel:
    noise_std: float = 0.01
    scale_error: float = 1.0  # encoder reads scale_error * true speed
    slip_episodes: list = field(default_factory=list)  # [(start_s, duration_s, ratio), ...]


@dataclass
class ScanModel:
    max_range: float = 30.0
    n_azimuth: int = 120
    noise_std: float = 0.025
    color_noise_std: float = 6.0
    sensor_height: float = 1.6
    ground_step: float = 2.0
    wall_step: float = 0.5
    rate: float = 1.0


@dataclass
class SensorSuite:
    imus: list = field(default_factory=lambda: [ImuModel() for _ in range(4)])
    ins: InsModel = field(default_factory=InsModel)
    encoder: EncoderModel = field(default_factory=EncoderModel)
    scan: ScanModel = field(default_factory=ScanModel)

    def __post_init__(self):
        for imu in self.imus:
            if imu.accel_noise_std < 0 or imu.gyro_noise_std < 0:
                raise ScenarioError("IMU noise parameters must be non-negative")
        for ep in self.encoder.slip_episodes:
            if ep[2] <= 0:
                raise ScenarioError("slip ratio must be positive")


# ---------------------------------------------------------------------------
# Scan raycasting (2D horizontal rays + vertical sampling on hit faces)


def _ray_hits_structures(origin, directions, structures, max_range):
    """Nearest structure hit per ray: (distance, structure index); misses get
    distance = max_range and index -1."""
    n = directions.shape[0]
    best_t = np.full(n, max_range)
    best_i = np.full(n, -1, dtype=int)
    for si, s in enumerate(structures):
        rel = s.center - origin
        if np.linalg.norm(rel) > max_range + s.footprint_radius():
            continue
        if s.kind == "cylinder":
            # |o + t d - c|^2 = r^2 with o at origin.
            oc = -rel
            b = directions @ oc
            c = float(oc @ oc) - s.size[0] ** 2
            disc = b * b - c
            hit = disc > 0
            t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
            t = np.where(t > 1e-6, t, np.inf)
        else:
            # Oriented-box slab test in the box frame.
            cy, sy = math.cos(s.yaw), math.sin(s.yaw)
            R = np.array([[cy, sy], [-sy, cy]])  # world -> box
            o = R @ (-rel)
            d = directions @ R.T
            half = s.size / 2.0
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t1 = (-half - o) * inv
                t2 = (half - o) * inv
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            # Parallel rays: valid only if origin inside the slab.
            par = np.abs(d) < 1e-12
            inside = np.abs(o) <= half
            tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
            near = np.max(tmin, axis=1)
            far = np.min(tmax, axis=1)
            t = np.where((near <= far) & (far > 0), np.maximum(near, 1e-6), np.inf)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = si
    return best_t, best_i


def simulate_scan(world: WorldModel, pose: Pose6D, model: ScanModel, rng) -> np.ndarray:
    """One colorized scan in the vehicle frame: ground points along each
    azimuth up to the first structure, wall points on the struck vertical
    face.  Rooftops are never sampled (ground perspective)."""
    origin = pose.position[:2]
    yaw = pose.yaw
    az = yaw + np.arange(model.n_azimuth) * (2.0 * np.pi / model.n_azimuth)
    dirs = np.c_[np.cos(az), np.sin(az)]
    hit_t, hit_i = _ray_hits_structures(origin, dirs, world.structures, model.max_range)

    pts = []
    radii = np.arange(2.0, model.max_range, model.ground_step)
    for k in range(model.n_azimuth):
        r_ground = radii[radii < hit_t[k]]
        if r_ground.size:
            g = origin + r_ground[:, None] * dirs[k]
            ground = np.zeros((r_ground.size, 6))
            ground[:, :2] = g
            ground[:, 3:] = world.color_at(g)
            pts.append(ground)
        if hit_i[k] >= 0:
            s = world.structures[hit_i[k]]
            zs = np.arange(0.25, s.height, model.wall_step)
            if zs.size:
                w = np.zeros((zs.size, 6))
                w[:, 0] = origin[0] + hit_t[k] * dirs[k, 0]
                w[:, 1] = origin[1] + hit_t[k] * dirs[k, 1]
                w[:, 2] = zs
                w[:, 3:] = s.color
                pts.append(w)
    if not pts:
        return np.empty((0, 6))
    cloud = np.vstack(pts)
    cloud[:, :3] += rng.normal(0.0, model.noise_std, (cloud.shape[0], 3))
    cloud[:, 3:] = np.clip(cloud[:, 3:] + rng.normal(0.0, model.color_noise_std, (cloud.shape[0], 3)), 0, 255)
    # World -> vehicle frame.
    R = pose.rotation()
    cloud[:, :3] = (cloud[:, :3] - pose.position) @ R
    return cloud


# ---------------------------------------------------------------------------
# A priori map products


def render_apriori(
    world: WorldModel,
    cell_size: float = 0.3,
    offset: np.ndarray | None = None,
    cloud_ground_step: float = 0.8,
    wall_dither: float = 0.08,
    seed: int = 0,
    anchor: GridAnchor | None = None,
) -> AprioriMap:
    """Top-down map products from a (possibly edited) world.

    ``offset`` shifts the georeference the products claim, modeling stale or
    misaligned source data: map content at true position p is labeled p +
    offset.  Vertical faces in the reference cloud carry a small sampling
    dither, the analog of meshing/resampling artifacts in real products.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA9]))
    off = np.zeros(2) if offset is None else np.asarray(offset, dtype=float)
    xmin, ymin, xmax, ymax = world.extent
    nx = int(round((xmax - xmin) / cell_size))
    ny = int(round((ymax - ymin) / cell_size))
    scale = int(round(cell_size / world.cell_size)) if cell_size >= world.cell_size else 1

    # Color raster: ground field resampled, structures painted from above.
    gx = xmin + (np.arange(nx) + 0.5) * cell_size
    gy = ymin + (np.arange(ny) + 0.5) * cell_size
    px, py = np.meshgrid(gx, gy)
    colors = world.color_at(np.c_[px.ravel(), py.ravel()]).reshape(ny, nx, 3).copy()
    elevation = np.zeros((ny, nx))
    for s in world.structures:
        cyw, syw = math.cos(s.yaw), math.sin(s.yaw)
        R = np.array([[cyw, syw], [-syw, cyw]])
        rel = np.c_[px.ravel() - s.center[0], py.ravel() - s.center[1]] @ R.T
        if s.kind == "cylinder":
            inside = (rel**2).sum(axis=1) <= s.size[0] ** 2
        else:
            inside = (np.abs(rel[:, 0]) <= s.size[0] / 2) & (np.abs(rel[:, 1]) <= s.size[1] / 2)
        inside = inside.reshape(ny, nx)
        colors[inside] = s.color
        elevation[inside] = s.height

    # Reference cloud: dense ground + dithered vertical faces.
    parts = []
    gxc = np.arange(xmin + cloud_ground_step / 2, xmax, cloud_ground_step)
    gyc = np.arange(ymin + cloud_ground_step / 2, ymax, cloud_ground_step)
    gpx, gpy = np.meshgrid(gxc, gyc)
    ground = np.zeros((gpx.size, 6))
    ground[:, 0] = gpx.ravel()
    ground[:, 1] = gpy.ravel()
    ground[:, 2] = rng.normal(0.0, 0.02, gpx.size)
    ground[:, 3:] = world.color_at(ground[:, :2])
    parts.append(ground)
    for s in world.structures:
        parts.append(_sample_structure_faces(s, rng, wall_dither))
    cloud = np.vstack(parts)
    cloud[:, :2] += off
    origin = np.array([xmin, ymin]) + cell_size / 2.0 + off

    raster = RasterPatch(
        colors=colors,
        valid=np.ones((ny, nx), dtype=bool),
        cell_size=cell_size,
        origin=origin,
    )
    return AprioriMap(
        color=raster,
        elevation=elevation,
        cloud=cloud,
        anchor=anchor or GridAnchor(),
    )


def _sample_structure_faces(s: Structure, rng, dither: float) -> np.ndarray:
    """Points on the vertical faces of a structure (never the top)."""
    zs = np.arange(0.2, s.height, 0.4)
    pts = []
    if s.kind == "cylinder":
        r = s.size[0]
        n_th = max(int(2 * np.pi * r / 0.25), 8)
        th = np.arange(n_th) * (2 * np.pi / n_th)
        ring = np.c_[r * np.cos(th), r * np.sin(th)]
        for z in zs:
            p = np.zeros((n_th, 6))
            p[:, :2] = s.center + ring
            p[:, 2] = z
            p[:, 3:] = s.color
            pts.append(p)
    else:
        cyw, syw = math.cos(s.yaw), math.sin(s.yaw)
        R = np.array([[cyw, -syw], [syw, cyw]])  # box -> world
        w, d = s.size
        edges = []
        for u in np.arange(-w / 2, w / 2, 0.3):
            edges.extend([(u, -d / 2), (u, d / 2)])
        for v in np.arange(-d / 2, d / 2, 0.3):
            edges.extend([(-w / 2, v), (w / 2, v)])
        edge = np.asarray(edges) @ R.T + s.center
        for z in zs:
            p = np.zeros((edge.shape[0], 6))
            p[:, :2] = edge
            p[:, 2] = z
            p[:, 3:] = s.color
            pts.append(p)
    cloud = np.vstack(pts)
    cloud[:, :2] += rng.normal(0.0, dither, (cloud.shape[0], 2))
    cloud[:, 2] += rng.normal(0.0, dither / 2, cloud.shape[0])
    return cloud


@dataclass
class MapEdit:
    """Region edit applied to the world before map rendering (staleness)."""

    region: tuple  # (x0, y0, x1, y1)
    recolor: tuple | None = None
    remove_structures: bool = False


def stale_apriori(
    world: WorldModel,
    edits: list[MapEdit] = (),
    offset: np.ndarray | None = None,
    cell_size: float = 0.3,
    seed: int = 0,
    anchor: GridAnchor | None = None,
) -> AprioriMap:
    """Render map products from an edited copy of the world, optionally with a
    global georeference offset.  The live world is untouched."""
    edited = WorldModel(
        extent=world.extent,
        cell_size=world.cell_size,
        color=world.color.copy(),
        structures=list(world.structures),
    )
    for e in edits:
        x0, y0, x1, y1 = e.region
        if not (world.extent[0] <= x0 <= x1 <= world.extent[2] and world.extent[1] <= y0 <= y1 <= world.extent[3]):
            raise ScenarioError(f"edit region {e.region} outside world bounds")
        if e.recolor is not None:
            i0 = int((x0 - world.extent[0]) / world.cell_size)
            i1 = int((x1 - world.extent[0]) / world.cell_size)
            j0 = int((y0 - world.extent[1]) / world.cell_size)
            j1 = int((y1 - world.extent[1]) / world.cell_size)
            edited.color[j0:j1, i0:i1] = np.asarray(e.recolor, dtype=float)
        if e.remove_structures:
            edited.structures = [
                s for s in edited.structures
                if not (x0 <= s.center[0] <= x1 and y0 <= s.center[1] <= y1)
            ]
    return render_apriori(edited, cell_size=cell_size, offset=offset, seed=seed, anchor=anchor)


# ---------------------------------------------------------------------------
# Full scenario simulation


@dataclass
class Scenario:
    """Complete simulator input; identical scenario + seed gives identical logs."""

    name: str
    seed: int
    world: WorldSpec
    route: RouteSpec
    sensors: SensorSuite = field(default_factory=SensorSuite)
    apriori_offset: tuple = (0.0, 0.0)
    apriori_edits: list = field(default_factory=list)
    apriori_cell: float = 0.3
    truth_rate: float = 100.0
    scan_rate: float = 1.0


@dataclass
class SimulationResult:
    scenario: Scenario
    world: WorldModel
    truth: TruthTrajectory
    truth_accels_body: np.ndarray  # (N, 3) incl. centripetal term
    imu: list  # per IMU: (stamps, specific_force (N,3), gyro (N,3))
    ins: tuple  # (stamps, rpy (N,3), omega (N,3))
    encoder: tuple  # (stamps, speeds)
    scans: list  # [(stamp, points_vehicle (M,6)), ...]
    apriori: AprioriMap


def _slip_factor(t, episodes):
    for start, duration, ratio in episodes:
        if start <= t < start + duration:
            return ratio
    return 1.0


def simulate(scenario: Scenario) -> SimulationResult:
    """Generate truth, all sensor streams and the map products for a scenario."""
    world = generate_world(scenario.world, scenario.seed)
    truth = generate_trajectory(scenario.route, scenario.truth_rate)
    xmin, ymin, xmax, ymax = world.extent
    if (
        truth.positions[:, 0].min() < xmin or truth.positions[:, 0].max() > xmax
        or truth.positions[:, 1].min() < ymin or truth.positions[:, 1].max() > ymax
    ):
        raise ScenarioError("trajectory exits the world bounds")

    ss = np.random.SeedSequence([scenario.seed, 0x5E])
    streams = ss.spawn(8)
    n = truth.stamps.size
    suite = scenario.sensors

    # Body-frame specific-force basis: forward accel + centripetal + gravity.
    a_body = np.zeros((n, 3))
    a_body[:, 0] = truth.accels
    a_body[:, 1] = truth.speeds * truth.yaw_rates
    omega_body = np.zeros((n, 3))
    omega_body[:, 2] = truth.yaw_rates
    f_body = a_body + np.array([0.0, 0.0, GRAVITY])

    imu_logs = []
    imu_streams = streams[0].spawn(len(suite.imus))
    for k, imu in enumerate(suite.imus):
        rng = np.random.default_rng(imu_streams[k])
        mount = Pose6D(np.zeros(3), np.asarray(imu.mount_rpy, dtype=float))
        R_m = mount.rotation()
        f_meas = f_body @ R_m + np.asarray(imu.accel_bias) + rng.normal(0, imu.accel_noise_std, (n, 3))
        w_meas = omega_body @ R_m + np.asarray(imu.gyro_bias) + rng.normal(0, imu.gyro_noise_std, (n, 3))
        imu_logs.append((truth.stamps.copy(), f_meas, w_meas))

    rng_ins = np.random.default_rng(streams[1])
    ins_rpy = np.zeros((n, 3))
    ins_rpy[:, 0] = rng_ins.normal(0, suite.ins.attitude_noise_std, n)
    ins_rpy[:, 1] = rng_ins.normal(0, suite.ins.attitude_noise_std, n)
    ins_rpy[:, 2] = wrap_angle(
        truth.yaws + suite.ins.heading_bias + rng_ins.normal(0, suite.ins.heading_noise_std, n)
    )
    ins_omega = omega_body + rng_ins.normal(0, suite.ins.gyro_noise_std, (n, 3))

    rng_enc = np.random.default_rng(streams[2])
    slip = np.array([_slip_factor(t, suite.encoder.slip_episodes) for t in truth.stamps])
    enc = suite.encoder.scale_error * slip * truth.speeds + rng_enc.normal(0, suite.encoder.noise_std, n)

    rng_scan = np.random.default_rng(streams[3])
    scans = []
    scan_interval = 1.0 / scenario.scan_rate
    next_scan = 0.0
    for i in range(n):
        if truth.stamps[i] + 1e-9 >= next_scan:
            pose = truth.pose(i)
            scans.append((float(truth.stamps[i]), simulate_scan(world, pose, suite.scan, rng_scan)))
            next_scan += scan_interval

    apriori = stale_apriori(
        world,
        edits=scenario.apriori_edits,
        offset=np.asarray(scenario.apriori_offset, dtype=float),
        cell_size=scenario.apriori_cell,
        seed=scenario.seed,
    )
    return SimulationResult(
        scenario=scenario,
        world=world,
        truth=truth,
        truth_accels_body=a_body,
        imu=imu_logs,
        ins=(truth.stamps.copy(), ins_rpy, ins_omega),
        encoder=(truth.stamps.copy(), enc),
        scans=scans,
        apriori=apriori,
    )
